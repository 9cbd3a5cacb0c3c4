//! Entropic optimal transport between the samples of a bag and the cluster
//! prototypes, with arbitrary cluster-size (row) marginals.
//!
//! The solver maximises `Tr(Qᵀ S) + ε·h(Q)` over the transport polytope
//! `U(w, a) = { Q ≥ 0 : Q·1 = w, Qᵀ·1 = a }` where `S` is the `K × n` matrix of
//! prototype/sample similarities, `w` the cluster proportions and `a` the
//! per-sample mass. Setting `w = 1/K` recovers the equipartition codes used by
//! prototype-swapping self-supervision.
//!
//! Iterations run in the log domain on dual potentials, so `S/ε` can reach
//! magnitudes of 10⁴ without overflow. All arithmetic is `f64`.

use ndarray::Array2;

use crate::error::{invalid, mismatch, Error, Result};

/// Tolerance on `Σw = 1` and `Σa = 1` accepted by [`MarginalSpec::new`].
pub const MARGINAL_SUM_TOL: f64 = 1e-6;

/// Default stopping tolerance on the L1 marginal residual.
pub const DEFAULT_TOL: f64 = 1e-8;

/// `K × n` prototype-vs-sample similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: Array2<f64>,
}

impl ScoreMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (k, n) = values.dim();
        if k < 2 {
            return Err(invalid(format!("score matrix needs at least 2 clusters, got {k}")));
        }
        if n < 1 {
            return Err(invalid("score matrix needs at least one sample"));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(invalid(format!("non-finite score {v} at ({i}, {j})")));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid("score rows have unequal lengths"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((k, n), flat).map_err(|e| invalid(e.to_string()))?;
        Self::new(values)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn clusters(&self) -> usize {
        self.values.nrows()
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }
}

/// Row (cluster proportions `w`) and column (sample mass `a`) marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSpec {
    row: Vec<f64>,
    col: Vec<f64>,
}

impl MarginalSpec {
    /// Validates both marginals and rescales each to sum to exactly one.
    pub fn new(row: Vec<f64>, col: Vec<f64>) -> Result<Self> {
        Ok(Self {
            row: normalized("row marginal", row)?,
            col: normalized("column marginal", col)?,
        })
    }

    /// Cluster proportions `w` with uniform sample mass `1/n`.
    pub fn with_uniform_columns(row: Vec<f64>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("column marginal must have at least one entry"));
        }
        Self::new(row, vec![1.0 / n as f64; n])
    }

    pub fn equipartition(k: usize, n: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("row marginal must have at least one entry"));
        }
        Self::with_uniform_columns(vec![1.0 / k as f64; k], n)
    }

    pub fn row(&self) -> &[f64] {
        &self.row
    }

    pub fn col(&self) -> &[f64] {
        &self.col
    }
}

fn normalized(what: &str, mut v: Vec<f64>) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid(format!("{what} is empty")));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < 0.0) {
        return Err(invalid(format!("{what} entry {i} is {x}; entries must be finite and non-negative")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > MARGINAL_SUM_TOL {
        return Err(invalid(format!("{what} sums to {sum}, expected 1")));
    }
    v.iter_mut().for_each(|x| *x /= sum);
    Ok(v)
}

/// Solver settings. `tol = None` runs exactly `max_iters` sweeps, which is how
/// the training loop calls it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: Option<f64>,
}

impl SinkhornParams {
    pub fn converged(epsilon: f64, max_iters: usize, tol: f64) -> Self {
        Self { epsilon, max_iters, tol: Some(tol) }
    }

    pub fn fixed(epsilon: f64, iters: usize) -> Self {
        Self { epsilon, max_iters: iters, tol: None }
    }
}

/// A coupling `Q` together with the marginals it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    /// `‖Q·1 − w‖₁ + ‖Qᵀ·1 − a‖₁` at return time.
    pub residual: f64,
    pub iterations_used: usize,
    /// False when a tolerance was requested and not met within `max_iters`.
    pub converged: bool,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl TransportPlan {
    pub fn clusters(&self) -> usize {
        self.values.nrows()
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }

    /// `Tr(Qᵀ S)`.
    pub fn objective(&self, scores: &ScoreMatrix) -> f64 {
        (&self.values * scores.values()).sum()
    }
}

pub fn marginal_residual(q: &Array2<f64>, row: &[f64], col: &[f64]) -> f64 {
    let r: f64 = q.rows().into_iter().zip(row).map(|(r, w)| (r.sum() - w).abs()).sum();
    let c: f64 = q.columns().into_iter().zip(col).map(|(c, a)| (c.sum() - a).abs()).sum();
    r + c
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Computes proportion-constrained codes by log-domain Sinkhorn–Knopp.
///
/// One iteration is a full row sweep followed by a column sweep, so the
/// returned plan always satisfies the column marginal up to rounding and the
/// residual is carried by the rows. Clusters with `w_k = 0` (and samples with
/// `a_j = 0`) are dropped before iterating and come back as zero rows
/// (columns).
pub fn solve_codes(
    scores: &ScoreMatrix,
    marginals: &MarginalSpec,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    let (k, n) = scores.values().dim();
    if marginals.row().len() != k {
        return Err(mismatch("solve_codes row marginal", k, marginals.row().len()));
    }
    if marginals.col().len() != n {
        return Err(mismatch("solve_codes column marginal", n, marginals.col().len()));
    }
    if !(params.epsilon > 0.0) || !params.epsilon.is_finite() {
        return Err(invalid(format!("epsilon must be positive, got {}", params.epsilon)));
    }
    if let Some(tol) = params.tol {
        if !(tol >= 0.0) {
            return Err(invalid(format!("tolerance must be non-negative, got {tol}")));
        }
    }

    let rows: Vec<usize> = (0..k).filter(|&i| marginals.row()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| marginals.col()[j] > 0.0).collect();
    let (kr, nc) = (rows.len(), cols.len());
    let log_w: Vec<f64> = rows.iter().map(|&i| marginals.row()[i].ln()).collect();
    let log_a: Vec<f64> = cols.iter().map(|&j| marginals.col()[j].ln()).collect();

    let inv_eps = 1.0 / params.epsilon;
    let kernel = Array2::from_shape_fn((kr, nc), |(r, c)| scores.values()[[rows[r], cols[c]]] * inv_eps);

    let mut f = vec![0.0; kr];
    let mut g = vec![0.0; nc];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = params.tol.is_none();

    let assemble = |f: &[f64], g: &[f64]| {
        let mut q = Array2::<f64>::zeros((k, n));
        for (r, &i) in rows.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                q[[i, j]] = (kernel[[r, c]] + f[r] + g[c]).exp();
            }
        }
        q
    };

    while iterations < params.max_iters {
        for r in 0..kr {
            let lse = log_sum_exp((0..nc).map(|c| kernel[[r, c]] + g[c]));
            f[r] = log_w[r] - lse;
        }
        for c in 0..nc {
            let lse = log_sum_exp((0..kr).map(|r| kernel[[r, c]] + f[r]));
            g[c] = log_a[c] - lse;
        }
        iterations += 1;

        if let Some(tol) = params.tol {
            residual = marginal_residual(&assemble(&f, &g), marginals.row(), marginals.col());
            if residual <= tol {
                converged = true;
                break;
            }
        }
    }

    let values = assemble(&f, &g);
    if params.tol.is_none() || iterations == 0 {
        residual = marginal_residual(&values, marginals.row(), marginals.col());
    }
    if let Some(tol) = params.tol {
        converged = residual <= tol;
    }

    Ok(TransportPlan {
        values,
        residual,
        iterations_used: iterations,
        converged,
        row_marginal: marginals.row().to_vec(),
        col_marginal: marginals.col().to_vec(),
    })
}

/// `−Σ Q log Q`, with `0·log 0 = 0`.
pub fn entropy(plan: &TransportPlan) -> f64 {
    matrix_entropy(&plan.values)
}

pub fn matrix_entropy(q: &Array2<f64>) -> f64 {
    -q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Entropy of the independent coupling `outer(w, a)`, the largest entropy any
/// plan in `U(w, a)` can have.
pub fn max_feasible_entropy(row: &[f64], col: &[f64]) -> f64 {
    let h = |v: &[f64]| -v.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    h(row) + h(col)
}

/// Replaces every column by the one-hot of its argmax row (lowest index wins
/// ties), scaled to the column's mass. Row marginals are generally not
/// preserved.
pub fn harden(plan: &TransportPlan) -> Array2<f64> {
    let (k, n) = plan.values.dim();
    let mut hard = Array2::zeros((k, n));
    for (j, column) in plan.values.columns().into_iter().enumerate() {
        let mut best = 0;
        for i in 1..k {
            if column[i] > column[best] {
                best = i;
            }
        }
        hard[[best, j]] = plan.col_marginal.get(j).copied().unwrap_or_else(|| column.sum());
    }
    hard
}

/// Exact maximiser of `Tr(Qᵀ S)` over `U(w, a)` for small instances with
/// uniform `a` and integral cluster counts `w·n`.
///
/// Explores integral assignments depth-first in lexicographic order (sample 0
/// first, lowest cluster first) with a capacity-aware upper bound; only strict
/// improvements replace the incumbent, so among tied optima the
/// lexicographically first assignment is returned.
pub fn lp_oracle(scores: &ScoreMatrix, marginals: &MarginalSpec) -> Result<TransportPlan> {
    let (k, n) = scores.values().dim();
    if marginals.row().len() != k || marginals.col().len() != n {
        return Err(mismatch("lp_oracle marginals", format!("{k} x {n}"), format!("{} x {}", marginals.row().len(), marginals.col().len())));
    }
    if k * n > 64 {
        return Err(Error::Unsupported(format!("lp_oracle is limited to K*n <= 64, got {}", k * n)));
    }
    let uniform = 1.0 / n as f64;
    if marginals.col().iter().any(|&a| (a - uniform).abs() > 1e-9) {
        return Err(Error::Unsupported("lp_oracle requires uniform column mass".into()));
    }
    let mut capacity = Vec::with_capacity(k);
    for &w in marginals.row() {
        let count = w * n as f64;
        let rounded = count.round();
        if (count - rounded).abs() > 1e-9 {
            return Err(Error::Unsupported(format!("w*n = {count} is not integral")));
        }
        capacity.push(rounded as usize);
    }

    struct Search<'a> {
        s: &'a Array2<f64>,
        k: usize,
        n: usize,
        capacity: Vec<usize>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn bound(&self, from: usize) -> f64 {
            (from..self.n)
                .map(|j| {
                    (0..self.k)
                        .filter(|&i| self.capacity[i] > 0)
                        .map(|i| self.s[[i, j]])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum()
        }

        fn run(&mut self, j: usize, value: f64) {
            if j == self.n {
                if self.best.as_ref().is_none_or(|(b, _)| value > *b + 1e-12) {
                    self.best = Some((value, self.current.clone()));
                }
                return;
            }
            if let Some((b, _)) = &self.best {
                if value + self.bound(j) <= *b + 1e-12 {
                    return;
                }
            }
            for i in 0..self.k {
                if self.capacity[i] == 0 {
                    continue;
                }
                self.capacity[i] -= 1;
                self.current.push(i);
                self.run(j + 1, value + self.s[[i, j]]);
                self.current.pop();
                self.capacity[i] += 1;
            }
        }
    }

    let mut search = Search {
        s: scores.values(),
        k,
        n,
        capacity,
        current: Vec::with_capacity(n),
        best: None,
    };
    search.run(0, 0.0);
    let (_, assignment) = search
        .best
        .ok_or_else(|| Error::Unsupported("no feasible integral assignment".into()))?;

    let mut values = Array2::zeros((k, n));
    for (j, &i) in assignment.iter().enumerate() {
        values[[i, j]] = uniform;
    }
    let residual = marginal_residual(&values, marginals.row(), marginals.col());
    Ok(TransportPlan {
        values,
        residual,
        iterations_used: 0,
        converged: true,
        row_marginal: marginals.row().to_vec(),
        col_marginal: marginals.col().to_vec(),
    })
}
