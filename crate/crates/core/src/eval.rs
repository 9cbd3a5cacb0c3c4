//! Clustering and classification metrics: Hungarian-matched and identity
//! accuracy, NMI, ARI, a cosine kNN probe, a k-means baseline, and dense
//! class maps for rasters.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::datagen::{CenterFilter, PatchRaster, PatchSamples, SampleSource, UNLABELED};
use crate::error::{invalid, mismatch, Result};
use crate::model::{assign_clusters, encode, prototype_scores, ModelState};
use crate::seed::rng_for;

/// Maximum Lloyd iterations per k-means seed.
const KNN_BLOCK: usize = 256;

pub const KMEANS_MAX_ITERS: usize = 300;
const EMBED_BATCH: usize = 512;

/// `K_true × K_pred` counts; rows are true classes, columns clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(true_labels: &[usize], predicted: &[usize], k_true: usize, k_pred: usize) -> Result<Self> {
        if true_labels.len() != predicted.len() {
            return Err(mismatch("confusion matrix labels", true_labels.len(), predicted.len()));
        }
        let mut counts = Array2::zeros((k_true, k_pred));
        for (&t, &p) in true_labels.iter().zip(predicted) {
            if t >= k_true || p >= k_pred {
                return Err(invalid(format!("label pair ({t}, {p}) outside a {k_true}x{k_pred} table")));
            }
            counts[[t, p]] += 1;
        }
        Ok(Self { counts })
    }

    pub fn from_counts(counts: Array2<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// CSV with a header row of cluster ids and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in 0..self.counts.ncols() {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (t, row) in self.counts.rows().into_iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Minimum-cost perfect matching on a square integer matrix (rows to
/// columns), via shortest augmenting paths with potentials. Returns the cost
/// and `assignment[row] = col`.
fn min_cost_assignment(cost: &[Vec<i64>]) -> (i64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0, Vec::new());
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = INF;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[r0 - 1][col - 1] - u[r0] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    let total = assignment.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
    (total, assignment)
}

fn max_weight(weights: &[Vec<i64>]) -> i64 {
    let max = weights.iter().flatten().copied().max().unwrap_or(0);
    let cost: Vec<Vec<i64>> = weights.iter().map(|r| r.iter().map(|w| max - w).collect()).collect();
    let (c, _) = min_cost_assignment(&cost);
    max * weights.len() as i64 - c
}

/// Cluster→class permutation maximising the matched count
/// `Σ_c confusion[perm[c]][c]`, lexicographically smallest among optima.
pub fn hungarian_match(confusion: &ConfusionMatrix) -> Result<Vec<usize>> {
    let (rows, cols) = confusion.counts.dim();
    if rows != cols {
        return Err(mismatch("hungarian_match", format!("square matrix ({rows} x {rows})"), format!("{rows} x {cols}")));
    }
    let k = rows;
    let weight = |class: usize, cluster: usize| confusion.counts[[class, cluster]] as i64;
    let full: Vec<Vec<i64>> = (0..k).map(|c| (0..k).map(|t| weight(t, c)).collect()).collect();
    let best = max_weight(&full);

    let mut perm = Vec::with_capacity(k);
    let mut free: Vec<usize> = (0..k).collect();
    let mut fixed = 0i64;
    for cluster in 0..k {
        let mut chosen = None;
        for (slot, &class) in free.iter().enumerate() {
            let rest: Vec<usize> = free.iter().copied().filter(|&t| t != class).collect();
            let sub: Vec<Vec<i64>> = (cluster + 1..k)
                .map(|c| rest.iter().map(|&t| weight(t, c)).collect())
                .collect();
            if fixed + weight(class, cluster) + max_weight(&sub) == best {
                chosen = Some(slot);
                break;
            }
        }
        let slot = chosen.expect("some completion always attains the optimum");
        let class = free.remove(slot);
        fixed += weight(class, cluster);
        perm.push(class);
    }
    Ok(perm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracies {
    /// Accuracy with cluster `k` read as class `k`.
    pub acc_p: f64,
    /// Accuracy under the Hungarian cluster→class map.
    pub acc_h: f64,
    /// `permutation[cluster] = class`.
    pub permutation: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

impl Accuracies {
    /// Clusters map to different classes than their index.
    pub fn cluster_swap(&self) -> bool {
        self.permutation.iter().enumerate().any(|(c, &t)| c != t)
    }
}

pub fn accuracies(true_labels: &[usize], assignments: &[usize], k: usize) -> Result<Accuracies> {
    if true_labels.is_empty() {
        return Err(invalid("no samples to score"));
    }
    let confusion = ConfusionMatrix::new(true_labels, assignments, k, k)?;
    let n = true_labels.len() as f64;
    let diag: u64 = (0..k).map(|i| confusion.counts[[i, i]]).sum();
    let permutation = hungarian_match(&confusion)?;
    let matched: u64 = permutation.iter().enumerate().map(|(c, &t)| confusion.counts[[t, c]]).sum();
    Ok(Accuracies {
        acc_p: diag as f64 / n,
        acc_h: matched as f64 / n,
        permutation,
        confusion,
    })
}

struct Contingency {
    n: f64,
    cells: Vec<f64>,
    rows: Vec<f64>,
    cols: Vec<f64>,
    one_to_one: bool,
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(mismatch("partition lengths", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(invalid("partitions are empty"));
    }
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let one_to_one = cells.len() == rows.len() && cells.len() == cols.len();
    Ok(Contingency {
        n: a.len() as f64,
        cells: cells.into_values().map(|c| c as f64).collect(),
        rows: rows.into_values().map(|c| c as f64).collect(),
        cols: cols.into_values().map(|c| c as f64).collect(),
        one_to_one,
    })
}

/// Normalised mutual information with the geometric-mean normaliser
/// `I(U;V) / sqrt(H(U)·H(V))`. Two single-cluster partitions score 1; one
/// trivial partition against a non-trivial one scores 0.
pub fn nmi(labels: &[usize], assignments: &[usize]) -> Result<f64> {
    let t = contingency(labels, assignments)?;
    let h = |m: &[f64]| -m.iter().map(|&c| c / t.n * (c / t.n).ln()).sum::<f64>();
    let (hu, hv) = (h(&t.rows), h(&t.cols));
    if hu == 0.0 && hv == 0.0 {
        return Ok(1.0);
    }
    if hu == 0.0 || hv == 0.0 {
        return Ok(0.0);
    }
    // Σ n_ij/n · log(n·n_ij / (a_i b_j)) = Σ p_ij log p_ij + H(U) + H(V)
    let joint = -t.cells.iter().map(|&c| c / t.n * (c / t.n).ln()).sum::<f64>();
    let mi = (hu + hv - joint).max(0.0);
    Ok((mi / (hu * hv).sqrt()).clamp(0.0, 1.0))
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts. A zero denominator yields 1 for
/// identical partitions and 0 otherwise.
pub fn ari(labels: &[usize], assignments: &[usize]) -> Result<f64> {
    let t = contingency(labels, assignments)?;
    let index: f64 = t.cells.iter().map(|&c| choose2(c)).sum();
    let a: f64 = t.rows.iter().map(|&c| choose2(c)).sum();
    let b: f64 = t.cols.iter().map(|&c| choose2(c)).sum();
    let expected = a * b / choose2(t.n).max(f64::MIN_POSITIVE);
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(if t.one_to_one { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Majority vote among the `k` most cosine-similar training embeddings
/// (similarity ties go to the lower training index). Vote ties go to the
/// tied class whose member ranks nearest.
pub fn knn_classify(train_z: &Array2<f64>, train_labels: &[usize], test_z: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    if train_z.nrows() != train_labels.len() {
        return Err(mismatch("knn training labels", train_z.nrows(), train_labels.len()));
    }
    if k == 0 || k > train_z.nrows() {
        return Err(invalid(format!("k = {k} invalid for {} training samples", train_z.nrows())));
    }
    if train_z.ncols() != test_z.ncols() {
        return Err(mismatch("knn embedding dim", train_z.ncols(), test_z.ncols()));
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let vote = |row: ndarray::ArrayView1<f64>| {
        let closer = |&a: &usize, &b: &usize| row[b].total_cmp(&row[a]).then(a.cmp(&b));
        let mut order: Vec<usize> = (0..row.len()).collect();
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, closer);
            order.truncate(k);
        }
        order.sort_by(closer);
        let mut votes = vec![0usize; classes];
        order.iter().for_each(|&i| votes[train_labels[i]] += 1);
        let top = *votes.iter().max().expect("k >= 1");
        order
            .iter()
            .map(|&i| train_labels[i])
            .find(|&c| votes[c] == top)
            .expect("a neighbour carries the winning class")
    };
    // Row blocks keep the similarity matrix small for large test sets.
    let rows: Vec<usize> = (0..test_z.nrows()).collect();
    Ok(rows
        .par_chunks(KNN_BLOCK)
        .flat_map_iter(|block| {
            let sims = test_z.slice(ndarray::s![block[0]..block[0] + block.len(), ..]).dot(&train_z.t());
            sims.rows().into_iter().map(vote).collect::<Vec<_>>()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub seed: u64,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Index into `runs` of the lowest-inertia run (first on ties).
    pub best: usize,
    pub runs: Vec<KMeansRun>,
}

impl KMeansResult {
    pub fn best_run(&self) -> &KMeansRun {
        &self.runs[self.best]
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: ndarray::ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm, once per seed.
///
/// Seeding picks a random first point, then repeatedly the point farthest
/// from the centroids chosen so far. A cluster that empties during the
/// iterations is re-seeded at the point farthest from its own centroid.
pub fn kmeans(z: &Array2<f64>, k: usize, seeds: &[u64]) -> Result<KMeansResult> {
    let n = z.nrows();
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} invalid for {n} points")));
    }
    if seeds.is_empty() {
        return Err(invalid("k-means needs at least one seed"));
    }
    let runs: Vec<KMeansRun> = seeds.iter().map(|&seed| kmeans_once(z, k, seed)).collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| runs[a].inertia.total_cmp(&runs[b].inertia).then(a.cmp(&b)))
        .expect("non-empty");
    Ok(KMeansResult { best, runs })
}

fn kmeans_once(z: &Array2<f64>, k: usize, seed: u64) -> KMeansRun {
    let n = z.nrows();
    let mut rng = rng_for(seed, &[0xC1u64]);
    let mut centroids = Array2::zeros((k, z.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&z.row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(first))).collect();
    for c in 1..k {
        let far = (0..n).max_by(|&a, &b| min_d[a].total_cmp(&min_d[b]).then(b.cmp(&a))).expect("n > 0");
        centroids.row_mut(c).assign(&z.row(far));
        for i in 0..n {
            min_d[i] = min_d[i].min(sq_dist(z.row(i), z.row(far)));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(z.row(i), &centroids);
            dist[i] = d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(assignments[i]);
            row += &z.row(i);
            counts[assignments[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = centroids.row_mut(c);
                row.assign(&sums.row(c));
                row /= counts[c] as f64;
            } else {
                let far = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))).expect("n > 0");
                centroids.row_mut(c).assign(&z.row(far));
                dist[far] = 0.0;
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(z.row(i), centroids.row(assignments[i]))).sum();
    KMeansRun { seed, assignments, inertia, iterations }
}

/// Unit-norm embeddings of every sample of `source`, in order.
pub fn embed_source(model: &ModelState, source: &dyn SampleSource) -> Result<Array2<f64>> {
    let d = source.input_dim();
    let chunks: Vec<(usize, usize)> = (0..source.len())
        .step_by(EMBED_BATCH)
        .map(|s| (s, (s + EMBED_BATCH).min(source.len())))
        .collect();
    let parts: Vec<Array2<f64>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut x = Array2::<f64>::zeros((end - start, d));
            let mut buf = vec![0f32; d];
            for (r, i) in (start..end).enumerate() {
                source.write_sample(i, &mut buf);
                x.row_mut(r).iter_mut().zip(&buf).for_each(|(o, &v)| *o = v as f64);
            }
            encode(model, x.view()).map(|(z, _)| z.into_values())
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((source.len(), model.config.embed_dim));
    for (&(start, end), part) in chunks.iter().zip(parts) {
        out.slice_mut(ndarray::s![start..end, ..]).assign(&part);
    }
    Ok(out)
}

/// Highest-scoring prototype per embedding row.
pub fn prototype_assignments(model: &ModelState, z: &Array2<f64>) -> Result<Vec<usize>> {
    let batch = crate::model::EmbeddingBatch::from_unnormalized(z.clone());
    Ok(assign_clusters(&prototype_scores(model, &batch)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub acc_p: f64,
    pub acc_h: f64,
    pub nmi: f64,
    pub ari: f64,
    pub knn_acc: Option<f64>,
    pub permutation: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_assignments(true_labels: &[usize], assignments: &[usize], k: usize) -> Result<Self> {
        let acc = accuracies(true_labels, assignments, k)?;
        Ok(Self {
            acc_p: acc.acc_p,
            acc_h: acc.acc_h,
            nmi: nmi(true_labels, assignments)?,
            ari: ari(true_labels, assignments)?,
            knn_acc: None,
            permutation: acc.permutation,
            confusion: acc.confusion,
        })
    }

    pub fn cluster_swap(&self) -> bool {
        self.acc_p < self.acc_h
    }
}

fn labels_of(source: &dyn SampleSource) -> Result<Vec<usize>> {
    source.labels().ok_or_else(|| invalid("evaluation samples must all be labelled"))
}

/// Scores prototype assignments on `test`, plus the kNN probe trained on
/// `train` when given.
pub fn evaluate(
    model: &ModelState,
    test: &dyn SampleSource,
    train: Option<&dyn SampleSource>,
    knn_k: usize,
) -> Result<MetricsReport> {
    let k = model.config.cluster_count;
    let test_labels = labels_of(test)?;
    if let Some(&l) = test_labels.iter().find(|&&l| l >= k) {
        return Err(invalid(format!("test label {l} outside the model's {k} clusters")));
    }
    let test_z = embed_source(model, test)?;
    let assignments = prototype_assignments(model, &test_z)?;
    let mut report = MetricsReport::from_assignments(&test_labels, &assignments, k)?;
    if let Some(train) = train {
        let train_labels = labels_of(train)?;
        let train_z = embed_source(model, train)?;
        let predicted = knn_classify(&train_z, &train_labels, &test_z, knn_k.min(train_labels.len()))?;
        let hits = predicted.iter().zip(&test_labels).filter(|(p, t)| p == t).count();
        report.knn_acc = Some(hits as f64 / test_labels.len() as f64);
    }
    Ok(report)
}

/// Per-seed metrics of k-means on frozen features, with `K` clusters.
pub fn kmeans_baseline(z: &Array2<f64>, labels: &[usize], k: usize, seeds: &[u64]) -> Result<Vec<MetricsReport>> {
    let result = kmeans(z, k, seeds)?;
    result
        .runs
        .iter()
        .map(|run| MetricsReport::from_assignments(labels, &run.assignments, k))
        .collect()
}

/// Dense class map: each pixel with a full patch window gets the class its
/// best prototype maps to under `permutation`; border pixels are
/// [`UNLABELED`].
pub fn predict_map(model: &ModelState, raster: &PatchRaster, permutation: &[usize]) -> Result<Vec<i32>> {
    if raster.patch_len() != model.config.input_dim {
        return Err(mismatch("predict_map patch length", model.config.input_dim, raster.patch_len()));
    }
    if permutation.len() != model.config.cluster_count {
        return Err(mismatch("predict_map permutation", model.config.cluster_count, permutation.len()));
    }
    let centers = raster.centers(CenterFilter::All);
    let samples = PatchSamples::new(raster, centers)?;
    let z = embed_source(model, &samples)?;
    let clusters = prototype_assignments(model, &z)?;
    let mut map = vec![UNLABELED; raster.height * raster.width];
    for (&(row, col), &c) in samples.centers.iter().zip(&clusters) {
        map[row * raster.width + col] = permutation[c] as i32;
    }
    Ok(map)
}

/// Binary PGM (P5): header `P5\n<W> <H>\n255\n`, then one byte per pixel,
/// row-major. Class ids are written as-is, [`UNLABELED`] as 255.
pub fn encode_pgm(map: &[i32], width: usize, height: usize) -> Result<Vec<u8>> {
    if map.len() != width * height {
        return Err(mismatch("class map size", width * height, map.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &c in map {
        out.push(match c {
            UNLABELED => 255,
            c if (0..255).contains(&c) => c as u8,
            c => return Err(invalid(format!("class id {c} does not fit a PGM byte"))),
        });
    }
    Ok(out)
}
