//! Encoder, prototype bank and temperature-scaled softmax head.
//!
//! The encoder is an MLP (affine + ReLU hidden layers, a linear projection
//! head) whose output rows are projected onto the unit sphere. Prototypes are
//! `K` unit-norm rows of dimension `m`; scores are cosine similarities
//! `S = V Zᵀ`. Everything here is computed in `f64`. Under
//! [`Precision::F32`] the stored parameters are rounded to `f32` after every
//! write, which keeps checkpoints lossless.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::ot::ScoreMatrix;
use crate::seed::rng_for;

/// Pre-normalisation norms below this are nudged along a fixed direction.
pub const MIN_EMBED_NORM: f64 = 1e-12;
const NUDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    pub cluster_count: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_embed_dim() -> usize {
    32
}

fn default_temperature() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize, cluster_count: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            embed_dim,
            cluster_count,
            temperature: default_temperature(),
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.cluster_count == 0 {
            return Err(invalid("model dimensions must be at least 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(invalid("hidden layer widths must be at least 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Affine map `x ↦ W x + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Encoder parameters plus the prototype bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub hidden: Vec<Layer>,
    pub projection: Layer,
    /// `K × m`, unit-norm rows.
    pub prototypes: Array2<f64>,
}

/// Parameter-shaped gradient record.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<Layer>,
    pub projection: Layer,
    pub prototypes: Array2<f64>,
}

macro_rules! param_iter {
    ($self:ident, $iter:ident, $chain:ident) => {
        $self
            .hidden
            .$chain()
            .flat_map(|l| l.weight.$iter().chain(l.bias.$iter()))
            .chain($self.projection.weight.$iter())
            .chain($self.projection.bias.$iter())
            .chain($self.prototypes.$iter())
    };
}

impl ModelState {
    /// Parameters in declaration order: each hidden layer's weight then bias,
    /// the projection weight and bias, then the prototypes.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        param_iter!(self, iter, iter)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        param_iter!(self, iter_mut, iter_mut)
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    pub fn renormalize_prototypes(&mut self) {
        for mut row in self.prototypes.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
    }

    /// Rounds every parameter to the configured storage precision.
    pub fn quantize(&mut self) {
        if self.config.precision == Precision::F32 {
            self.params_mut().for_each(|p| *p = *p as f32 as f64);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    /// An all-zero state with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::with_capacity(config.hidden_dims.len());
        let mut width = config.input_dim;
        for &h in &config.hidden_dims {
            hidden.push(Layer::zeros(width, h));
            width = h;
        }
        let projection = Layer::zeros(width, config.embed_dim);
        let prototypes = Array2::zeros((config.cluster_count, config.embed_dim));
        Ok(Self { config, hidden, projection, prototypes })
    }
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            hidden: state
                .hidden
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
            projection: Layer::zeros(state.projection.inputs(), state.projection.outputs()),
            prototypes: Array2::zeros(state.prototypes.raw_dim()),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        param_iter!(self, iter, iter)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        param_iter!(self, iter_mut, iter_mut)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        self.values_mut().zip(other.values()).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|g| g.is_finite())
    }
}

/// `n × m` matrix of unit-norm embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    values: Array2<f64>,
}

impl EmbeddingBatch {
    /// Row-normalises `values`; used for embeddings coming from elsewhere.
    pub fn from_unnormalized(mut values: Array2<f64>) -> Self {
        for mut row in values.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        Self { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Column-stochastic `K × n` matrix of cluster probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    values: Array2<f64>,
}

impl ProbMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn from_columns_unchecked(values: Array2<f64>) -> Self {
        Self { values }
    }
}

/// Activations retained by [`encode`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l+1]` the ReLU output of
    /// hidden layer `l`. The last entry feeds the projection.
    inputs: Vec<Array2<f64>>,
    /// Pre-ReLU activations of each hidden layer.
    pre_activations: Vec<Array2<f64>>,
    /// Norms of the (possibly nudged) projected rows.
    norms: Array1<f64>,
    embeddings: Array2<f64>,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }
}

/// Seeded initialisation: weights `U(−b, b)` with `b = sqrt(6/(fan_in+fan_out))`,
/// zero biases, Gaussian prototypes normalised to the unit sphere.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ModelState> {
    let mut state = ModelState::zeros(config)?;
    let mut rng = rng_for(seed, &[0x1D17]);
    let fill = |layer: &mut Layer, rng: &mut rand_chacha::ChaCha8Rng| {
        let bound = (6.0 / (layer.inputs() + layer.outputs()) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        layer.weight.iter_mut().for_each(|w| *w = dist.sample(rng));
    };
    for layer in &mut state.hidden {
        fill(layer, &mut rng);
    }
    fill(&mut state.projection, &mut rng);
    state
        .prototypes
        .iter_mut()
        .for_each(|v| *v = StandardNormal.sample(&mut rng));
    state.renormalize_prototypes();
    state.quantize();
    Ok(state)
}

/// Forward pass producing unit-norm embeddings and the backward cache.
pub fn encode(state: &ModelState, batch: ArrayView2<f64>) -> Result<(EmbeddingBatch, ForwardCache)> {
    if batch.ncols() != state.config.input_dim {
        return Err(mismatch("encode input columns", state.config.input_dim, batch.ncols()));
    }
    let mut inputs = Vec::with_capacity(state.hidden.len() + 1);
    let mut pre_activations = Vec::with_capacity(state.hidden.len());
    inputs.push(batch.to_owned());
    for layer in &state.hidden {
        let pre = layer.forward(&inputs.last().expect("non-empty").view());
        inputs.push(pre.mapv(|x| x.max(0.0)));
        pre_activations.push(pre);
    }
    let mut projected = state.projection.forward(&inputs.last().expect("non-empty").view());
    let m = projected.ncols();
    let fallback = 1.0 / (m as f64).sqrt();
    let mut norms = Array1::zeros(projected.nrows());
    for (mut row, norm) in projected.rows_mut().into_iter().zip(norms.iter_mut()) {
        let mut r = row.dot(&row).sqrt();
        if r < MIN_EMBED_NORM {
            row.mapv_inplace(|y| y + NUDGE * fallback);
            r = row.dot(&row).sqrt();
        }
        *norm = r;
        row /= r;
    }
    let cache = ForwardCache {
        inputs,
        pre_activations,
        norms,
        embeddings: projected.clone(),
    };
    Ok((EmbeddingBatch { values: projected }, cache))
}

/// `S = V Zᵀ`, a `K × n` matrix of cosine similarities.
pub fn prototype_scores(state: &ModelState, z: &EmbeddingBatch) -> Result<ScoreMatrix> {
    if z.values.ncols() != state.prototypes.ncols() {
        return Err(mismatch("prototype_scores embedding dim", state.prototypes.ncols(), z.values.ncols()));
    }
    ScoreMatrix::new(state.prototypes.dot(&z.values.t()))
}

/// Column-wise softmax of `S/τ`.
pub fn probabilities(scores: &ScoreMatrix, temperature: f64) -> Result<ProbMatrix> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let mut values = scores.values() / temperature;
    for mut col in values.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|x| (x - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    Ok(ProbMatrix { values })
}

/// Index of the highest-scoring prototype for every sample (lowest index on
/// ties).
pub fn assign_clusters(scores: &ScoreMatrix) -> Vec<usize> {
    scores
        .values()
        .columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for i in 1..col.len() {
                if col[i] > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Back-propagates `∂L/∂S` through the scores, the unit-sphere projection and
/// the MLP.
pub fn backward(state: &ModelState, cache: &ForwardCache, grad_scores: &Array2<f64>) -> Result<Gradients> {
    let k = state.prototypes.nrows();
    let n = cache.embeddings.nrows();
    if grad_scores.dim() != (k, n) {
        return Err(mismatch(
            "backward score gradient",
            format!("{k} x {n}"),
            format!("{} x {}", grad_scores.nrows(), grad_scores.ncols()),
        ));
    }
    let z = &cache.embeddings;
    let mut grads = Gradients::zeros_like(state);

    // S = V Zᵀ
    grads.prototypes = grad_scores.dot(z);
    let grad_z = grad_scores.t().dot(&state.prototypes);

    // z = y / ‖y‖  ⇒  ∂y = (∂z − z (z·∂z)) / ‖y‖
    let radial = (&grad_z * z).sum_axis(Axis(1));
    let mut grad_y = grad_z - &(z * &radial.insert_axis(Axis(1)));
    grad_y /= &cache.norms.view().insert_axis(Axis(1));

    let proj_input = cache.inputs.last().expect("non-empty");
    grads.projection.weight = grad_y.t().dot(proj_input);
    grads.projection.bias = grad_y.sum_axis(Axis(0));
    let mut upstream = grad_y.dot(&state.projection.weight);

    for l in (0..state.hidden.len()).rev() {
        let mut grad_pre = upstream;
        grad_pre.zip_mut_with(&cache.pre_activations[l], |g, &pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        grads.hidden[l].weight = grad_pre.t().dot(&cache.inputs[l]);
        grads.hidden[l].bias = grad_pre.sum_axis(Axis(0));
        upstream = grad_pre.dot(&state.hidden[l].weight);
    }
    Ok(grads)
}

/// Draws a random unit vector; used by tests and generators.
pub fn random_unit_vector(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    let mut v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.dot(&v).sqrt();
    v /= norm;
    v
}
