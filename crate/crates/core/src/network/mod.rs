//! Shared MLP adapter with one projector head per hierarchy level.
//!
//! ```text
//! features ──► adapter (D→H→S) ──► shared ──┬─► head[id]      (S→Q→P) ──► ẑ_id
//!                                           ├─► head[species] (S→Q→P) ──► ẑ_species
//!                                           └─► head[taxon]   (S→Q→P) ──► ẑ_taxon
//! ```
//!
//! Each two-layer block computes `act(X·W1 + b1)·W2 + b2`; head outputs are
//! L2-normalized row-wise. Gradients are derived by hand, including the
//! normalization Jacobian, and the shared-layer gradient accumulates every
//! head's contribution.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{keyed_rng, stream, Matrix};
use crate::taxonomy::Level;

/// Guard for the row normalization of head outputs.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("model has no {0} projector")]
    MissingHead(Level),
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Linear pass-through; mainly useful for tests.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub adapter_hidden: usize,
    pub shared_dim: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub activation: Activation,
    /// Levels that get a projector head, finest first.
    pub heads: Vec<Level>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_dim: 512,
            adapter_hidden: 512,
            shared_dim: 256,
            projector_hidden: 256,
            projector_out: 128,
            activation: Activation::Relu,
            heads: Level::ALL.to_vec(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let dims = [
            ("input_dim", self.input_dim),
            ("adapter_hidden", self.adapter_hidden),
            ("shared_dim", self.shared_dim),
            ("projector_hidden", self.projector_hidden),
            ("projector_out", self.projector_out),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(NetworkError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.heads.is_empty() {
            return Err(NetworkError::InvalidConfig("at least one projector head".into()));
        }
        if self.heads.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NetworkError::InvalidConfig(
                "heads must be distinct and ordered finest to coarsest".into(),
            ));
        }
        Ok(())
    }
}

/// An affine layer `X·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Dense {
            weight: Matrix::from_vec(inputs, outputs, data),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight);
        out.add_row_vector(&self.bias);
        out
    }
}

/// Two affine layers with an activation in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

impl Mlp {
    fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Mlp {
            hidden: Dense::zeros(inputs, hidden),
            output: Dense::zeros(hidden, outputs),
        }
    }

    fn forward(&self, x: &Matrix, act: Activation) -> (Matrix, MlpCache) {
        let pre = self.hidden.forward(x);
        let hidden = pre.map(|v| act.apply(v));
        let out = self.output.forward(&hidden);
        (
            out,
            MlpCache {
                input: x.clone(),
                pre,
                hidden,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂input`.
    fn backward(&self, cache: &MlpCache, grad_out: &Matrix, act: Activation, grads: &mut Mlp) -> Matrix {
        grads.output.weight.add_assign(&cache.hidden.t_matmul(grad_out));
        add_into(&mut grads.output.bias, &grad_out.sum_rows());
        let mut grad_pre = grad_out.matmul_t(&self.output.weight);
        for (g, &p) in grad_pre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *g *= act.derivative(p);
        }
        grads.hidden.weight.add_assign(&cache.input.t_matmul(&grad_pre));
        add_into(&mut grads.hidden.bias, &grad_pre.sum_rows());
        grad_pre.matmul_t(&self.hidden.weight)
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [
            self.hidden.weight.as_slice(),
            &self.hidden.bias,
            self.output.weight.as_slice(),
            &self.output.bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.hidden.weight.as_mut_slice(),
            &mut self.hidden.bias,
            self.output.weight.as_mut_slice(),
            &mut self.output.bias,
        ]
    }

    /// ReLU on/off pattern of the hidden layer; used to detect kinks in
    /// finite-difference checks.
    fn activation_pattern(cache: &MlpCache) -> impl Iterator<Item = bool> + '_ {
        cache.pre.as_slice().iter().map(|&p| p > 0.0)
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// All trainable weights. The same layout doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: ArchConfig,
    pub adapter: Mlp,
    /// One projector per entry of `arch.heads`, same order.
    pub heads: Vec<Mlp>,
}

/// Gradient of a scalar loss with respect to every entry of [`EncoderParams`].
pub type ParamGrads = EncoderParams;

/// Draws weights from `U(-1/√fan_in, 1/√fan_in)` with zero biases.
///
/// Tensors are filled in checkpoint order (adapter first, then heads finest
/// to coarsest), so a seed fixes every weight.
pub fn init_params(cfg: &ArchConfig, seed: u64) -> Result<EncoderParams, NetworkError> {
    cfg.validate()?;
    let mut rng = keyed_rng(seed, stream::INIT, 0);
    let adapter = Mlp {
        hidden: Dense::uniform(cfg.input_dim, cfg.adapter_hidden, &mut rng),
        output: Dense::uniform(cfg.adapter_hidden, cfg.shared_dim, &mut rng),
    };
    let heads = cfg
        .heads
        .iter()
        .map(|_| Mlp {
            hidden: Dense::uniform(cfg.shared_dim, cfg.projector_hidden, &mut rng),
            output: Dense::uniform(cfg.projector_hidden, cfg.projector_out, &mut rng),
        })
        .collect();
    Ok(EncoderParams {
        arch: cfg.clone(),
        adapter,
        heads,
    })
}

impl EncoderParams {
    pub fn zeros(cfg: &ArchConfig) -> Self {
        EncoderParams {
            arch: cfg.clone(),
            adapter: Mlp::zeros(cfg.input_dim, cfg.adapter_hidden, cfg.shared_dim),
            heads: cfg
                .heads
                .iter()
                .map(|_| Mlp::zeros(cfg.shared_dim, cfg.projector_hidden, cfg.projector_out))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams::zeros(&self.arch)
    }

    pub fn head(&self, level: Level) -> Result<&Mlp, NetworkError> {
        self.head_index(level).map(|i| &self.heads[i])
    }

    fn head_index(&self, level: Level) -> Result<usize, NetworkError> {
        self.arch
            .heads
            .iter()
            .position(|&l| l == level)
            .ok_or(NetworkError::MissingHead(level))
    }

    /// Parameter tensors in their fixed serialization order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.adapter.tensors().to_vec();
        for head in &self.heads {
            out.extend(head.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.adapter.tensors_mut().into_iter().collect();
        for head in &mut self.heads {
            out.extend(head.tensors_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Shared-layer embeddings without keeping a cache.
    pub fn embed(&self, features: &Matrix) -> Result<Matrix, NetworkError> {
        forward_shared(self, features).map(|(shared, _)| shared)
    }
}

#[derive(Debug, Clone)]
pub struct SharedCache {
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct ProjectorCache {
    pub level: Level,
    mlp: MlpCache,
    z: Matrix,
    norms: Vec<f64>,
}

/// ReLU on/off bits of every hidden unit, adapter first.
pub type ActivationPattern = Vec<bool>;

/// Everything one forward pass over all heads leaves behind for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub shared: SharedCache,
    pub projectors: Vec<ProjectorCache>,
}

impl ForwardCache {
    /// ReLU on/off bits of every hidden unit in the pass.
    pub fn activation_pattern(&self) -> ActivationPattern {
        let mut bits: Vec<bool> = Mlp::activation_pattern(&self.shared.mlp).collect();
        for p in &self.projectors {
            bits.extend(Mlp::activation_pattern(&p.mlp));
        }
        bits
    }
}

pub fn forward_shared(params: &EncoderParams, features: &Matrix) -> Result<(Matrix, SharedCache), NetworkError> {
    if features.cols() != params.arch.input_dim {
        return Err(NetworkError::ShapeMismatch {
            what: "adapter input",
            expected: (features.rows(), params.arch.input_dim),
            found: features.shape(),
        });
    }
    let (shared, mlp) = params.adapter.forward(features, params.arch.activation);
    Ok((shared, SharedCache { mlp }))
}

pub fn forward_projector(
    params: &EncoderParams,
    level: Level,
    shared: &Matrix,
) -> Result<(Matrix, ProjectorCache), NetworkError> {
    if shared.cols() != params.arch.shared_dim {
        return Err(NetworkError::ShapeMismatch {
            what: "projector input",
            expected: (shared.rows(), params.arch.shared_dim),
            found: shared.shape(),
        });
    }
    let head = params.head(level)?;
    let (mut z, mlp) = head.forward(shared, params.arch.activation);
    let mut norms = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let norm = crate::linalg::l2_norm(row);
        let denom = norm.max(NORM_EPS);
        for x in row.iter_mut() {
            *x /= denom;
        }
        norms.push(norm);
    }
    Ok((
        z.clone(),
        ProjectorCache {
            level,
            mlp,
            z,
            norms,
        },
    ))
}

/// Output of [`forward`]: shared embeddings plus one normalized projection per head.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub shared: Matrix,
    pub projections: Vec<(Level, Matrix)>,
    pub cache: ForwardCache,
}

/// Runs the adapter and every head of the model.
pub fn forward(params: &EncoderParams, features: &Matrix) -> Result<ForwardOutput, NetworkError> {
    let (shared, shared_cache) = forward_shared(params, features)?;
    let mut projections = Vec::with_capacity(params.heads.len());
    let mut caches = Vec::with_capacity(params.heads.len());
    for &level in &params.arch.heads {
        let (z, cache) = forward_projector(params, level, &shared)?;
        projections.push((level, z));
        caches.push(cache);
    }
    Ok(ForwardOutput {
        shared,
        projections,
        cache: ForwardCache {
            shared: shared_cache,
            projectors: caches,
        },
    })
}

/// Back-propagates `∂L/∂ẑ` for each head (and optionally an extra `∂L/∂shared`)
/// to every parameter.
///
/// `projector_grads` pairs each head cache with the gradient w.r.t. its
/// normalized output; heads may be omitted when they receive no gradient.
pub fn backward(
    params: &EncoderParams,
    shared_cache: &SharedCache,
    projector_grads: &[(&ProjectorCache, &Matrix)],
    grad_wrt_shared_extra: Option<&Matrix>,
) -> Result<ParamGrads, NetworkError> {
    let batch = shared_cache.mlp.input.rows();
    let act = params.arch.activation;
    let mut grads = params.zeros_like();
    let mut grad_shared = Matrix::zeros(batch, params.arch.shared_dim);
    if let Some(extra) = grad_wrt_shared_extra {
        if extra.shape() != grad_shared.shape() {
            return Err(NetworkError::ShapeMismatch {
                what: "shared gradient",
                expected: grad_shared.shape(),
                found: extra.shape(),
            });
        }
        grad_shared.add_assign(extra);
    }

    for (cache, grad_z) in projector_grads {
        if grad_z.shape() != cache.z.shape() {
            return Err(NetworkError::ShapeMismatch {
                what: "projection gradient",
                expected: cache.z.shape(),
                found: grad_z.shape(),
            });
        }
        if cache.mlp.input.rows() != batch {
            return Err(NetworkError::ShapeMismatch {
                what: "projector cache batch",
                expected: (batch, params.arch.shared_dim),
                found: cache.mlp.input.shape(),
            });
        }
        let idx = params.head_index(cache.level)?;
        // ∂ẑ/∂raw = (I − ẑẑᵀ)/‖raw‖ above the guard, I/ε below it.
        let mut grad_raw = (*grad_z).clone();
        for i in 0..batch {
            let norm = cache.norms[i];
            let z = cache.z.row(i);
            let g = grad_raw.row_mut(i);
            if norm > NORM_EPS {
                let zg = crate::linalg::dot(z, g);
                for (gj, &zj) in g.iter_mut().zip(z) {
                    *gj = (*gj - zj * zg) / norm;
                }
            } else {
                for gj in g.iter_mut() {
                    *gj /= NORM_EPS;
                }
            }
        }
        let grad_in = params.heads[idx].backward(&cache.mlp, &grad_raw, act, &mut grads.heads[idx]);
        grad_shared.add_assign(&grad_in);
    }

    params
        .adapter
        .backward(&shared_cache.mlp, &grad_shared, act, &mut grads.adapter);
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: OptimizerConfig,
    pub step: u64,
    first_moment: EncoderParams,
    second_moment: EncoderParams,
}

impl OptState {
    pub fn new(params: &EncoderParams, config: OptimizerConfig) -> Self {
        OptState {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One update:
/// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)` with bias-corrected `m̂`, `v̂`.
pub fn opt_step(params: &mut EncoderParams, grads: &ParamGrads, state: &mut OptState) -> Result<(), NetworkError> {
    if grads.arch != params.arch || state.first_moment.arch != params.arch {
        return Err(NetworkError::InvalidConfig(
            "gradient or optimizer state does not match the parameters".into(),
        ));
    }
    state.step += 1;
    let OptimizerConfig {
        lr,
        weight_decay,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bias1 = 1.0 - beta1.powi(state.step as i32);
    let bias2 = 1.0 - beta2.powi(state.step as i32);

    let grad_tensors = grads.tensors();
    let m_tensors = state.first_moment.tensors_mut();
    let v_tensors = state.second_moment.tensors_mut();
    for (((theta, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(m_tensors)
        .zip(v_tensors)
    {
        for k in 0..theta.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            theta[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[k]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            input_dim: 8,
            adapter_hidden: 16,
            shared_dim: 8,
            projector_hidden: 8,
            projector_out: 4,
            activation: Activation::Relu,
            heads: Level::ALL.to_vec(),
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = keyed_rng(seed, 99, 0);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params(&small_arch(), 3).unwrap();
        let b = init_params(&small_arch(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&small_arch(), 4).unwrap());
        assert_eq!(a.adapter.hidden.weight.shape(), (8, 16));
        assert_eq!(a.adapter.output.weight.shape(), (16, 8));
        assert_eq!(a.heads.len(), 3);
        assert!(a.adapter.hidden.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_variance_matches_uniform_formula() {
        let arch = ArchConfig {
            input_dim: 8,
            adapter_hidden: 1250,
            ..small_arch()
        };
        let params = init_params(&arch, 11).unwrap();
        let w = params.adapter.hidden.weight.as_slice();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = (1.0 / 8f64.sqrt()).powi(2) / 3.0;
        assert!((var - expected).abs() / expected < 0.2, "{var} vs {expected}");
    }

    #[test]
    fn invalid_arch_rejected() {
        let mut arch = small_arch();
        arch.shared_dim = 0;
        assert!(init_params(&arch, 0).is_err());
        let mut arch = small_arch();
        arch.heads = vec![Level::Species, Level::Individual];
        assert!(init_params(&arch, 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_shared() {
        let params = EncoderParams::zeros(&small_arch());
        let x = random_matrix(5, 8, 1);
        let (shared, _) = forward_shared(&params, &x).unwrap();
        assert!(shared.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_adapter_passes_features_through() {
        let arch = ArchConfig {
            input_dim: 4,
            adapter_hidden: 4,
            shared_dim: 4,
            activation: Activation::Identity,
            ..small_arch()
        };
        let mut params = EncoderParams::zeros(&arch);
        params.adapter.hidden.weight = Matrix::identity(4);
        params.adapter.output.weight = Matrix::identity(4);
        let x = random_matrix(3, 4, 2);
        let (shared, _) = forward_shared(&params, &x).unwrap();
        assert_eq!(shared, x);
    }

    #[test]
    fn shared_forward_matches_hand_rolled_oracle() {
        let params = init_params(&small_arch(), 5).unwrap();
        let x = random_matrix(1, 8, 3);
        let (shared, _) = forward_shared(&params, &x).unwrap();
        let ad = &params.adapter;
        let mut hidden = [0.0; 16];
        for (h, slot) in hidden.iter_mut().enumerate() {
            let mut acc = ad.hidden.bias[h];
            for d in 0..8 {
                acc += x[(0, d)] * ad.hidden.weight[(d, h)];
            }
            *slot = acc.max(0.0);
        }
        for s in 0..8 {
            let mut acc = ad.output.bias[s];
            for (h, &hv) in hidden.iter().enumerate() {
                acc += hv * ad.output.weight[(h, s)];
            }
            assert!((shared[(0, s)] - acc).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let params = init_params(&small_arch(), 5).unwrap();
        let x = random_matrix(2, 7, 3);
        assert!(matches!(forward_shared(&params, &x), Err(NetworkError::ShapeMismatch { .. })));
        let s = random_matrix(2, 3, 3);
        assert!(matches!(
            forward_projector(&params, Level::Taxon, &s),
            Err(NetworkError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn projector_rows_are_unit_or_zero() {
        let params = init_params(&small_arch(), 8).unwrap();
        let shared = random_matrix(6, 8, 4);
        let (z, _) = forward_projector(&params, Level::Species, &shared).unwrap();
        for row in z.row_iter() {
            let n = crate::linalg::l2_norm(row);
            assert!((n - 1.0).abs() <= 1e-9, "{n}");
        }

        let zeros = EncoderParams::zeros(&small_arch());
        let (z, _) = forward_projector(&zeros, Level::Species, &shared).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_raw_rows_unchanged() {
        let arch = ArchConfig {
            shared_dim: 4,
            projector_hidden: 4,
            projector_out: 4,
            activation: Activation::Identity,
            ..small_arch()
        };
        let mut params = EncoderParams::zeros(&arch);
        for head in &mut params.heads {
            head.hidden.weight = Matrix::identity(4);
            head.output.weight = Matrix::identity(4);
        }
        let shared = Matrix::from_vec(2, 4, vec![0.6, 0.8, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let (z, _) = forward_projector(&params, Level::Individual, &shared).unwrap();
        assert_eq!(z, shared);
    }

    #[test]
    fn missing_head() {
        let arch = ArchConfig {
            heads: vec![Level::Individual],
            ..small_arch()
        };
        let params = init_params(&arch, 1).unwrap();
        let shared = random_matrix(2, 8, 1);
        assert!(matches!(
            forward_projector(&params, Level::Taxon, &shared),
            Err(NetworkError::MissingHead(Level::Taxon))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let params = init_params(&small_arch(), 2).unwrap();
        let x = random_matrix(4, 8, 9);
        let out = forward(&params, &x).unwrap();
        let zero = Matrix::zeros(4, 4);
        let pairs: Vec<_> = out.cache.projectors.iter().map(|c| (c, &zero)).collect();
        let grads = backward(&params, &out.cache.shared, &pairs, None).unwrap();
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn shared_gradient_is_sum_of_heads() {
        let params = init_params(&small_arch(), 2).unwrap();
        let x = random_matrix(8, 8, 9);
        let out = forward(&params, &x).unwrap();
        let upstream: Vec<Matrix> = (0..3).map(|k| random_matrix(8, 4, 20 + k)).collect();
        let all: Vec<_> = out.cache.projectors.iter().zip(&upstream).collect();
        let combined = backward(&params, &out.cache.shared, &all, None).unwrap();

        let mut summed = params.zeros_like();
        for pair in &all {
            let single = backward(&params, &out.cache.shared, &[*pair], None).unwrap();
            for (acc, part) in summed.tensors_mut().into_iter().zip(single.tensors()) {
                for (a, b) in acc.iter_mut().zip(part) {
                    *a += b;
                }
            }
        }
        for (a, b) in combined.tensors().iter().zip(summed.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut params = init_params(&small_arch(), 2).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptState::new(
            &params,
            OptimizerConfig {
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
        );
        opt_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let arch = ArchConfig {
            input_dim: 1,
            adapter_hidden: 1,
            shared_dim: 1,
            projector_hidden: 1,
            projector_out: 1,
            activation: Activation::Relu,
            heads: vec![Level::Individual],
        };
        let mut params = EncoderParams::zeros(&arch);
        params.adapter.hidden.weight[(0, 0)] = 0.5;
        let mut grads = params.zeros_like();
        grads.adapter.hidden.weight[(0, 0)] = 1.0;
        let mut state = OptState::new(
            &params,
            OptimizerConfig {
                lr: 0.1,
                weight_decay: 0.0,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        );
        opt_step(&mut params, &grads, &mut state).unwrap();
        // m̂ = v̂ = 1 after bias correction, so Δθ = 0.1 / (1 + 1e-8).
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((params.adapter.hidden.weight[(0, 0)] - expected).abs() < 1e-15);
        assert_eq!(params.adapter.hidden.bias[0], 0.0);
    }
}
