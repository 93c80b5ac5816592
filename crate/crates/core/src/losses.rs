//! Supervised and hierarchical multi-label contrastive objectives.
//!
//! For an anchor `i` and positive `p` the pair term is the cross-entropy
//!
//! ```text
//! ℓ(i, p) = −log( exp(zᵢ·zₚ/τ) / Σ_{n≠i} exp(zᵢ·zₙ/τ) )  ≥ 0
//! ```
//!
//! A level loss averages `ℓ` over each anchor's positives and sums over
//! anchors; anchors without positives are skipped. The hierarchical loss is
//! `(1/|L|) Σ_l λ_l · level_loss(l)`. The constrained variant replaces every
//! pair term at level `l` by `max(ℓ, ℓ_max(l−1))`, where `ℓ_max(l−1)` is the
//! largest unclamped pair term of the next finer level in the same batch,
//! held constant for differentiation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Matrix};
use crate::taxonomy::{positive_mask, LabelTriple, Level, PairMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("anchor and positive must differ (both {0})")]
    InvalidPair(usize),
    #[error("index {index} out of range for batch of {batch}")]
    OutOfRange { index: usize, batch: usize },
    #[error("no anchor in the batch has a positive")]
    NoPositives,
    #[error("batch needs at least two samples, got {0}")]
    BatchTooSmall(usize),
    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    SupCon,
    HiMulCon,
    HiMulConE,
}

/// Default temperature.
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub tau: f64,
    /// Per-level weights indexed finest first: `[λ_id, λ_species, λ_taxon]`.
    pub lambdas: [f64; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::HiMulCon,
            tau: DEFAULT_TAU,
            lambdas: [1.0 / 3.0; 3],
        }
    }
}

impl LossConfig {
    pub fn supcon(tau: f64) -> Self {
        LossConfig {
            variant: LossVariant::SupCon,
            tau,
            lambdas: [1.0, 0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(LossError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(LossError::InvalidConfig("lambdas must be finite and nonnegative".into()));
        }
        if !self.lambdas.iter().any(|&l| l > 0.0) {
            return Err(LossError::InvalidConfig("at least one lambda must be positive".into()));
        }
        if self.variant == LossVariant::SupCon && (self.lambdas[1] != 0.0 || self.lambdas[2] != 0.0) {
            return Err(LossError::InvalidConfig("SupCon uses only the individual level".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, level: Level) -> f64 {
        self.lambdas[level.index()]
    }
}

/// Summary of one hierarchy level inside a [`LossResult`].
#[derive(Debug, Clone, PartialEq)]
pub struct LevelLoss {
    pub level: Level,
    pub lambda: f64,
    /// Unweighted level loss (after clamping, if any).
    pub loss: f64,
    /// Largest unclamped pair term at this level, `None` without positives.
    pub pair_max: Option<f64>,
    /// Lower bound applied to this level's pair terms.
    pub clamp_floor: Option<f64>,
    pub positive_pairs: usize,
    pub clamped_pairs: usize,
    /// For each positive pair in row-major order, whether the floor won.
    pub clamp_pattern: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub total: f64,
    pub per_level: Vec<LevelLoss>,
    /// `∂total/∂z` per input level, same order as the inputs.
    pub grad_wrt_z: Vec<Matrix>,
}

/// One level's projected batch.
#[derive(Debug, Clone, Copy)]
pub struct LevelInput<'a> {
    pub level: Level,
    pub z: &'a Matrix,
}

/// How pair terms are lower-bounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClampMode<'a> {
    Off,
    /// Floor each level by the previous level's unclamped pair maximum.
    FromFinerLevel,
    /// Use the given floors, one per input level. Gradient checks use this
    /// to hold the floors fixed while perturbing embeddings.
    Fixed(&'a [Option<f64>]),
}

/// Numerically stable `log Σ_{n≠i} exp(zᵢ·zₙ/τ)` and the logits row.
fn anchor_logits(z: &Matrix, i: usize, tau: f64) -> (Vec<f64>, f64) {
    let zi = z.row(i);
    let logits: Vec<f64> = (0..z.rows())
        .map(|j| if j == i { f64::NEG_INFINITY } else { dot(zi, z.row(j)) / tau })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&s| (s - max).exp()).sum();
    (logits, max + sum.ln())
}

/// Pair term `ℓ(i, p)` over all other batch elements as negatives.
pub fn pair_loss(z: &Matrix, i: usize, p: usize, tau: f64) -> Result<f64, LossError> {
    let batch = z.rows();
    for index in [i, p] {
        if index >= batch {
            return Err(LossError::OutOfRange { index, batch });
        }
    }
    if i == p {
        return Err(LossError::InvalidPair(i));
    }
    let (logits, lse) = anchor_logits(z, i, tau);
    Ok((lse - logits[p]).max(0.0))
}

struct LevelOutcome {
    loss: f64,
    pair_max: Option<f64>,
    clamped: usize,
    pattern: Vec<bool>,
}

/// Level loss and its gradient, scaled by `scale`, accumulated into `grad`.
fn level_loss(
    z: &Matrix,
    mask: &PairMask,
    tau: f64,
    floor: Option<f64>,
    scale: f64,
    grad: &mut Matrix,
) -> LevelOutcome {
    let batch = z.rows();
    let mut loss = 0.0;
    let mut pair_max: Option<f64> = None;
    let mut clamped = 0;
    let mut pattern = Vec::new();
    let mut coeff = vec![0.0; batch];

    for i in 0..batch {
        let positives: Vec<usize> = mask.positives(i).collect();
        if positives.is_empty() {
            continue;
        }
        let inv = 1.0 / positives.len() as f64;
        let (logits, lse) = anchor_logits(z, i, tau);

        // ∂/∂s_ij of Σ_p w_p ℓ(i,p) is −w_j·[j∈P] + (Σ_p w_p)·softmax_j.
        coeff.iter_mut().for_each(|c| *c = 0.0);
        let mut active_weight = 0.0;
        let mut anchor_loss = 0.0;
        for &p in &positives {
            let raw = lse - logits[p];
            pair_max = Some(pair_max.map_or(raw, |m: f64| m.max(raw)));
            let is_clamped = floor.is_some_and(|f| raw < f);
            pattern.push(is_clamped);
            if is_clamped {
                clamped += 1;
                anchor_loss += floor.expect("clamped implies floor");
            } else {
                anchor_loss += raw;
                coeff[p] -= inv;
                active_weight += inv;
            }
        }
        loss += anchor_loss * inv;

        if active_weight == 0.0 || scale == 0.0 {
            continue;
        }
        for j in 0..batch {
            if j != i {
                coeff[j] += active_weight * (logits[j] - lse).exp();
            }
        }
        // s_ij = zᵢ·zⱼ/τ feeds both rows.
        for (j, &c) in coeff.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let g = scale * c / tau;
            for k in 0..z.cols() {
                let zi = z[(i, k)];
                let zj = z[(j, k)];
                grad[(i, k)] += g * zj;
                grad[(j, k)] += g * zi;
            }
        }
    }

    LevelOutcome {
        loss,
        pair_max,
        clamped,
        pattern,
    }
}

/// Weighted multi-level loss. `lambdas` are indexed by [`Level::index`];
/// the `1/|L|` factor uses the number of supplied levels.
pub fn hierarchical_loss(
    levels: &[LevelInput<'_>],
    labels: &[LabelTriple],
    lambdas: &[f64; 3],
    tau: f64,
    clamp: ClampMode<'_>,
) -> Result<LossResult, LossError> {
    let batch = labels.len();
    if batch < 2 {
        return Err(LossError::BatchTooSmall(batch));
    }
    if levels.is_empty() {
        return Err(LossError::InvalidConfig("no levels supplied".into()));
    }
    if let ClampMode::Fixed(floors) = clamp {
        if floors.len() != levels.len() {
            return Err(LossError::ShapeMismatch {
                what: "fixed floors",
                expected: levels.len(),
                found: floors.len(),
            });
        }
    }
    for input in levels {
        if input.z.rows() != batch {
            return Err(LossError::ShapeMismatch {
                what: "projection rows",
                expected: batch,
                found: input.z.rows(),
            });
        }
    }

    let count = levels.len() as f64;
    let masks: Vec<PairMask> = levels.iter().map(|l| positive_mask(labels, l.level)).collect();
    if masks.iter().all(|m| m.count() == 0) {
        return Err(LossError::NoPositives);
    }

    let mut total = 0.0;
    let mut per_level = Vec::with_capacity(levels.len());
    let mut grads = Vec::with_capacity(levels.len());
    let mut previous_max: Option<f64> = None;
    for (idx, (input, mask)) in levels.iter().zip(&masks).enumerate() {
        let lambda = lambdas[input.level.index()];
        let floor = match clamp {
            ClampMode::Off => None,
            ClampMode::FromFinerLevel if idx == 0 => None,
            ClampMode::FromFinerLevel => previous_max,
            ClampMode::Fixed(floors) => floors[idx],
        };
        let mut grad = Matrix::zeros(input.z.rows(), input.z.cols());
        let outcome = level_loss(input.z, mask, tau, floor, lambda / count, &mut grad);
        total += lambda * outcome.loss / count;
        previous_max = outcome.pair_max;
        per_level.push(LevelLoss {
            level: input.level,
            lambda,
            loss: outcome.loss,
            pair_max: outcome.pair_max,
            clamp_floor: floor,
            positive_pairs: mask.count(),
            clamped_pairs: outcome.clamped,
            clamp_pattern: outcome.pattern,
        });
        grads.push(grad);
    }

    Ok(LossResult {
        total,
        per_level,
        grad_wrt_z: grads,
    })
}

/// Single-level supervised contrastive loss over arbitrary class labels.
pub fn supcon<T: PartialEq>(z: &Matrix, labels: &[T], tau: f64) -> Result<LossResult, LossError> {
    let batch = labels.len();
    if batch < 2 {
        return Err(LossError::BatchTooSmall(batch));
    }
    if z.rows() != batch {
        return Err(LossError::ShapeMismatch {
            what: "projection rows",
            expected: batch,
            found: z.rows(),
        });
    }
    let mask = PairMask::from_labels(labels);
    if mask.count() == 0 {
        return Err(LossError::NoPositives);
    }
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let outcome = level_loss(z, &mask, tau, None, 1.0, &mut grad);
    Ok(LossResult {
        total: outcome.loss,
        per_level: vec![LevelLoss {
            level: Level::Individual,
            lambda: 1.0,
            loss: outcome.loss,
            pair_max: outcome.pair_max,
            clamp_floor: None,
            positive_pairs: mask.count(),
            clamped_pairs: 0,
            clamp_pattern: outcome.pattern,
        }],
        grad_wrt_z: vec![grad],
    })
}

pub fn himulcon(levels: &[LevelInput<'_>], labels: &[LabelTriple], cfg: &LossConfig) -> Result<LossResult, LossError> {
    cfg.validate()?;
    hierarchical_loss(levels, labels, &cfg.lambdas, cfg.tau, ClampMode::Off)
}

/// Levels must be given finest first.
pub fn himulcone(levels: &[LevelInput<'_>], labels: &[LabelTriple], cfg: &LossConfig) -> Result<LossResult, LossError> {
    cfg.validate()?;
    if levels.windows(2).any(|w| w[0].level >= w[1].level) {
        return Err(LossError::InvalidConfig("levels must be ordered finest to coarsest".into()));
    }
    hierarchical_loss(levels, labels, &cfg.lambdas, cfg.tau, ClampMode::FromFinerLevel)
}

/// Dispatches on `cfg.variant`. SupCon reads the individual-level input only.
pub fn compute_loss(levels: &[LevelInput<'_>], labels: &[LabelTriple], cfg: &LossConfig) -> Result<LossResult, LossError> {
    compute_loss_with(levels, labels, cfg, None)
}

/// Like [`compute_loss`], optionally pinning the constrained variant's floors.
pub fn compute_loss_with(
    levels: &[LevelInput<'_>],
    labels: &[LabelTriple],
    cfg: &LossConfig,
    fixed_floors: Option<&[Option<f64>]>,
) -> Result<LossResult, LossError> {
    cfg.validate()?;
    match cfg.variant {
        LossVariant::SupCon => {
            let input = levels
                .iter()
                .find(|l| l.level == Level::Individual)
                .ok_or_else(|| LossError::InvalidConfig("SupCon needs an individual-level projection".into()))?;
            let ids: Vec<&str> = labels.iter().map(|t| t.individual.trim()).collect();
            let mut result = supcon(input.z, &ids, cfg.tau)?;
            result.total *= cfg.lambdas[0];
            result.per_level[0].lambda = cfg.lambdas[0];
            result.grad_wrt_z[0].scale(cfg.lambdas[0]);
            Ok(result)
        }
        LossVariant::HiMulCon => himulcon(levels, labels, cfg),
        LossVariant::HiMulConE => match fixed_floors {
            Some(floors) => hierarchical_loss(levels, labels, &cfg.lambdas, cfg.tau, ClampMode::Fixed(floors)),
            None => himulcone(levels, labels, cfg),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[&[f64]]) -> Matrix {
        let normed: Vec<Vec<f64>> = rows.iter().map(|r| crate::linalg::normalized(r, 1e-12)).collect();
        Matrix::from_rows(&normed).unwrap()
    }

    #[test]
    fn identical_pair_of_two_is_zero() {
        let z = unit_rows(&[&[0.3, 0.4], &[0.3, 0.4]]);
        for tau in [0.05, 0.5, 3.0] {
            assert_eq!(pair_loss(&z, 0, 1, tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn three_point_value() {
        let z = unit_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]]);
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((pair_loss(&z, 0, 1, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn lower_temperature_sharpens_separable_pairs() {
        let z = unit_rows(&[&[1.0, 0.0], &[0.9, 0.1], &[-1.0, 0.2]]);
        let warm = pair_loss(&z, 0, 1, 1.0).unwrap();
        let cold = pair_loss(&z, 0, 1, 0.1).unwrap();
        assert!(cold < warm);
    }

    #[test]
    fn invalid_pairs() {
        let z = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(pair_loss(&z, 1, 1, 1.0), Err(LossError::InvalidPair(1)));
        assert!(matches!(pair_loss(&z, 0, 2, 1.0), Err(LossError::OutOfRange { .. })));
    }

    #[test]
    fn supcon_two_same_label_is_zero() {
        let z = unit_rows(&[&[0.2, 0.9], &[-0.7, 0.1]]);
        let r = supcon(&z, &["A", "A"], 0.3).unwrap();
        assert!(r.total.abs() < 1e-15);
    }

    #[test]
    fn supcon_without_positives_fails() {
        let z = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[-1.0, 0.0]]);
        assert_eq!(supcon(&z, &["A", "B", "C", "D"], 0.5), Err(LossError::NoPositives));
    }

    #[test]
    fn duplicated_rows_stay_finite() {
        let z = unit_rows(&[&[1.0, 0.0][..]; 6]);
        let r = supcon(&z, &[0, 0, 1, 1, 2, 2], 1e-3).unwrap();
        assert!(r.total.is_finite());
        assert!(r.grad_wrt_z[0].is_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig {
            variant: LossVariant::HiMulCon,
            tau: 0.1,
            lambdas: [0.0, 0.0, 0.0],
        };
        assert!(cfg.validate().is_err());
        cfg.lambdas = [1.0, 1.0, 1.0];
        assert!(cfg.validate().is_ok());
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        let mut sc = LossConfig::supcon(0.1);
        assert!(sc.validate().is_ok());
        sc.lambdas[2] = 1.0;
        assert!(sc.validate().is_err());
    }

    #[test]
    fn lambda_linearity() {
        let labels: Vec<LabelTriple> = [("a", "S", "T"), ("a", "S", "T"), ("b", "S", "T"), ("c", "R", "T")]
            .iter()
            .map(|(i, s, t)| LabelTriple::new(i, s, t).unwrap())
            .collect();
        let zs: Vec<Matrix> = (0..3)
            .map(|k| {
                let rows: Vec<Vec<f64>> = (0..4)
                    .map(|r| vec![(r as f64 + k as f64).sin(), (r as f64 * 1.7).cos(), 0.3])
                    .collect();
                let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                unit_rows(&refs)
            })
            .collect();
        let inputs: Vec<LevelInput> = Level::ALL.iter().zip(&zs).map(|(&level, z)| LevelInput { level, z }).collect();
        let cfg = LossConfig {
            variant: LossVariant::HiMulCon,
            tau: 0.2,
            lambdas: [0.5, 1.0, 2.0],
        };
        let doubled = LossConfig {
            lambdas: [1.0, 2.0, 4.0],
            ..cfg
        };
        let a = himulcon(&inputs, &labels, &cfg).unwrap();
        let b = himulcon(&inputs, &labels, &doubled).unwrap();
        assert!((b.total - 2.0 * a.total).abs() < 1e-12);
        for (ga, gb) in a.grad_wrt_z.iter().zip(&b.grad_wrt_z) {
            for (x, y) in ga.as_slice().iter().zip(gb.as_slice()) {
                assert!((y - 2.0 * x).abs() < 1e-12);
            }
        }
    }
}
