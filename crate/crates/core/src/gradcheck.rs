//! Central finite-difference checks of the analytic gradients.
//!
//! The constrained loss treats its per-level floors as constants, so
//! perturbed evaluations pin the floors at their unperturbed values. A
//! coordinate is skipped when the `±step` evaluations change which pairs are
//! clamped (or, for whole-network checks, which ReLUs are active): the loss is
//! not differentiable across those switches.

use rand::Rng;
use serde::Serialize;

use crate::linalg::{keyed_rng, Matrix};
use crate::losses::{compute_loss_with, LevelInput, LossConfig, LossError, LossResult, LossVariant};
use crate::network::{init_params, ArchConfig, EncoderParams, NetworkError};
use crate::objective::{network_loss, ObjectiveError};
use crate::taxonomy::{LabelTriple, Level};

/// Denominator floor for relative errors: `|a − n| / max(|a|, |n|, floor)`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Tolerance applied by [`run_suite`].
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("step must be positive, got {0}")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        self.max_absolute_error = self.max_absolute_error.max(abs);
        self.max_relative_error = self.max_relative_error.max(rel);
        self.checked += 1;
    }
}

fn clamp_signature(result: &LossResult) -> Vec<bool> {
    result
        .per_level
        .iter()
        .flat_map(|l| l.clamp_pattern.iter().copied())
        .collect()
}

fn fixed_floors(cfg: &LossConfig, result: &LossResult) -> Option<Vec<Option<f64>>> {
    (cfg.variant == LossVariant::HiMulConE).then(|| result.per_level.iter().map(|l| l.clamp_floor).collect())
}

fn evaluate(
    levels: &[Level],
    z: &[Matrix],
    labels: &[LabelTriple],
    cfg: &LossConfig,
    floors: Option<&[Option<f64>]>,
) -> Result<LossResult, LossError> {
    let inputs: Vec<LevelInput> = levels.iter().zip(z).map(|(&level, z)| LevelInput { level, z }).collect();
    compute_loss_with(&inputs, labels, cfg, floors)
}

/// Compares `∂loss/∂z` with central differences on every entry of every level.
pub fn grad_check(
    cfg: &LossConfig,
    z_per_level: &[(Level, Matrix)],
    labels: &[LabelTriple],
    step: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(GradCheckError::InvalidStep(step));
    }
    let levels: Vec<Level> = z_per_level.iter().map(|(l, _)| *l).collect();
    let mut z: Vec<Matrix> = z_per_level.iter().map(|(_, z)| z.clone()).collect();
    let base = evaluate(&levels, &z, labels, cfg, None)?;
    let floors = fixed_floors(cfg, &base);
    let signature = clamp_signature(&base);

    let mut report = GradCheckReport::new();
    for li in 0..z.len() {
        let analytic = match cfg.variant {
            // SupCon only produces a gradient for its single input.
            LossVariant::SupCon => {
                if levels[li] != Level::Individual {
                    continue;
                }
                &base.grad_wrt_z[0]
            }
            _ => &base.grad_wrt_z[li],
        };
        for k in 0..z[li].as_slice().len() {
            let original = z[li].as_slice()[k];
            z[li].as_mut_slice()[k] = original + step;
            let plus = evaluate(&levels, &z, labels, cfg, floors.as_deref())?;
            z[li].as_mut_slice()[k] = original - step;
            let minus = evaluate(&levels, &z, labels, cfg, floors.as_deref())?;
            z[li].as_mut_slice()[k] = original;
            if clamp_signature(&plus) != signature || clamp_signature(&minus) != signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.total - minus.total) / (2.0 * step);
            report.record(analytic.as_slice()[k], numeric);
        }
    }
    Ok(report)
}

/// Central differences on every model parameter through forward, loss and backward.
pub fn grad_check_network(
    params: &EncoderParams,
    features: &Matrix,
    labels: &[LabelTriple],
    cfg: &LossConfig,
    step: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(GradCheckError::InvalidStep(step));
    }
    let out = network_loss(params, features, labels, cfg, None)?;
    let (base, grads, base_pattern) = (out.loss, out.grads, out.pattern);
    let floors = fixed_floors(cfg, &base);
    let signature = clamp_signature(&base);
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();

    let mut probe = params.clone();
    let mut report = GradCheckReport::new();
    let mut flat = 0;
    let tensor_count = probe.tensors().len();
    for t in 0..tensor_count {
        let len = probe.tensors()[t].len();
        for k in 0..len {
            let original = probe.tensors()[t][k];
            probe.tensors_mut()[t][k] = original + step;
            let plus = network_loss(&probe, features, labels, cfg, floors.as_deref())?;
            probe.tensors_mut()[t][k] = original - step;
            let minus = network_loss(&probe, features, labels, cfg, floors.as_deref())?;
            probe.tensors_mut()[t][k] = original;
            let stable = plus.pattern == base_pattern
                && minus.pattern == base_pattern
                && clamp_signature(&plus.loss) == signature
                && clamp_signature(&minus.loss) == signature;
            if stable {
                let numeric = (plus.loss.total - minus.loss.total) / (2.0 * step);
                report.record(analytic[flat], numeric);
            } else {
                report.skipped += 1;
            }
            flat += 1;
        }
    }
    Ok(report)
}

/// Eight samples over four individuals, three species and two taxa, so every
/// level has positives.
pub fn suite_labels() -> Vec<LabelTriple> {
    let rows = [
        ("a", "S0", "T0"),
        ("a", "S0", "T0"),
        ("b", "S0", "T0"),
        ("b", "S0", "T0"),
        ("c", "S1", "T0"),
        ("c", "S1", "T0"),
        ("d", "S2", "T1"),
        ("d", "S2", "T1"),
    ];
    rows.iter()
        .map(|(i, s, t)| LabelTriple::new(i, s, t).expect("static labels"))
        .collect()
}

/// `rows × cols` matrix of random unit-norm rows.
pub fn random_unit_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.row_mut(i).copy_from_slice(&crate::linalg::normalized(&row, 1e-12));
    }
    m
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
    /// Clamped pairs in the unperturbed batch (constrained variant only).
    pub clamped_pairs: usize,
    pub passed: bool,
}

fn suite_config(variant: LossVariant) -> LossConfig {
    match variant {
        LossVariant::SupCon => LossConfig::supcon(0.5),
        LossVariant::HiMulCon => LossConfig {
            variant,
            tau: 0.5,
            lambdas: [1.0 / 3.0; 3],
        },
        LossVariant::HiMulConE => LossConfig {
            variant,
            tau: 0.5,
            lambdas: [10.0, 5.0, 1.0],
        },
    }
}

/// The standard suite: each loss variant on `B = 8`, `P = 4` projections, then
/// each variant through a small network.
///
/// The constrained-loss batch is redrawn until at least one pair is clamped.
pub fn run_suite(seed: u64, tolerance: f64) -> Result<Vec<SuiteEntry>, GradCheckError> {
    let labels = suite_labels();
    let batch = labels.len();
    let mut entries = Vec::new();

    for (vi, variant) in [LossVariant::SupCon, LossVariant::HiMulCon, LossVariant::HiMulConE]
        .into_iter()
        .enumerate()
    {
        let cfg = suite_config(variant);
        let levels: &[Level] = match variant {
            LossVariant::SupCon => &[Level::Individual],
            _ => &Level::ALL,
        };
        let mut attempt = 0;
        let (z, clamped) = loop {
            let mut rng = keyed_rng(seed, 0x6C, (vi as u64) << 32 | attempt);
            let z: Vec<(Level, Matrix)> = levels
                .iter()
                .map(|&l| (l, random_unit_rows(batch, 4, &mut rng)))
                .collect();
            let inputs: Vec<LevelInput> = z.iter().map(|(level, z)| LevelInput { level: *level, z }).collect();
            let base = compute_loss_with(&inputs, &labels, &cfg, None)?;
            let clamped: usize = base.per_level.iter().map(|l| l.clamped_pairs).sum();
            attempt += 1;
            if variant != LossVariant::HiMulConE || clamped > 0 || attempt > 64 {
                break (z, clamped);
            }
        };
        let report = grad_check(&cfg, &z, &labels, DEFAULT_STEP)?;
        let active_ok = variant != LossVariant::HiMulConE || clamped > 0;
        entries.push(SuiteEntry {
            name: format!("{variant:?}"),
            passed: report.max_relative_error <= tolerance && active_ok && report.checked > 0,
            report,
            clamped_pairs: clamped,
        });
    }

    for (vi, variant) in [LossVariant::SupCon, LossVariant::HiMulCon, LossVariant::HiMulConE]
        .into_iter()
        .enumerate()
    {
        let cfg = suite_config(variant);
        let arch = ArchConfig {
            input_dim: 6,
            adapter_hidden: 8,
            shared_dim: 6,
            projector_hidden: 6,
            projector_out: 4,
            heads: match variant {
                LossVariant::SupCon => vec![Level::Individual],
                _ => Level::ALL.to_vec(),
            },
            ..ArchConfig::default()
        };
        let mut params = init_params(&arch, seed.wrapping_add(vi as u64))?;
        // Nonzero biases so the check also covers them away from the init.
        let mut rng = keyed_rng(seed, 0x6D, vi as u64);
        for tensor in params.tensors_mut() {
            for x in tensor.iter_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
        }
        let features = Matrix::from_vec(
            batch,
            arch.input_dim,
            (0..batch * arch.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let base = network_loss(&params, &features, &labels, &cfg, None)?.loss;
        let clamped: usize = base.per_level.iter().map(|l| l.clamped_pairs).sum();
        let report = grad_check_network(&params, &features, &labels, &cfg, DEFAULT_STEP)?;
        entries.push(SuiteEntry {
            name: format!("network+{variant:?}"),
            passed: report.max_relative_error <= tolerance && report.checked > 0,
            report,
            clamped_pairs: clamped,
        });
    }
    Ok(entries)
}
