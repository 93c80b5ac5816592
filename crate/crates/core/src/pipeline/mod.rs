//! Training loop, experiment presets and grid sweeps.

pub mod cli;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment, make_batches, DataError, Dataset, Split, SynthConfig};
use crate::eval::{evaluate_closed, EvalError, LevelAccuracy, Metric};
use crate::linalg::{keyed_rng, stream, Matrix};
use crate::losses::{LossConfig, LossError, LossVariant};
use crate::network::{init_params, opt_step, ArchConfig, EncoderParams, NetworkError, OptState, OptimizerConfig};
use crate::objective::{network_loss, ObjectiveError};
use crate::taxonomy::Level;

pub const HISTORY_FORMAT_VERSION: u32 = 1;

/// Sweeps larger than this are refused.
pub const DEFAULT_GRID_CAP: usize = 256;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown preset `{0}` (expected SC, HC, HCλ, HCE or HCEλ)")]
    UnknownPreset(String),
    #[error("unknown config field `{0}`")]
    UnknownField(String),
    #[error("bad value `{value}` for `{field}`: {reason}")]
    BadValue {
        field: String,
        value: String,
        reason: String,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset has {found} features but the model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("epoch {epoch}, batch {batch}: no anchor has a positive")]
    NoPositives { epoch: usize, batch: usize },
    #[error("sweep grid has {combinations} combinations, cap is {cap}")]
    GridTooLarge { combinations: usize, cap: usize },
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Where the training data comes from when a config file names it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Standard deviation of additive feature noise; 0 disables augmentation.
    pub augment_sigma: f64,
    pub seed: u64,
    pub validation_k: usize,
    pub metric: Metric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 128,
            epochs: 50,
            augment_sigma: 0.0,
            seed: 0,
            validation_k: 1,
            metric: Metric::Cosine,
            data: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, PipelineError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| PipelineError::BadValue {
        field: field.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl TrainConfig {
    /// Field names accepted by [`TrainConfig::set`].
    pub const FIELDS: [&'static str; 21] = [
        "tau",
        "lambda_id",
        "lambda_species",
        "lambda_taxon",
        "lr",
        "weight_decay",
        "beta1",
        "beta2",
        "eps",
        "batch_size",
        "epochs",
        "augment_sigma",
        "seed",
        "validation_k",
        "metric",
        "arch.input_dim",
        "arch.adapter_hidden",
        "arch.shared_dim",
        "arch.projector_hidden",
        "arch.projector_out",
        "arch.activation",
    ];

    /// Assigns one field from its text form.
    pub fn set(&mut self, field: &str, value: &str) -> Result<(), PipelineError> {
        match field {
            "tau" => self.loss.tau = parse_value(field, value)?,
            "lambda_id" => self.loss.lambdas[0] = parse_value(field, value)?,
            "lambda_species" => self.loss.lambdas[1] = parse_value(field, value)?,
            "lambda_taxon" => self.loss.lambdas[2] = parse_value(field, value)?,
            "lr" => self.optimizer.lr = parse_value(field, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse_value(field, value)?,
            "beta1" => self.optimizer.beta1 = parse_value(field, value)?,
            "beta2" => self.optimizer.beta2 = parse_value(field, value)?,
            "eps" => self.optimizer.eps = parse_value(field, value)?,
            "batch_size" => self.batch_size = parse_value(field, value)?,
            "epochs" => self.epochs = parse_value(field, value)?,
            "augment_sigma" => self.augment_sigma = parse_value(field, value)?,
            "seed" => self.seed = parse_value(field, value)?,
            "validation_k" => self.validation_k = parse_value(field, value)?,
            "metric" => self.metric = parse_value(field, value)?,
            "arch.input_dim" => self.arch.input_dim = parse_value(field, value)?,
            "arch.adapter_hidden" => self.arch.adapter_hidden = parse_value(field, value)?,
            "arch.shared_dim" => self.arch.shared_dim = parse_value(field, value)?,
            "arch.projector_hidden" => self.arch.projector_hidden = parse_value(field, value)?,
            "arch.projector_out" => self.arch.projector_out = parse_value(field, value)?,
            "arch.activation" => {
                self.arch.activation = match value.trim() {
                    "relu" => crate::network::Activation::Relu,
                    "identity" => crate::network::Activation::Identity,
                    other => {
                        return Err(PipelineError::BadValue {
                            field: field.into(),
                            value: other.into(),
                            reason: "expected relu or identity".into(),
                        })
                    }
                }
            }
            other => return Err(PipelineError::UnknownField(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.arch.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(PipelineError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(PipelineError::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.validation_k == 0 {
            return Err(PipelineError::InvalidConfig("validation_k must be at least 1".into()));
        }
        if !(self.augment_sigma.is_finite() && self.augment_sigma >= 0.0) {
            return Err(PipelineError::InvalidConfig("augment_sigma must be nonnegative".into()));
        }
        let lr = self.optimizer.lr;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(PipelineError::InvalidConfig("lr must be positive".into()));
        }
        if self.loss.variant == LossVariant::SupCon && !self.arch.heads.contains(&Level::Individual) {
            return Err(PipelineError::InvalidConfig("SupCon needs an individual head".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// The five experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// SupCon, individual head only.
    Sc,
    /// HiMulCon with equal level weights.
    Hc,
    /// HiMulCon with λ = (10, 5, 1).
    HcLambda,
    /// HiMulConE with equal level weights.
    Hce,
    /// HiMulConE with λ = (10, 1, 1).
    HceLambda,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Sc, Preset::Hc, Preset::HcLambda, Preset::Hce, Preset::HceLambda];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Sc => "SC",
            Preset::Hc => "HC",
            Preset::HcLambda => "HCλ",
            Preset::Hce => "HCE",
            Preset::HceLambda => "HCEλ",
        }
    }

    /// Accepts the canonical names plus ASCII spellings such as `HC-lambda` or `HCEl`.
    pub fn parse(name: &str) -> Result<Self, PipelineError> {
        let key = name.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match key.as_str() {
            "sc" => Preset::Sc,
            "hc" => Preset::Hc,
            "hcλ" | "hcl" | "hclambda" => Preset::HcLambda,
            "hce" => Preset::Hce,
            "hceλ" | "hcel" | "hcelambda" => Preset::HceLambda,
            _ => return Err(PipelineError::UnknownPreset(name.to_string())),
        })
    }

    pub fn loss(self) -> LossConfig {
        let equal = [1.0 / 3.0; 3];
        let (variant, lambdas) = match self {
            Preset::Sc => return LossConfig::supcon(crate::losses::DEFAULT_TAU),
            Preset::Hc => (LossVariant::HiMulCon, equal),
            Preset::HcLambda => (LossVariant::HiMulCon, [10.0, 5.0, 1.0]),
            Preset::Hce => (LossVariant::HiMulConE, equal),
            Preset::HceLambda => (LossVariant::HiMulConE, [10.0, 1.0, 1.0]),
        };
        LossConfig {
            variant,
            tau: crate::losses::DEFAULT_TAU,
            lambdas,
        }
    }

    pub fn heads(self) -> Vec<Level> {
        match self {
            Preset::Sc => vec![Level::Individual],
            _ => Level::ALL.to_vec(),
        }
    }

    /// Applies the preset's loss and head layout on top of `base`.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.loss = LossConfig {
            tau: base.loss.tau,
            ..self.loss()
        };
        cfg.arch.heads = self.heads();
        cfg
    }
}

/// Builds the preset's config from the defaults, then applies `overrides` in order.
pub fn run_experiment_preset(name: &str, overrides: &[(String, String)]) -> Result<TrainConfig, PipelineError> {
    let preset = Preset::parse(name)?;
    let mut cfg = preset.apply(&TrainConfig::default());
    for (field, value) in overrides {
        cfg.set(field, value)?;
    }
    Ok(cfg)
}

/// Settings sized for the separable fixture: a narrow network, 30 epochs and
/// batches of 64, with the fixture itself as the data source.
pub fn fixture_config(preset: Preset) -> TrainConfig {
    let fixture = SynthConfig::separable_fixture();
    let base = TrainConfig {
        arch: ArchConfig {
            input_dim: fixture.dim,
            adapter_hidden: 64,
            shared_dim: 32,
            projector_hidden: 32,
            projector_out: 16,
            ..ArchConfig::default()
        },
        batch_size: 64,
        epochs: 30,
        data: Some(DataSource::Synthetic(fixture)),
        ..TrainConfig::default()
    };
    preset.apply(&base)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelLosses {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub species: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxon: Option<f64>,
}

impl LevelLosses {
    fn slot(&mut self, level: Level) -> &mut Option<f64> {
        match level {
            Level::Individual => &mut self.id,
            Level::Species => &mut self.species,
            Level::Taxon => &mut self.taxon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean unweighted level losses.
    pub train_loss_per_level: LevelLosses,
    pub val_balanced_accuracy: LevelAccuracy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracySeries {
    pub taxon: Vec<f64>,
    pub species: Vec<f64>,
    pub id: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub format_version: u32,
    pub epochs: Vec<EpochRecord>,
    pub val_balanced_accuracy: AccuracySeries,
    /// Epoch with the highest validation ID accuracy, earliest on ties.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub params: EncoderParams,
    pub history: TrainHistory,
}

fn batch_features(features: &Matrix, sigma: f64, rng: &mut impl rand::Rng) -> Matrix {
    if sigma == 0.0 {
        return features.clone();
    }
    let mut out = features.clone();
    for i in 0..out.rows() {
        let noisy = augment(features.row(i), sigma, rng);
        out.row_mut(i).copy_from_slice(&noisy);
    }
    out
}

/// Trains the model, validating after every epoch with a `validation_k`-NN
/// on the shared layer, and keeps the best epoch's parameters.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if ds.dim() != cfg.arch.input_dim {
        return Err(PipelineError::DimensionMismatch {
            expected: cfg.arch.input_dim,
            found: ds.dim(),
        });
    }
    let mut params = init_params(&cfg.arch, cfg.seed)?;
    let mut opt = OptState::new(&params, cfg.optimizer);
    let mut best: Option<(usize, f64, EncoderParams)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut series = AccuracySeries::default();

    for epoch in 0..cfg.epochs {
        let batches = make_batches(ds, Split::Train, cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut aug_rng = keyed_rng(cfg.seed, stream::AUGMENT, epoch as u64);
        let mut loss_sum = 0.0;
        let mut level_sums = [0.0; 3];
        let mut level_counts = [0usize; 3];
        for (b, batch) in batches.iter().enumerate() {
            let features = batch_features(&batch.features, cfg.augment_sigma, &mut aug_rng);
            let objective = network_loss(&params, &features, &batch.labels, &cfg.loss, None).map_err(|e| match e {
                ObjectiveError::Loss(LossError::NoPositives) => PipelineError::NoPositives { epoch, batch: b },
                other => other.into(),
            })?;
            opt_step(&mut params, &objective.grads, &mut opt)?;
            loss_sum += objective.loss.total;
            for level in &objective.loss.per_level {
                level_sums[level.level.index()] += level.loss;
                level_counts[level.level.index()] += 1;
            }
        }
        let mut per_level = LevelLosses::default();
        for level in Level::ALL {
            let i = level.index();
            if level_counts[i] > 0 {
                *per_level.slot(level) = Some(level_sums[i] / level_counts[i] as f64);
            }
        }

        let val = evaluate_closed(&params, ds, Split::Val, cfg.validation_k, cfg.metric)?.balanced_accuracy;
        series.taxon.push(val.taxon);
        series.species.push(val.species);
        series.id.push(val.id);
        if best.as_ref().is_none_or(|(_, score, _)| val.id > *score) {
            best = Some((epoch, val.id, params.clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len().max(1) as f64,
            train_loss_per_level: per_level,
            val_balanced_accuracy: val,
        });
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params: best_params,
        history: TrainHistory {
            format_version: HISTORY_FORMAT_VERSION,
            epochs,
            val_balanced_accuracy: series,
            best_epoch,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepParam {
    pub name: String,
    pub values: Vec<f64>,
}

/// Exhaustive grid over named config fields, scored by validation ID accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(rename = "param")]
    pub params: Vec<SweepParam>,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_GRID_CAP
}

impl SweepSpec {
    pub fn new(params: Vec<SweepParam>) -> Self {
        SweepSpec {
            params,
            cap: DEFAULT_GRID_CAP,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }

    pub fn combinations(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).product()
    }

    /// Assignments in insertion order; the last parameter varies fastest.
    pub fn grid(&self) -> Vec<Vec<(String, f64)>> {
        let mut out: Vec<Vec<(String, f64)>> = vec![Vec::new()];
        for param in &self.params {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    param.values.iter().map(move |&v| {
                        let mut next = prefix.clone();
                        next.push((param.name.clone(), v));
                        next
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    /// Position of the combination in grid order.
    pub index: usize,
    pub assignments: Vec<(String, f64)>,
    pub val_id_accuracy: f64,
    pub val_balanced_accuracy: LevelAccuracy,
    pub best_epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub best: TrainConfig,
    pub leaderboard: Vec<LeaderboardRow>,
}

/// Trains every grid point (in parallel) and ranks them by validation ID
/// accuracy, then lower learning rate, then grid order.
pub fn sweep(spec: &SweepSpec, base: &TrainConfig, ds: &Dataset) -> Result<SweepOutcome, PipelineError> {
    if spec.params.is_empty() || spec.params.iter().any(|p| p.values.is_empty()) {
        return Err(PipelineError::EmptyGrid);
    }
    let combinations = spec.combinations();
    if combinations > spec.cap {
        return Err(PipelineError::GridTooLarge {
            combinations,
            cap: spec.cap,
        });
    }
    let mut configs = Vec::with_capacity(combinations);
    for assignment in spec.grid() {
        let mut cfg = base.clone();
        for (name, value) in &assignment {
            cfg.set(name, &value.to_string())?;
        }
        cfg.validate()?;
        configs.push((assignment, cfg));
    }

    let rows: Vec<Result<LeaderboardRow, PipelineError>> = configs
        .par_iter()
        .enumerate()
        .map(|(index, (assignment, cfg))| {
            let outcome = train(cfg, ds)?;
            let best = outcome.history.best();
            Ok(LeaderboardRow {
                index,
                assignments: assignment.clone(),
                val_id_accuracy: best.val_balanced_accuracy.id,
                val_balanced_accuracy: best.val_balanced_accuracy,
                best_epoch: outcome.history.best_epoch,
                lr: cfg.optimizer.lr,
            })
        })
        .collect();
    let mut leaderboard = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    leaderboard.sort_by(|a, b| {
        b.val_id_accuracy
            .total_cmp(&a.val_id_accuracy)
            .then(a.lr.total_cmp(&b.lr))
            .then(a.index.cmp(&b.index))
    });
    let best = configs[leaderboard[0].index].1.clone();
    Ok(SweepOutcome { best, leaderboard })
}
