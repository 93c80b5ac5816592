//! Loss and parameter gradients of the full model on one batch.

use thiserror::Error;

use crate::linalg::Matrix;
use crate::losses::{compute_loss_with, LevelInput, LossConfig, LossError, LossResult, LossVariant};
use crate::network::{backward, forward, ActivationPattern, EncoderParams, NetworkError, ParamGrads};
use crate::taxonomy::{LabelTriple, Level};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: LossResult,
    pub grads: ParamGrads,
    pub pattern: ActivationPattern,
}

/// Forward through adapter and heads, evaluate the configured loss, and
/// back-propagate. SupCon only routes gradient through the individual head.
pub fn network_loss(
    params: &EncoderParams,
    features: &Matrix,
    labels: &[LabelTriple],
    cfg: &LossConfig,
    fixed_floors: Option<&[Option<f64>]>,
) -> Result<BatchObjective, ObjectiveError> {
    let out = forward(params, features)?;
    let inputs: Vec<LevelInput> = out
        .projections
        .iter()
        .map(|(level, z)| LevelInput { level: *level, z })
        .collect();
    let loss = compute_loss_with(&inputs, labels, cfg, fixed_floors)?;
    let heads: Vec<_> = match cfg.variant {
        LossVariant::SupCon => out
            .cache
            .projectors
            .iter()
            .filter(|c| c.level == Level::Individual)
            .collect(),
        _ => out.cache.projectors.iter().collect(),
    };
    let pairs: Vec<_> = heads.into_iter().zip(&loss.grad_wrt_z).collect();
    let grads = backward(params, &out.cache.shared, &pairs, None)?;
    Ok(BatchObjective {
        loss,
        grads,
        pattern: out.cache.activation_pattern(),
    })
}
