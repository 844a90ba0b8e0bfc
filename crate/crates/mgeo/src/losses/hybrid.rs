//! First-stage training objective: deep supervision, inverse
//! self-distillation, and the metric terms, summed.

use ndarray::Array2;

use super::metric::{metric_grad, metric_loss, EmbeddingBatch};
use super::supervision::{
    deep_supervision_grad, deep_supervision_loss, self_distillation_grad, self_distillation_loss,
    StageLogits,
};
use super::LossError;

fn check_batch_sizes(stages: &StageLogits, batch: &EmbeddingBatch) -> Result<(), LossError> {
    if stages.batch_size() != batch.drone.nrows() {
        return Err(LossError::RowMismatch {
            left: stages.batch_size(),
            right: batch.drone.nrows(),
        });
    }
    Ok(())
}

/// Sum of the supervision, distillation, and metric objectives on one
/// batch. Labels index both the classifier heads and the feature rows.
pub fn total_hybrid_loss(
    stages: &StageLogits,
    labels: &[usize],
    batch: &EmbeddingBatch,
) -> Result<f64, LossError> {
    check_batch_sizes(stages, batch)?;
    Ok(deep_supervision_loss(stages, labels)?
        + self_distillation_loss(stages)?
        + metric_loss(batch, labels)?)
}

/// Value of [`total_hybrid_loss`] plus gradients for every stage's logits
/// and both feature batches.
#[allow(clippy::type_complexity)]
pub fn total_hybrid_grad(
    stages: &StageLogits,
    labels: &[usize],
    batch: &EmbeddingBatch,
) -> Result<(f64, Vec<Array2<f64>>, Array2<f64>, Array2<f64>), LossError> {
    check_batch_sizes(stages, batch)?;
    let ds = deep_supervision_loss(stages, labels)?;
    let mut stage_grads = deep_supervision_grad(stages, labels)?;
    let sd = self_distillation_loss(stages)?;
    for (g, extra) in stage_grads.iter_mut().zip(self_distillation_grad(stages)?) {
        *g += &extra;
    }
    let (ml, gd, gs) = metric_grad(batch, labels)?;
    Ok((ds + sd + ml, stage_grads, gd, gs))
}
