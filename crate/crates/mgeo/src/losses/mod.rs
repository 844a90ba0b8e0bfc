//! The training loss family as pure numerical functions on logit and
//! feature batches, each paired with a hand-written gradient.
//!
//! Nothing here trains a network. Every loss takes explicit batches
//! (`ndarray::Array2<f64>`, rows are samples) and returns a scalar; the
//! matching `*_grad` function returns the same scalar plus analytic
//! gradients for every differentiable input. The [`gradcheck`] module
//! verifies each gradient against central finite differences, which is the
//! substance of the correctness claim for this whole family.
//!
//! All evaluation is sequential and in fixed order, so results are
//! bit-stable across runs and thread counts.

pub mod align;
pub mod gradcheck;
pub mod hybrid;
pub mod metric;
pub mod supervision;
pub mod temperature;

pub use align::{
    adaptive_temperature, cross_distill_feature_grad, cross_distill_feature_loss,
    cross_distill_logits_grad, cross_distill_logits_loss, stage_two_loss, uapa_align_grad,
    uapa_align_loss, CrossDistillInputs, StageTwoWeights, UapaInputs,
};
pub use gradcheck::{run_suite, GradCheckConfig, GradCheckError, GradCheckReport};
pub use hybrid::{total_hybrid_grad, total_hybrid_loss};
pub use metric::{csc_loss, infonce_directional, metric_loss, triplet_hard_loss, EmbeddingBatch};
pub use supervision::{deep_supervision_loss, self_distillation_loss, StageLogits};
pub use temperature::{kl_divergence, shannon_entropy, softmax_t};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("row counts differ: {left} vs {right}")]
    RowMismatch { left: usize, right: usize },
    #[error("column counts differ: {left} vs {right}")]
    ColMismatch { left: usize, right: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label {label} at row {row} outside {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("margin must be nonnegative and finite, got {0}")]
    BadMargin(f64),
    #[error("contrastive temperature must be positive and finite, got {0}")]
    BadTau(f64),
    #[error("expected {expected} weights, got {got}")]
    BadWeightCount { expected: usize, got: usize },
    #[error("weights must be nonnegative and finite, got {0}")]
    BadWeight(f64),
    #[error("distillation needs at least two stages, got {0}")]
    NeedTwoStages(usize),
    #[error("no anchor has both a positive and a negative in this batch")]
    NoValidAnchors,
    #[error("{what} row {row} has zero norm")]
    ZeroRow { what: &'static str, row: usize },
    #[error("{what} row {row} is not a probability distribution")]
    NotDistribution { what: &'static str, row: usize },
    #[error("{what} row {row} must be strictly positive")]
    NotStrictlyPositive { what: &'static str, row: usize },
}

pub(crate) fn check_finite(m: &ndarray::Array2<f64>, what: &'static str) -> Result<(), LossError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite { what });
    }
    Ok(())
}

/// Contiguous view of one batch row.
pub(crate) fn row(m: &ndarray::Array2<f64>, i: usize) -> &[f64] {
    m.row(i).to_slice().expect("batches use standard layout")
}
