//! Stage-wise supervision: weighted cross entropy over every stage head
//! plus inverse self-distillation, where each shallow stage acts as the
//! teacher distribution for the final stage.

use ndarray::Array2;

use crate::numeric::log_sum_exp;

use super::temperature::log_softmax_t;
use super::{check_finite, row, LossError};

pub const DEFAULT_STAGES: usize = 4;
pub const DEFAULT_SELF_DISTILL_T: f64 = 3.0;

/// Per-stage logit batches with their supervision and distillation weights.
///
/// `stages[i]` is the B x C logit matrix of stage i + 1; the last entry is
/// the final head. `ds_weights` has one entry per stage, `sd_weights` one
/// per shallow stage (so one fewer). A single stage is allowed for plain
/// supervision; distillation needs at least two.
#[derive(Debug, Clone)]
pub struct StageLogits {
    stages: Vec<Array2<f64>>,
    ds_weights: Vec<f64>,
    sd_weights: Vec<f64>,
    temperature: f64,
}

fn check_weights(w: &[f64], expected: usize) -> Result<(), LossError> {
    if w.len() != expected {
        return Err(LossError::BadWeightCount {
            expected,
            got: w.len(),
        });
    }
    for &v in w {
        if !v.is_finite() || v < 0.0 {
            return Err(LossError::BadWeight(v));
        }
    }
    Ok(())
}

impl StageLogits {
    pub fn new(
        stages: Vec<Array2<f64>>,
        ds_weights: Vec<f64>,
        sd_weights: Vec<f64>,
        temperature: f64,
    ) -> Result<Self, LossError> {
        if stages.is_empty() || stages[0].nrows() == 0 || stages[0].ncols() == 0 {
            return Err(LossError::EmptyBatch);
        }
        let (b, c) = (stages[0].nrows(), stages[0].ncols());
        for s in &stages {
            if s.nrows() != b {
                return Err(LossError::RowMismatch {
                    left: b,
                    right: s.nrows(),
                });
            }
            if s.ncols() != c {
                return Err(LossError::ColMismatch {
                    left: c,
                    right: s.ncols(),
                });
            }
            check_finite(s, "stage logits")?;
        }
        check_weights(&ds_weights, stages.len())?;
        check_weights(&sd_weights, stages.len() - 1)?;
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(LossError::BadTemperature(temperature));
        }
        Ok(StageLogits {
            stages,
            ds_weights,
            sd_weights,
            temperature,
        })
    }

    /// Uniform defaults: supervision weights 1/N and distillation weights
    /// 1/(N-1).
    pub fn uniform(stages: Vec<Array2<f64>>, temperature: f64) -> Result<Self, LossError> {
        let n = stages.len();
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        let sd = if n > 1 {
            vec![1.0 / (n - 1) as f64; n - 1]
        } else {
            Vec::new()
        };
        StageLogits::new(stages, vec![1.0 / n as f64; n], sd, temperature)
    }

    pub fn stages(&self) -> &[Array2<f64>] {
        &self.stages
    }

    pub fn ds_weights(&self) -> &[f64] {
        &self.ds_weights
    }

    pub fn sd_weights(&self) -> &[f64] {
        &self.sd_weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn batch_size(&self) -> usize {
        self.stages[0].nrows()
    }

    pub fn classes(&self) -> usize {
        self.stages[0].ncols()
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != rows {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            rows,
        });
    }
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(LossError::LabelOutOfRange {
                row: r,
                label: l,
                classes,
            });
        }
    }
    Ok(())
}

/// Mean cross entropy of one logit batch against integer labels.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64, LossError> {
    if logits.nrows() == 0 || logits.ncols() == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_finite(logits, "logits")?;
    check_labels(labels, logits.nrows(), logits.ncols())?;
    let b = logits.nrows();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = row(logits, r);
        total += log_sum_exp(z) - z[y];
    }
    Ok(total / b as f64)
}

/// Gradient of [`cross_entropy`]: (softmax(z) - onehot(y)) / B per row.
pub fn cross_entropy_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<Array2<f64>, LossError> {
    cross_entropy(logits, labels)?;
    let (b, c) = (logits.nrows(), logits.ncols());
    let mut g = Array2::zeros((b, c));
    for (r, &y) in labels.iter().enumerate() {
        let lp = log_softmax_t(row(logits, r), 1.0);
        for (col, &l) in lp.iter().enumerate() {
            g[[r, col]] = (l.exp() - if col == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(g)
}

/// Weighted sum over stages of mean cross entropy.
pub fn deep_supervision_loss(s: &StageLogits, labels: &[usize]) -> Result<f64, LossError> {
    let mut total = 0.0;
    for (stage, &w) in s.stages.iter().zip(&s.ds_weights) {
        total += w * cross_entropy(stage, labels)?;
    }
    Ok(total)
}

/// Per-stage gradients of [`deep_supervision_loss`].
pub fn deep_supervision_grad(
    s: &StageLogits,
    labels: &[usize],
) -> Result<Vec<Array2<f64>>, LossError> {
    s.stages
        .iter()
        .zip(&s.ds_weights)
        .map(|(stage, &w)| Ok(cross_entropy_grad(stage, labels)?.mapv_into(|v| v * w)))
        .collect()
}

/// Inverse self-distillation: for each shallow stage i,
/// lambda_i * T^2 * mean-over-rows KL(softmax(z_i / T) || softmax(z_N / T)),
/// with the shallow stage as the teacher.
pub fn self_distillation_loss(s: &StageLogits) -> Result<f64, LossError> {
    let n = s.num_stages();
    if n < 2 {
        return Err(LossError::NeedTwoStages(n));
    }
    let t = s.temperature;
    let b = s.batch_size();
    let student = &s.stages[n - 1];
    let mut total = 0.0;
    for (stage, &lam) in s.stages[..n - 1].iter().zip(&s.sd_weights) {
        let mut kl_sum = 0.0;
        for r in 0..b {
            let lp = log_softmax_t(row(stage, r), t);
            let lq = log_softmax_t(row(student, r), t);
            kl_sum += lp
                .iter()
                .zip(&lq)
                .map(|(&a, &c)| {
                    let p = a.exp();
                    if p > 0.0 {
                        p * (a - c)
                    } else {
                        0.0
                    }
                })
                .sum::<f64>();
        }
        total += lam * t * t * kl_sum / b as f64;
    }
    Ok(total)
}

/// Per-stage gradients of [`self_distillation_loss`]. Shallow stage i gets
/// the teacher-side term lambda_i T p (ln p - ln q - KL) / B; the final
/// stage accumulates the student-side term lambda_i T (q - p) / B over all
/// shallow stages.
pub fn self_distillation_grad(s: &StageLogits) -> Result<Vec<Array2<f64>>, LossError> {
    let n = s.num_stages();
    if n < 2 {
        return Err(LossError::NeedTwoStages(n));
    }
    let t = s.temperature;
    let (b, c) = (s.batch_size(), s.classes());
    let student = &s.stages[n - 1];
    let mut grads: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((b, c))).collect();
    for (i, (stage, &lam)) in s.stages[..n - 1].iter().zip(&s.sd_weights).enumerate() {
        for r in 0..b {
            let lp = log_softmax_t(row(stage, r), t);
            let lq = log_softmax_t(row(student, r), t);
            let kl: f64 = lp
                .iter()
                .zip(&lq)
                .map(|(&a, &cc)| {
                    let p = a.exp();
                    if p > 0.0 {
                        p * (a - cc)
                    } else {
                        0.0
                    }
                })
                .sum();
            for col in 0..c {
                let p = lp[col].exp();
                let q = lq[col].exp();
                grads[i][[r, col]] += lam * t * p * (lp[col] - lq[col] - kl) / b as f64;
                grads[n - 1][[r, col]] += lam * t * (q - p) / b as f64;
            }
        }
    }
    Ok(grads)
}
