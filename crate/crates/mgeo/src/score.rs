//! Per-slot information scoring.
//!
//! Each drone grid slot is scored by how much it separates landmarks, using
//! three measures computed over the feature rows gathered at that slot (one
//! row per landmark):
//!
//! - marginal entropy proxy: `0.5*ln(2*pi*e) + ln(mean_d std_d)` with the
//!   sample (n-1) standard deviation,
//! - range entropy proxy: `ln(mean_d (max_d - min_d))`,
//! - Gaussian mutual-information proxy:
//!   `0.5*ln(1 + sigma2_between / (sigma2_within + eps))` from the Fisher
//!   variance decomposition with landmarks as classes.
//!
//! `sigma2_between` is the count-weighted, unnormalized between-class scatter
//! `sum_c n_c * ||mu_c - mu||^2`; `sigma2_within` is the N-averaged
//! within-class scatter. Both are kept exactly in that form: slot ranking only
//! ever compares slots with the same row count, so the scaling is a shared
//! constant there.
//!
//! Each measure is min-max normalized across slots and the three are summed,
//! so the combined score lies in [0, 3]. `eps` doubles as the entropy floor:
//! a degenerate spread (all rows identical) scores `ln(eps)` instead of
//! diverging.

use crate::numeric::{kahan_sum, kahan_sum_iter, sample_std};
use crate::store::{EmbeddingDatabase, Role, ViewPose};

pub const DEFAULT_EPS: f64 = 1e-6;

/// 0.5 * ln(2 * pi * e).
pub fn half_ln_two_pi_e() -> f64 {
    0.5 * (std::f64::consts::TAU.ln() + 1.0)
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScoreError {
    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("rows have inconsistent dimensions")]
    RaggedRows,
    #[error("labels length {labels} does not match row count {rows}")]
    LabelMismatch { labels: usize, rows: usize },
    #[error("eps must be positive, got {0}")]
    NonPositiveEps(f64),
    #[error("variances must be non-negative (between {between}, within {within})")]
    NegativeVariance { between: f64, within: f64 },
    #[error("cannot normalize over an empty value list")]
    EmptyValues,
    #[error("non-finite value at position {0}")]
    NonFiniteValue(usize),
    #[error("scoring needs a drone database with posed views")]
    NotPosedDrone,
    #[error("scoring needs at least 2 usable slots, found {found}")]
    TooFewSlots { found: usize },
}

fn check_matrix(rows: &[Vec<f64>], min_rows: usize) -> Result<usize, ScoreError> {
    if rows.len() < min_rows {
        return Err(ScoreError::TooFewRows {
            needed: min_rows,
            found: rows.len(),
        });
    }
    let dim = rows[0].len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(ScoreError::RaggedRows);
    }
    Ok(dim)
}

/// Marginal entropy proxy of a slot's rows (one row per landmark).
pub fn marginal_entropy(rows: &[Vec<f64>], eps: f64) -> Result<f64, ScoreError> {
    if eps <= 0.0 {
        return Err(ScoreError::NonPositiveEps(eps));
    }
    let dim = check_matrix(rows, 2)?;
    let mut std_sum = 0.0;
    for d in 0..dim {
        let col: Vec<f64> = rows.iter().map(|r| r[d]).collect();
        std_sum += sample_std(&col);
    }
    let mean_std = std_sum / dim as f64;
    Ok(half_ln_two_pi_e() + mean_std.max(eps).ln())
}

/// Range entropy proxy of a slot's rows.
pub fn range_entropy(rows: &[Vec<f64>], eps: f64) -> Result<f64, ScoreError> {
    if eps <= 0.0 {
        return Err(ScoreError::NonPositiveEps(eps));
    }
    let dim = check_matrix(rows, 1)?;
    let mut range_sum = 0.0;
    for d in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in rows {
            lo = lo.min(r[d]);
            hi = hi.max(r[d]);
        }
        range_sum += hi - lo;
    }
    let mean_range = range_sum / dim as f64;
    Ok(mean_range.max(eps).ln())
}

/// Fisher variance decomposition with integer class labels.
///
/// Returns `(sigma2_between, sigma2_within)` where
/// `sigma2_between = sum_c n_c * ||mu_c - mu||^2` (count-weighted,
/// unnormalized) and `sigma2_within = (1/N) * sum_c sum_{i in c}
/// ||x_i - mu_c||^2`.
pub fn fisher_variances(rows: &[Vec<f64>], labels: &[u32]) -> Result<(f64, f64), ScoreError> {
    let dim = check_matrix(rows, 1)?;
    if labels.len() != rows.len() {
        return Err(ScoreError::LabelMismatch {
            labels: labels.len(),
            rows: rows.len(),
        });
    }
    let n = rows.len();
    let mut grand = vec![0.0; dim];
    for r in rows {
        for d in 0..dim {
            grand[d] += r[d];
        }
    }
    for g in &mut grand {
        *g /= n as f64;
    }

    let mut classes: std::collections::BTreeMap<u32, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        classes.entry(c).or_default().push(i);
    }

    let mut between_terms = Vec::with_capacity(classes.len());
    let mut within_terms = Vec::with_capacity(n);
    for rows_of_class in classes.values() {
        let nc = rows_of_class.len();
        let mut mu = vec![0.0; dim];
        for &i in rows_of_class {
            for d in 0..dim {
                mu[d] += rows[i][d];
            }
        }
        for m in &mut mu {
            *m /= nc as f64;
        }
        let dist2 = kahan_sum_iter((0..dim).map(|d| (mu[d] - grand[d]) * (mu[d] - grand[d])));
        between_terms.push(nc as f64 * dist2);
        for &i in rows_of_class {
            within_terms.push(kahan_sum_iter(
                (0..dim).map(|d| (rows[i][d] - mu[d]) * (rows[i][d] - mu[d])),
            ));
        }
    }
    let between = kahan_sum(&between_terms);
    let within = kahan_sum(&within_terms) / n as f64;
    Ok((between, within))
}

/// Gaussian mutual-information proxy `0.5 * ln(1 + between / (within + eps))`.
pub fn gaussian_mi(sigma2_between: f64, sigma2_within: f64, eps: f64) -> Result<f64, ScoreError> {
    if eps <= 0.0 {
        return Err(ScoreError::NonPositiveEps(eps));
    }
    if sigma2_between < 0.0 || sigma2_within < 0.0 {
        return Err(ScoreError::NegativeVariance {
            between: sigma2_between,
            within: sigma2_within,
        });
    }
    Ok(0.5 * (1.0 + sigma2_between / (sigma2_within + eps)).ln())
}

/// Min-max normalize to [0, 1]; a constant input maps to all 0.5.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>, ScoreError> {
    if values.is_empty() {
        return Err(ScoreError::EmptyValues);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(ScoreError::NonFiniteValue(i));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![0.5; values.len()]);
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Scored statistics for one grid slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSlotStats {
    pub slot: u8,
    pub pose: ViewPose,
    pub landmarks: usize,
    pub h_marginal: f64,
    pub h_range: f64,
    pub sigma2_between: f64,
    pub sigma2_within: f64,
    pub mi_approx: f64,
    /// Sum of the three min-max normalized measures; in [0, 3].
    pub score: f64,
}

/// Slot left out of scoring because too few landmarks carry it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedSlot {
    pub slot: u8,
    pub landmarks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    /// Scored slots in slot order.
    pub stats: Vec<ViewSlotStats>,
    /// Slots excluded for having fewer than 2 landmark rows.
    pub skipped: Vec<SkippedSlot>,
}

impl ScoreSet {
    pub fn scores(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.score).collect()
    }

    pub fn poses(&self) -> Vec<ViewPose> {
        self.stats.iter().map(|s| s.pose).collect()
    }
}

/// Score every grid slot of a posed drone database.
///
/// Statistics are global: each slot's rows are gathered across all landmarks,
/// with the landmark ids as Fisher classes. Slots carried by fewer than two
/// landmarks are skipped (reported, not scored); fewer than two scorable
/// slots is an error because min-max normalization needs a spread.
pub fn information_scores(db: &EmbeddingDatabase, eps: f64) -> Result<ScoreSet, ScoreError> {
    if eps <= 0.0 {
        return Err(ScoreError::NonPositiveEps(eps));
    }
    if db.role() != Role::Drone {
        return Err(ScoreError::NotPosedDrone);
    }
    let by_slot = db.by_slot();
    if by_slot.is_empty() {
        return Err(ScoreError::NotPosedDrone);
    }

    let mut skipped = Vec::new();
    let mut usable: Vec<(u8, Vec<usize>)> = Vec::new();
    for (slot, rows) in by_slot {
        if rows.len() < 2 {
            skipped.push(SkippedSlot {
                slot,
                landmarks: rows.len(),
            });
        } else {
            usable.push((slot, rows));
        }
    }
    if usable.len() < 2 {
        return Err(ScoreError::TooFewSlots {
            found: usable.len(),
        });
    }

    use rayon::prelude::*;
    let raw: Vec<(u8, usize, f64, f64, f64, f64, f64)> = usable
        .par_iter()
        .map(|(slot, row_ids)| {
            let rows: Vec<Vec<f64>> = row_ids
                .iter()
                .map(|&i| {
                    db.descriptors()[i]
                        .feature
                        .iter()
                        .map(|&v| v as f64)
                        .collect()
                })
                .collect();
            let labels: Vec<u32> = row_ids
                .iter()
                .map(|&i| db.descriptors()[i].landmark_id)
                .collect();
            let h_m = marginal_entropy(&rows, eps).expect("checked >= 2 rows");
            let h_r = range_entropy(&rows, eps).expect("checked >= 1 row");
            let (between, within) = fisher_variances(&rows, &labels).expect("checked rows");
            let mi = gaussian_mi(between, within, eps).expect("variances are non-negative");
            (*slot, rows.len(), h_m, h_r, between, within, mi)
        })
        .collect();

    let norm_mi = minmax_normalize(&raw.iter().map(|r| r.6).collect::<Vec<_>>())?;
    let norm_hm = minmax_normalize(&raw.iter().map(|r| r.2).collect::<Vec<_>>())?;
    let norm_hr = minmax_normalize(&raw.iter().map(|r| r.3).collect::<Vec<_>>())?;

    let stats = raw
        .iter()
        .enumerate()
        .map(
            |(i, &(slot, landmarks, h_m, h_r, between, within, mi))| ViewSlotStats {
                slot,
                pose: ViewPose::from_slot(slot).expect("slot comes from a stored pose"),
                landmarks,
                h_marginal: h_m,
                h_range: h_r,
                sigma2_between: between,
                sigma2_within: within,
                mi_approx: mi,
                score: norm_mi[i] + norm_hm[i] + norm_hr[i],
            },
        )
        .collect();

    Ok(ScoreSet { stats, skipped })
}
