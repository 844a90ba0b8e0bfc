//! Information-weighted fusion of selected views into one descriptor per
//! landmark.
//!
//! Weights are a softmax over the selected slots' information scores,
//! `w_i = exp(tau * I_i) / sum_j exp(tau * I_j)`, computed with
//! max-subtraction. A landmark missing some selected slots keeps the weights
//! of its present slots, renormalized to sum to 1 (algebraically the same as
//! taking the softmax over the present subset alone). The fused vector is the
//! convex combination `z = sum_i w_i * x_i`, accumulated in f64 in selection
//! order and stored as f32.
//!
//! No normalization happens here: cosine retrieval divides by vector norms,
//! which is equivalent to unit-normalizing fused descriptors after fusion.
//! Normalizing before fusion would change the convex combination and is
//! deliberately not done.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::numeric::{kahan_sum, log_sum_exp};
use crate::store::{EmbeddingDatabase, Role, StoreError, ViewDescriptor, ViewPose, SLOT_COUNT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    /// Softmax sharpness; larger concentrates mass on the best slot.
    pub tau: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig { tau: 1.0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AggregateError {
    #[error("tau must be positive and finite, got {0}")]
    BadTau(f64),
    #[error("selection is empty")]
    EmptySelection,
    #[error("non-finite score at selection position {0}")]
    NonFiniteScore(usize),
    #[error("aggregation reads drone views, got a {0} database")]
    WrongRole(Role),
    #[error("landmark {0} not present in the database")]
    UnknownLandmark(u32),
    #[error("landmark {landmark_id} has none of the selected slots")]
    NoSelectedSlots { landmark_id: u32 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Softmax weights over information scores: `exp(tau * I_i) / sum_j
/// exp(tau * I_j)`, max-subtracted for stability.
pub fn aggregation_weights(scores: &[f64], tau: f64) -> Result<Vec<f64>, AggregateError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(AggregateError::BadTau(tau));
    }
    if scores.is_empty() {
        return Err(AggregateError::EmptySelection);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(AggregateError::NonFiniteScore(i));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| tau * s).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.iter().map(|s| (s - lse).exp()).collect())
}

/// One landmark's fused descriptor: the slots that contributed (selection
/// order), their renormalized weights, and the weighted-sum feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDescriptor {
    pub landmark_id: u32,
    pub feature: Vec<f32>,
    pub slots: Vec<u8>,
    pub weights: Vec<f64>,
}

fn check_selection(
    selected: &[(ViewPose, f64)],
    cfg: &AggregationConfig,
) -> Result<Vec<f64>, AggregateError> {
    let scores: Vec<f64> = selected.iter().map(|(_, s)| *s).collect();
    aggregation_weights(&scores, cfg.tau)
}

fn fuse_rows(
    db: &EmbeddingDatabase,
    landmark_id: u32,
    rows: &[usize],
    selected: &[(ViewPose, f64)],
    full_weights: &[f64],
) -> Result<RefinedDescriptor, AggregateError> {
    let mut slot_to_row: BTreeMap<u8, usize> = BTreeMap::new();
    for &r in rows {
        if let Some(pose) = db.descriptors()[r].pose {
            slot_to_row.insert(pose.slot(), r);
        }
    }

    // Selected slots this landmark actually has, in selection order.
    let mut present: Vec<(u8, usize, f64)> = Vec::new();
    for (i, (pose, _)) in selected.iter().enumerate() {
        if let Some(&r) = slot_to_row.get(&pose.slot()) {
            present.push((pose.slot(), r, full_weights[i]));
        }
    }
    if present.is_empty() {
        return Err(AggregateError::NoSelectedSlots { landmark_id });
    }

    let total = kahan_sum(&present.iter().map(|(_, _, w)| *w).collect::<Vec<_>>());
    let weights: Vec<f64> = present.iter().map(|(_, _, w)| w / total).collect();

    let dim = db.dim();
    let mut feature = vec![0.0f32; dim];
    for d in 0..dim {
        let mut acc = 0.0f64;
        for ((_, r, _), w) in present.iter().zip(&weights) {
            acc += w * db.descriptors()[*r].feature[d] as f64;
        }
        feature[d] = acc as f32;
    }

    Ok(RefinedDescriptor {
        landmark_id,
        feature,
        slots: present.iter().map(|(s, _, _)| *s).collect(),
        weights,
    })
}

/// Fuse one landmark's selected views. `selected` pairs each chosen pose with
/// its information score; weights follow from [`aggregation_weights`].
pub fn aggregate_landmark(
    db: &EmbeddingDatabase,
    landmark_id: u32,
    selected: &[(ViewPose, f64)],
    cfg: &AggregationConfig,
) -> Result<RefinedDescriptor, AggregateError> {
    if db.role() != Role::Drone {
        return Err(AggregateError::WrongRole(db.role()));
    }
    let full_weights = check_selection(selected, cfg)?;
    let by_landmark = db.by_landmark();
    let rows = by_landmark
        .get(&landmark_id)
        .ok_or(AggregateError::UnknownLandmark(landmark_id))?;
    fuse_rows(db, landmark_id, rows, selected, &full_weights)
}

/// Fuse every landmark in the database. The result is a drone-role database
/// with one poseless descriptor per landmark, sorted by landmark id.
pub fn aggregate_database(
    db: &EmbeddingDatabase,
    selected: &[(ViewPose, f64)],
    cfg: &AggregationConfig,
) -> Result<EmbeddingDatabase, AggregateError> {
    if db.role() != Role::Drone {
        return Err(AggregateError::WrongRole(db.role()));
    }
    let full_weights = check_selection(selected, cfg)?;
    let by_landmark = db.by_landmark();
    let entries: Vec<(u32, Vec<usize>)> = by_landmark.into_iter().collect();

    let refined: Vec<RefinedDescriptor> = entries
        .par_iter()
        .map(|(id, rows)| fuse_rows(db, *id, rows, selected, &full_weights))
        .collect::<Result<_, _>>()?;

    let descriptors = refined
        .into_iter()
        .map(|r| ViewDescriptor {
            landmark_id: r.landmark_id,
            pose: None,
            feature: r.feature,
        })
        .collect();
    Ok(EmbeddingDatabase::new(Role::Drone, db.dim(), descriptors)?)
}

/// A selection covering all 54 slots with equal scores: fusion reduces to the
/// plain per-landmark mean over whichever views are present.
pub fn uniform_selection() -> Vec<(ViewPose, f64)> {
    (0..SLOT_COUNT as u8)
        .map(|s| (ViewPose::from_slot(s).expect("slot in range"), 0.0))
        .collect()
}
