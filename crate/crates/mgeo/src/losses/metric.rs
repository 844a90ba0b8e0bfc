//! Metric learning terms: batch-hard triplet loss within each domain and
//! the symmetric cross-view contrastive loss between domains.

use ndarray::Array2;

use crate::numeric::{dot, l2_norm, log_sum_exp};

use super::{check_finite, row, LossError};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_CONTRASTIVE_TAU: f64 = 0.1;

/// Paired drone and satellite feature batches; row k of both matrices
/// belongs to the same landmark.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub drone: Array2<f64>,
    pub satellite: Array2<f64>,
    pub margin: f64,
    pub tau_c: f64,
}

impl EmbeddingBatch {
    pub fn new(
        drone: Array2<f64>,
        satellite: Array2<f64>,
        margin: f64,
        tau_c: f64,
    ) -> Result<Self, LossError> {
        if drone.nrows() == 0 || drone.ncols() == 0 {
            return Err(LossError::EmptyBatch);
        }
        if drone.nrows() != satellite.nrows() {
            return Err(LossError::RowMismatch {
                left: drone.nrows(),
                right: satellite.nrows(),
            });
        }
        if drone.ncols() != satellite.ncols() {
            return Err(LossError::ColMismatch {
                left: drone.ncols(),
                right: satellite.ncols(),
            });
        }
        check_finite(&drone, "drone features")?;
        check_finite(&satellite, "satellite features")?;
        if !margin.is_finite() || margin < 0.0 {
            return Err(LossError::BadMargin(margin));
        }
        if !tau_c.is_finite() || tau_c <= 0.0 {
            return Err(LossError::BadTau(tau_c));
        }
        Ok(EmbeddingBatch {
            drone,
            satellite,
            margin,
            tau_c,
        })
    }
}

/// Squared Euclidean distances between all row pairs.
pub fn pairwise_sq_dists(f: &Array2<f64>) -> Array2<f64> {
    let b = f.nrows();
    let mut d = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let (ri, rj) = (row(f, i), row(f, j));
            d[[i, j]] = ri
                .iter()
                .zip(rj)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>();
        }
    }
    d
}

/// Batch-hard mining: per anchor, the farthest same-label row (positive)
/// and the nearest different-label row (negative), ties going to the lowest
/// index. `None` where either side is missing.
pub fn hard_pairs(
    features: &Array2<f64>,
    labels: &[usize],
) -> Result<Vec<Option<(usize, usize)>>, LossError> {
    let b = features.nrows();
    if b == 0 || features.ncols() == 0 {
        return Err(LossError::EmptyBatch);
    }
    check_finite(features, "features")?;
    if labels.len() != b {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            rows: b,
        });
    }
    let d = pairwise_sq_dists(features);
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for o in 0..b {
            if o == a {
                continue;
            }
            if labels[o] == labels[a] {
                if pos.is_none_or(|(_, best)| d[[a, o]] > best) {
                    pos = Some((o, d[[a, o]]));
                }
            } else if neg.is_none_or(|(_, best)| d[[a, o]] < best) {
                neg = Some((o, d[[a, o]]));
            }
        }
        out.push(match (pos, neg) {
            (Some((p, _)), Some((n, _))) => Some((p, n)),
            _ => None,
        });
    }
    Ok(out)
}

/// Batch-hard triplet loss: mean over valid anchors of
/// max(0, d_ap^2 - d_an^2 + margin). Errors when no anchor has both a
/// positive and a negative.
pub fn triplet_hard_loss(
    features: &Array2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<f64, LossError> {
    if !margin.is_finite() || margin < 0.0 {
        return Err(LossError::BadMargin(margin));
    }
    let pairs = hard_pairs(features, labels)?;
    let d = pairwise_sq_dists(features);
    let mut total = 0.0;
    let mut valid = 0usize;
    for (a, pair) in pairs.iter().enumerate() {
        if let Some((p, n)) = pair {
            total += (d[[a, *p]] - d[[a, *n]] + margin).max(0.0);
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(LossError::NoValidAnchors);
    }
    Ok(total / valid as f64)
}

/// Value and feature gradient of [`triplet_hard_loss`]. Each anchor with an
/// active hinge contributes 2(f_a - f_p) minus 2(f_a - f_n) through the two
/// squared distances, scaled by 1 / valid anchors.
pub fn triplet_hard_grad(
    features: &Array2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    if !margin.is_finite() || margin < 0.0 {
        return Err(LossError::BadMargin(margin));
    }
    let pairs = hard_pairs(features, labels)?;
    let d = pairwise_sq_dists(features);
    let valid = pairs.iter().flatten().count();
    if valid == 0 {
        return Err(LossError::NoValidAnchors);
    }
    let scale = 1.0 / valid as f64;
    let (b, dim) = (features.nrows(), features.ncols());
    let mut g = Array2::zeros((b, dim));
    let mut total = 0.0;
    for (a, pair) in pairs.iter().enumerate() {
        let Some((p, n)) = pair else { continue };
        let hinge = d[[a, *p]] - d[[a, *n]] + margin;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        for c in 0..dim {
            let ap = features[[a, c]] - features[[*p, c]];
            let an = features[[a, c]] - features[[*n, c]];
            g[[a, c]] += scale * 2.0 * (ap - an);
            g[[*p, c]] -= scale * 2.0 * ap;
            g[[*n, c]] += scale * 2.0 * an;
        }
    }
    Ok((total * scale, g))
}

fn unit_rows(f: &Array2<f64>, what: &'static str) -> Result<Vec<Vec<f64>>, LossError> {
    (0..f.nrows())
        .map(|i| {
            let r = row(f, i);
            let n = l2_norm(r);
            if n == 0.0 {
                return Err(LossError::ZeroRow { what, row: i });
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

fn check_contrastive(
    anchors: &Array2<f64>,
    targets: &Array2<f64>,
    tau_c: f64,
) -> Result<(), LossError> {
    if anchors.nrows() == 0 || anchors.ncols() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if anchors.nrows() != targets.nrows() {
        return Err(LossError::RowMismatch {
            left: anchors.nrows(),
            right: targets.nrows(),
        });
    }
    if anchors.ncols() != targets.ncols() {
        return Err(LossError::ColMismatch {
            left: anchors.ncols(),
            right: targets.ncols(),
        });
    }
    check_finite(anchors, "anchor features")?;
    check_finite(targets, "target features")?;
    if !tau_c.is_finite() || tau_c <= 0.0 {
        return Err(LossError::BadTau(tau_c));
    }
    Ok(())
}

/// One-directional InfoNCE over cosine similarities: row k of `targets` is
/// the positive for row k of `anchors`, every other row is a negative.
pub fn infonce_directional(
    anchors: &Array2<f64>,
    targets: &Array2<f64>,
    tau_c: f64,
) -> Result<f64, LossError> {
    check_contrastive(anchors, targets, tau_c)?;
    let a = unit_rows(anchors, "anchor features")?;
    let t = unit_rows(targets, "target features")?;
    let b = a.len();
    let mut total = 0.0;
    for k in 0..b {
        let sims: Vec<f64> = t.iter().map(|tr| dot(&a[k], tr) / tau_c).collect();
        total += log_sum_exp(&sims) - sims[k];
    }
    Ok(total / b as f64)
}

/// Value and gradients of [`infonce_directional`] with respect to anchors
/// and targets. The similarity-space gradient (softmax - onehot) / (B tau)
/// is pushed through the cosine of each unnormalized row pair.
pub fn infonce_grad(
    anchors: &Array2<f64>,
    targets: &Array2<f64>,
    tau_c: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    check_contrastive(anchors, targets, tau_c)?;
    let ahat = unit_rows(anchors, "anchor features")?;
    let that = unit_rows(targets, "target features")?;
    let b = ahat.len();
    let dim = anchors.ncols();
    let mut ga = Array2::zeros((b, dim));
    let mut gt = Array2::zeros((b, dim));
    let mut total = 0.0;
    for k in 0..b {
        let sims: Vec<f64> = that.iter().map(|tr| dot(&ahat[k], tr)).collect();
        let scaled: Vec<f64> = sims.iter().map(|s| s / tau_c).collect();
        let lse = log_sum_exp(&scaled);
        total += lse - scaled[k];
        let anorm = l2_norm(row(anchors, k));
        for l in 0..b {
            let soft = (scaled[l] - lse).exp();
            let gsim = (soft - if l == k { 1.0 } else { 0.0 }) / (b as f64 * tau_c);
            if gsim == 0.0 {
                continue;
            }
            let tnorm = l2_norm(row(targets, l));
            for c in 0..dim {
                ga[[k, c]] += gsim * (that[l][c] - sims[l] * ahat[k][c]) / anorm;
                gt[[l, c]] += gsim * (ahat[k][c] - sims[l] * that[l][c]) / tnorm;
            }
        }
    }
    Ok((total / b as f64, ga, gt))
}

/// Symmetric cross-view contrastive loss: the mean of the two directional
/// InfoNCE terms, so swapping the domains leaves the value unchanged.
pub fn csc_loss(f_d: &Array2<f64>, f_s: &Array2<f64>, tau_c: f64) -> Result<f64, LossError> {
    Ok(0.5 * (infonce_directional(f_d, f_s, tau_c)? + infonce_directional(f_s, f_d, tau_c)?))
}

/// Value and gradients of [`csc_loss`] with respect to both feature sets.
pub fn csc_grad(
    f_d: &Array2<f64>,
    f_s: &Array2<f64>,
    tau_c: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    let (l_ds, a_ds, t_ds) = infonce_grad(f_d, f_s, tau_c)?;
    let (l_sd, a_sd, t_sd) = infonce_grad(f_s, f_d, tau_c)?;
    let gd = (a_ds + t_sd).mapv_into(|v| 0.5 * v);
    let gs = (t_ds + a_sd).mapv_into(|v| 0.5 * v);
    Ok((0.5 * (l_ds + l_sd), gd, gs))
}

fn triplet_or_skip(
    features: &Array2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<f64, LossError> {
    match triplet_hard_loss(features, labels, margin) {
        Ok(v) => Ok(v),
        // A batch of pairwise-distinct labels has no triplets at all; the
        // combined objective then reduces to its contrastive part instead
        // of failing, unlike the standalone triplet loss.
        Err(LossError::NoValidAnchors) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Within-domain triplet terms for both domains plus the cross-view
/// contrastive term.
pub fn metric_loss(batch: &EmbeddingBatch, labels: &[usize]) -> Result<f64, LossError> {
    let td = triplet_or_skip(&batch.drone, labels, batch.margin)?;
    let ts = triplet_or_skip(&batch.satellite, labels, batch.margin)?;
    Ok(td + ts + csc_loss(&batch.drone, &batch.satellite, batch.tau_c)?)
}

/// Value and gradients of [`metric_loss`] with respect to both feature
/// batches.
pub fn metric_grad(
    batch: &EmbeddingBatch,
    labels: &[usize],
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    let zero = || Array2::zeros(batch.drone.raw_dim());
    let (td, gtd) = match triplet_hard_grad(&batch.drone, labels, batch.margin) {
        Ok(v) => v,
        Err(LossError::NoValidAnchors) => (0.0, zero()),
        Err(e) => return Err(e),
    };
    let (ts, gts) = match triplet_hard_grad(&batch.satellite, labels, batch.margin) {
        Ok(v) => v,
        Err(LossError::NoValidAnchors) => (0.0, zero()),
        Err(e) => return Err(e),
    };
    let (lc, gcd, gcs) = csc_grad(&batch.drone, &batch.satellite, batch.tau_c)?;
    Ok((td + ts + lc, gtd + gcd, gts + gcs))
}
