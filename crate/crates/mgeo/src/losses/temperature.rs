//! Temperature-scaled softmax, entropy, divergence, and the uncertainty
//! driven temperature rule that the distillation losses build on.

use crate::numeric::{log_sum_exp, sigmoid};

use super::LossError;

/// Floor applied to the second KL argument before taking logs, so boundary
/// distributions stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_row(z: &[f64], what: &'static str) -> Result<(), LossError> {
    if z.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite { what });
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<(), LossError> {
    if !t.is_finite() || t <= 0.0 {
        return Err(LossError::BadTemperature(t));
    }
    Ok(())
}

/// Log probabilities of softmax(z / t), computed with max subtraction.
pub(crate) fn log_softmax_t(z: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|v| v - lse).collect()
}

/// Softened probabilities softmax(z / t). Sums to 1 within 1e-12.
pub fn softmax_t(z: &[f64], t: f64) -> Result<Vec<f64>, LossError> {
    check_row(z, "logits")?;
    check_temperature(t)?;
    Ok(log_softmax_t(z, t).iter().map(|l| l.exp()).collect())
}

/// Entropy of softmax(z) in nats; lies in [0, ln C] with the maximum at
/// uniform logits.
pub fn shannon_entropy(z: &[f64]) -> Result<f64, LossError> {
    check_row(z, "logits")?;
    let lp = log_softmax_t(z, 1.0);
    // p ln p -> 0 as p -> 0, so fully underflowed classes contribute zero.
    Ok(-lp
        .iter()
        .map(|&l| {
            let p = l.exp();
            if p > 0.0 {
                p * l
            } else {
                0.0
            }
        })
        .sum::<f64>())
}

/// Gradient of [`shannon_entropy`] with respect to the logits:
/// d H / d z_a = -p_a (ln p_a + H).
pub fn shannon_entropy_grad(z: &[f64]) -> Result<Vec<f64>, LossError> {
    let h = shannon_entropy(z)?;
    let lp = log_softmax_t(z, 1.0);
    Ok(lp
        .iter()
        .map(|&l| {
            let p = l.exp();
            if p > 0.0 {
                -p * (l + h)
            } else {
                0.0
            }
        })
        .collect())
}

/// Uncertainty-gap temperature t0 * (1 + sigmoid(u_drone - u_sat)).
/// Strictly inside (t0, 2 t0) whenever the sigmoid does not saturate in
/// f64, which holds for entropy gaps (|gap| <= ln C).
pub fn adaptive_temperature(u_drone: f64, u_sat: f64, t0: f64) -> Result<f64, LossError> {
    check_temperature(t0)?;
    if !u_drone.is_finite() || !u_sat.is_finite() {
        return Err(LossError::NonFinite {
            what: "uncertainty",
        });
    }
    Ok(t0 * (1.0 + sigmoid(u_drone - u_sat)))
}

/// Partials of [`adaptive_temperature`] with respect to (u_drone, u_sat).
pub fn adaptive_temperature_grad(
    u_drone: f64,
    u_sat: f64,
    t0: f64,
) -> Result<(f64, f64), LossError> {
    check_temperature(t0)?;
    if !u_drone.is_finite() || !u_sat.is_finite() {
        return Err(LossError::NonFinite {
            what: "uncertainty",
        });
    }
    let s = sigmoid(u_drone - u_sat);
    let d = t0 * s * (1.0 - s);
    Ok((d, -d))
}

/// Raw KL kernel without distribution validation: sum over classes of
/// p ln(p / max(q, floor)), with p = 0 terms dropped.
pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pc, &qc)| {
            if pc > 0.0 {
                pc * (pc.ln() - qc.max(PROB_FLOOR).ln())
            } else {
                0.0
            }
        })
        .sum()
}

fn check_distribution(p: &[f64], what: &'static str) -> Result<(), LossError> {
    check_row(p, what)?;
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(LossError::NotDistribution { what, row: 0 });
    }
    Ok(())
}

/// KL divergence between two probability rows, second argument floored at
/// [`PROB_FLOOR`]. Nonnegative; zero exactly when the rows coincide.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, LossError> {
    check_distribution(p, "first distribution")?;
    check_distribution(q, "second distribution")?;
    if p.len() != q.len() {
        return Err(LossError::ColMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(kl_raw(p, q))
}
