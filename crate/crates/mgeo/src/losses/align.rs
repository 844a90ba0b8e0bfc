//! Cross-branch alignment: an uncertainty-adaptive KL between the satellite
//! (teacher) and drone (student) heads, plus feature- and logit-level
//! cross-distillation terms with explicit combination weights.

use ndarray::Array2;

use crate::numeric::{dot, l2_norm, sigmoid};

use super::temperature::{
    kl_raw, log_softmax_t, shannon_entropy, shannon_entropy_grad, PROB_FLOOR,
};
use super::{check_finite, row, LossError};

pub const DEFAULT_BASE_TEMPERATURE: f64 = 1.0;

/// Paired logit batches for the adaptive alignment loss. The temperature is
/// driven by the entropy gap between the branches: batch-mean entropies by
/// default, or per-row entropies with `per_sample`.
#[derive(Debug, Clone)]
pub struct UapaInputs {
    pub drone_logits: Array2<f64>,
    pub satellite_logits: Array2<f64>,
    pub base_temperature: f64,
    pub per_sample: bool,
}

impl UapaInputs {
    pub fn new(
        drone_logits: Array2<f64>,
        satellite_logits: Array2<f64>,
        base_temperature: f64,
    ) -> Result<Self, LossError> {
        if drone_logits.nrows() == 0 || drone_logits.ncols() == 0 {
            return Err(LossError::EmptyBatch);
        }
        if drone_logits.nrows() != satellite_logits.nrows() {
            return Err(LossError::RowMismatch {
                left: drone_logits.nrows(),
                right: satellite_logits.nrows(),
            });
        }
        if drone_logits.ncols() != satellite_logits.ncols() {
            return Err(LossError::ColMismatch {
                left: drone_logits.ncols(),
                right: satellite_logits.ncols(),
            });
        }
        check_finite(&drone_logits, "drone logits")?;
        check_finite(&satellite_logits, "satellite logits")?;
        if !base_temperature.is_finite() || base_temperature <= 0.0 {
            return Err(LossError::BadTemperature(base_temperature));
        }
        Ok(UapaInputs {
            drone_logits,
            satellite_logits,
            base_temperature,
            per_sample: false,
        })
    }

    pub fn per_sample(mut self) -> Self {
        self.per_sample = true;
        self
    }
}

/// Uncertainty-gap temperature from the entropy gap between the drone and
/// satellite branches. Re-exported here next to the loss that uses it.
pub use super::temperature::{adaptive_temperature, adaptive_temperature_grad};

struct RowTerms {
    kl: f64,
    /// d KL / d T holding the logits fixed.
    dkl_dt: f64,
    /// Teacher-path gradient factor per class: p ((ln p - ln q) - KL) / T.
    teacher: Vec<f64>,
    /// Student-path gradient factor per class: (q - p) / T.
    student: Vec<f64>,
}

fn row_terms(z_sat: &[f64], z_drone: &[f64], t: f64) -> RowTerms {
    let lp = log_softmax_t(z_sat, t);
    let lq = log_softmax_t(z_drone, t);
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let q: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .zip(&p)
        .map(|((&a, &b), &pc)| if pc > 0.0 { pc * (a - b) } else { 0.0 })
        .sum();
    let mean_sat: f64 = p.iter().zip(z_sat).map(|(&pc, &z)| pc * z).sum();
    let mean_drone_p: f64 = p.iter().zip(z_drone).map(|(&pc, &z)| pc * z).sum();
    let mean_drone_q: f64 = q.iter().zip(z_drone).map(|(&qc, &z)| qc * z).sum();
    let dkl_dt = (p
        .iter()
        .zip(z_sat)
        .zip(lp.iter().zip(&lq))
        .map(|((&pc, &z), (&a, &b))| pc * (mean_sat - z) * (a - b))
        .sum::<f64>()
        - (mean_drone_q - mean_drone_p))
        / (t * t);
    let teacher = p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(&pc, (&a, &b))| pc * ((a - b) - kl) / t)
        .collect();
    let student = q.iter().zip(&p).map(|(&qc, &pc)| (qc - pc) / t).collect();
    RowTerms {
        kl,
        dkl_dt,
        teacher,
        student,
    }
}

fn branch_entropies(m: &Array2<f64>) -> Result<Vec<f64>, LossError> {
    (0..m.nrows()).map(|r| shannon_entropy(row(m, r))).collect()
}

/// Adaptive alignment loss T^2 * mean-over-rows KL(teacher || student) with
/// the satellite branch as the teacher and T from the entropy gap.
pub fn uapa_align_loss(inp: &UapaInputs) -> Result<f64, LossError> {
    Ok(uapa_align_grad(inp)?.0)
}

/// Value of [`uapa_align_loss`] plus gradients with respect to the drone
/// and satellite logits. Both the divergence and the temperature depend on
/// the logits, so each gradient carries a direct term and a term through T.
pub fn uapa_align_grad(inp: &UapaInputs) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    let t0 = inp.base_temperature;
    let (b, c) = (inp.drone_logits.nrows(), inp.drone_logits.ncols());
    let bf = b as f64;
    let h_drone = branch_entropies(&inp.drone_logits)?;
    let h_sat = branch_entropies(&inp.satellite_logits)?;
    let mut g_drone = Array2::zeros((b, c));
    let mut g_sat = Array2::zeros((b, c));

    if inp.per_sample {
        let mut total = 0.0;
        for r in 0..b {
            let sig = sigmoid(h_drone[r] - h_sat[r]);
            let t = t0 * (1.0 + sig);
            let terms = row_terms(row(&inp.satellite_logits, r), row(&inp.drone_logits, r), t);
            total += t * t * terms.kl / bf;
            let dl_dt = (2.0 * t * terms.kl + t * t * terms.dkl_dt) / bf;
            let dt_dh = t0 * sig * (1.0 - sig);
            let eg_d = shannon_entropy_grad(row(&inp.drone_logits, r))?;
            let eg_s = shannon_entropy_grad(row(&inp.satellite_logits, r))?;
            for col in 0..c {
                g_drone[[r, col]] = t * t * terms.student[col] / bf + dl_dt * dt_dh * eg_d[col];
                g_sat[[r, col]] = t * t * terms.teacher[col] / bf - dl_dt * dt_dh * eg_s[col];
            }
        }
        return Ok((total, g_drone, g_sat));
    }

    let u_drone = h_drone.iter().sum::<f64>() / bf;
    let u_sat = h_sat.iter().sum::<f64>() / bf;
    let sig = sigmoid(u_drone - u_sat);
    let t = t0 * (1.0 + sig);
    let terms: Vec<RowTerms> = (0..b)
        .map(|r| row_terms(row(&inp.satellite_logits, r), row(&inp.drone_logits, r), t))
        .collect();
    let m = terms.iter().map(|w| w.kl).sum::<f64>() / bf;
    let dm_dt = terms.iter().map(|w| w.dkl_dt).sum::<f64>() / bf;
    let loss = t * t * m;
    let dl_dt = 2.0 * t * m + t * t * dm_dt;
    let dt_dh = t0 * sig * (1.0 - sig) / bf;
    for r in 0..b {
        let eg_d = shannon_entropy_grad(row(&inp.drone_logits, r))?;
        let eg_s = shannon_entropy_grad(row(&inp.satellite_logits, r))?;
        for col in 0..c {
            g_drone[[r, col]] = t * t * terms[r].student[col] / bf + dl_dt * dt_dh * eg_d[col];
            g_sat[[r, col]] = t * t * terms[r].teacher[col] / bf - dl_dt * dt_dh * eg_s[col];
        }
    }
    Ok((loss, g_drone, g_sat))
}

/// Teacher and student batches for cross-distillation: features after
/// projection to a common width, plus per-row probability vectors.
#[derive(Debug, Clone)]
pub struct CrossDistillInputs {
    pub teacher_features: Array2<f64>,
    pub student_features: Array2<f64>,
    pub teacher_probs: Array2<f64>,
    pub student_probs: Array2<f64>,
}

fn check_probs(m: &Array2<f64>, what: &'static str) -> Result<(), LossError> {
    check_finite(m, what)?;
    for r in 0..m.nrows() {
        let s: f64 = row(m, r).iter().sum();
        if row(m, r).iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-6 {
            return Err(LossError::NotDistribution { what, row: r });
        }
    }
    Ok(())
}

impl CrossDistillInputs {
    pub fn new(
        teacher_features: Array2<f64>,
        student_features: Array2<f64>,
        teacher_probs: Array2<f64>,
        student_probs: Array2<f64>,
    ) -> Result<Self, LossError> {
        if teacher_features.nrows() == 0
            || teacher_features.ncols() == 0
            || teacher_probs.ncols() == 0
        {
            return Err(LossError::EmptyBatch);
        }
        for (left, right) in [
            (teacher_features.nrows(), student_features.nrows()),
            (teacher_features.nrows(), teacher_probs.nrows()),
            (teacher_probs.nrows(), student_probs.nrows()),
        ] {
            if left != right {
                return Err(LossError::RowMismatch { left, right });
            }
        }
        if teacher_features.ncols() != student_features.ncols() {
            return Err(LossError::ColMismatch {
                left: teacher_features.ncols(),
                right: student_features.ncols(),
            });
        }
        if teacher_probs.ncols() != student_probs.ncols() {
            return Err(LossError::ColMismatch {
                left: teacher_probs.ncols(),
                right: student_probs.ncols(),
            });
        }
        check_finite(&teacher_features, "teacher features")?;
        check_finite(&student_features, "student features")?;
        check_probs(&teacher_probs, "teacher probabilities")?;
        check_probs(&student_probs, "student probabilities")?;
        Ok(CrossDistillInputs {
            teacher_features,
            student_features,
            teacher_probs,
            student_probs,
        })
    }
}

/// Mean-over-rows KL from teacher to student probability rows.
pub fn cross_distill_logits_loss(
    p_teacher: &Array2<f64>,
    p_student: &Array2<f64>,
) -> Result<f64, LossError> {
    if p_teacher.nrows() == 0 || p_teacher.ncols() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if p_teacher.nrows() != p_student.nrows() {
        return Err(LossError::RowMismatch {
            left: p_teacher.nrows(),
            right: p_student.nrows(),
        });
    }
    if p_teacher.ncols() != p_student.ncols() {
        return Err(LossError::ColMismatch {
            left: p_teacher.ncols(),
            right: p_student.ncols(),
        });
    }
    check_probs(p_teacher, "teacher probabilities")?;
    check_probs(p_student, "student probabilities")?;
    let b = p_teacher.nrows();
    let total: f64 = (0..b)
        .map(|r| kl_raw(row(p_teacher, r), row(p_student, r)))
        .sum();
    Ok(total / b as f64)
}

/// Value and gradients of [`cross_distill_logits_loss`] in the ambient
/// probability coordinates: d/dp_T = (ln p_T - ln p_S + 1) / B and
/// d/dp_S = -(p_T / p_S) / B. Requires strictly positive rows so the
/// gradients stay finite.
pub fn cross_distill_logits_grad(
    p_teacher: &Array2<f64>,
    p_student: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    let loss = cross_distill_logits_loss(p_teacher, p_student)?;
    let (b, c) = (p_teacher.nrows(), p_teacher.ncols());
    for (m, what) in [
        (p_teacher, "teacher probabilities"),
        (p_student, "student probabilities"),
    ] {
        for r in 0..b {
            if row(m, r).iter().any(|&v| v <= 0.0) {
                return Err(LossError::NotStrictlyPositive { what, row: r });
            }
        }
    }
    let bf = b as f64;
    let mut gt = Array2::zeros((b, c));
    let mut gs = Array2::zeros((b, c));
    for r in 0..b {
        for col in 0..c {
            let pt = p_teacher[[r, col]];
            let ps = p_student[[r, col]].max(PROB_FLOOR);
            gt[[r, col]] = (pt.ln() - ps.ln() + 1.0) / bf;
            gs[[r, col]] = -(pt / ps) / bf;
        }
    }
    Ok((loss, gt, gs))
}

/// Mean over rows of the squared distance plus cosine gap between
/// L2-normalized teacher and student feature rows.
pub fn cross_distill_feature_loss(
    f_teacher: &Array2<f64>,
    f_student: &Array2<f64>,
) -> Result<f64, LossError> {
    Ok(cross_distill_feature_grad(f_teacher, f_student)?.0)
}

/// Value and gradients of [`cross_distill_feature_loss`]. Per row the loss
/// is 3 - 3 cos(a, b), so each side's gradient is the cosine gradient
/// scaled by -3 / B.
pub fn cross_distill_feature_grad(
    f_teacher: &Array2<f64>,
    f_student: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    if f_teacher.nrows() == 0 || f_teacher.ncols() == 0 {
        return Err(LossError::EmptyBatch);
    }
    if f_teacher.nrows() != f_student.nrows() {
        return Err(LossError::RowMismatch {
            left: f_teacher.nrows(),
            right: f_student.nrows(),
        });
    }
    if f_teacher.ncols() != f_student.ncols() {
        return Err(LossError::ColMismatch {
            left: f_teacher.ncols(),
            right: f_student.ncols(),
        });
    }
    check_finite(f_teacher, "teacher features")?;
    check_finite(f_student, "student features")?;
    let (b, dim) = (f_teacher.nrows(), f_teacher.ncols());
    let bf = b as f64;
    let mut gt = Array2::zeros((b, dim));
    let mut gs = Array2::zeros((b, dim));
    let mut total = 0.0;
    for r in 0..b {
        let (a, s) = (row(f_teacher, r), row(f_student, r));
        let (na, ns) = (l2_norm(a), l2_norm(s));
        if na == 0.0 {
            return Err(LossError::ZeroRow {
                what: "teacher features",
                row: r,
            });
        }
        if ns == 0.0 {
            return Err(LossError::ZeroRow {
                what: "student features",
                row: r,
            });
        }
        let ahat: Vec<f64> = a.iter().map(|v| v / na).collect();
        let shat: Vec<f64> = s.iter().map(|v| v / ns).collect();
        let cos = dot(&ahat, &shat);
        let sq: f64 = ahat.iter().zip(&shat).map(|(x, y)| (x - y) * (x - y)).sum();
        total += sq + (1.0 - cos);
        for c in 0..dim {
            gt[[r, c]] = -3.0 * (shat[c] - cos * ahat[c]) / na / bf;
            gs[[r, c]] = -3.0 * (ahat[c] - cos * shat[c]) / ns / bf;
        }
    }
    Ok((total / bf, gt, gs))
}

/// Combination weights for the second-stage objective. The three terms have
/// no published weighting, so there is deliberately no default here; every
/// caller states its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTwoWeights {
    pub align: f64,
    pub logits: f64,
    pub feature: f64,
}

impl StageTwoWeights {
    fn check(&self) -> Result<(), LossError> {
        for v in [self.align, self.logits, self.feature] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::BadWeight(v));
            }
        }
        Ok(())
    }
}

/// Weighted sum of the alignment loss and the two cross-distillation terms.
pub fn stage_two_loss(
    uapa: &UapaInputs,
    cross: &CrossDistillInputs,
    weights: &StageTwoWeights,
) -> Result<f64, LossError> {
    weights.check()?;
    Ok(weights.align * uapa_align_loss(uapa)?
        + weights.logits * cross_distill_logits_loss(&cross.teacher_probs, &cross.student_probs)?
        + weights.feature
            * cross_distill_feature_loss(&cross.teacher_features, &cross.student_features)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn assert_close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn identical_branches_align_at_zero() {
        let z = arr2(&[[0.4, -0.2, 1.0], [0.0, 0.5, -0.5]]);
        for per_sample in [false, true] {
            let mut inp = UapaInputs::new(z.clone(), z.clone(), 1.0).unwrap();
            inp.per_sample = per_sample;
            assert_eq!(uapa_align_loss(&inp).unwrap(), 0.0);
        }
    }

    #[test]
    fn alignment_is_continuous_in_the_base_temperature() {
        let zd = arr2(&[[0.9, -0.4, 0.1], [0.3, 0.3, -0.8]]);
        let zs = arr2(&[[-0.2, 0.6, 0.3], [0.1, -0.1, 0.7]]);
        let mut prev: Option<f64> = None;
        for i in 0..40 {
            let t0 = 0.5 + 0.05 * i as f64;
            let v = uapa_align_loss(&UapaInputs::new(zd.clone(), zs.clone(), t0).unwrap()).unwrap();
            assert!(v >= 0.0);
            if let Some(p) = prev {
                assert!((v - p).abs() < 0.2, "jump at t0={t0}: {p} -> {v}");
            }
            prev = Some(v);
        }
    }

    #[test]
    fn per_sample_and_batch_modes_differ_on_uneven_batches() {
        // One confident row and one uncertain row make the per-row
        // temperatures straddle the batch temperature.
        let zd = arr2(&[[4.0, 0.0, 0.0], [0.1, 0.0, 0.0]]);
        let zs = arr2(&[[0.2, 0.1, 0.0], [3.0, 0.0, 1.0]]);
        let batch = UapaInputs::new(zd.clone(), zs.clone(), 1.0).unwrap();
        let per = UapaInputs::new(zd, zs, 1.0).unwrap().per_sample();
        let (a, b) = (
            uapa_align_loss(&batch).unwrap(),
            uapa_align_loss(&per).unwrap(),
        );
        assert!((a - b).abs() > 1e-6, "{a} vs {b}");
    }

    #[test]
    fn cross_logits_examples() {
        let p = arr2(&[[0.3, 0.7]]);
        assert_eq!(cross_distill_logits_loss(&p, &p).unwrap(), 0.0);
        let t = arr2(&[[1.0, 0.0]]);
        let s = arr2(&[[0.5, 0.5]]);
        assert_close(cross_distill_logits_loss(&t, &s).unwrap(), 2.0f64.ln());
    }

    #[test]
    fn cross_logits_is_nonnegative() {
        let mut rng = crate::rng::DetRng::new(31);
        for _ in 0..200 {
            let mk = |rng: &mut crate::rng::DetRng| {
                let z: Vec<f64> = (0..4).map(|_| rng.next_range(-2.0, 2.0)).collect();
                crate::losses::softmax_t(&z, 1.0).unwrap()
            };
            let t = Array2::from_shape_vec((1, 4), mk(&mut rng)).unwrap();
            let s = Array2::from_shape_vec((1, 4), mk(&mut rng)).unwrap();
            assert!(cross_distill_logits_loss(&t, &s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn cross_logits_grad_requires_positive_rows() {
        let t = arr2(&[[1.0, 0.0]]);
        let s = arr2(&[[0.5, 0.5]]);
        assert!(matches!(
            cross_distill_logits_grad(&t, &s),
            Err(LossError::NotStrictlyPositive { .. })
        ));
    }

    #[test]
    fn equal_features_distill_to_zero() {
        let f = arr2(&[[0.3, -0.8, 0.2], [1.0, 0.5, -0.1]]);
        assert!(cross_distill_feature_loss(&f, &f).unwrap().abs() < 1e-15);
    }

    #[test]
    fn orthogonal_unit_rows_cost_three() {
        let t = arr2(&[[1.0, 0.0]]);
        let s = arr2(&[[0.0, 1.0]]);
        assert_close(cross_distill_feature_loss(&t, &s).unwrap(), 3.0);
    }

    #[test]
    fn feature_loss_ignores_positive_scaling() {
        let t = arr2(&[[0.3, -0.8, 0.2], [1.0, 0.5, -0.1]]);
        let s = arr2(&[[0.1, 0.9, 0.4], [-0.3, 0.2, 0.8]]);
        let scaled = s.clone() * 7.25;
        assert_close(
            cross_distill_feature_loss(&t, &s).unwrap(),
            cross_distill_feature_loss(&t, &scaled).unwrap(),
        );
    }

    #[test]
    fn stage_two_combines_with_explicit_weights() {
        let zd = arr2(&[[0.9, -0.4], [0.3, 0.3]]);
        let zs = arr2(&[[-0.2, 0.6], [0.1, -0.1]]);
        let uapa = UapaInputs::new(zd, zs, 1.0).unwrap();
        let ft = arr2(&[[1.0, 0.0], [0.5, 0.5]]);
        let fs = arr2(&[[0.8, 0.1], [0.4, 0.6]]);
        let pt = arr2(&[[0.6, 0.4], [0.2, 0.8]]);
        let ps = arr2(&[[0.5, 0.5], [0.3, 0.7]]);
        let cross =
            CrossDistillInputs::new(ft.clone(), fs.clone(), pt.clone(), ps.clone()).unwrap();
        let w = StageTwoWeights {
            align: 0.7,
            logits: 0.2,
            feature: 0.1,
        };
        let expected = 0.7 * uapa_align_loss(&uapa).unwrap()
            + 0.2 * cross_distill_logits_loss(&pt, &ps).unwrap()
            + 0.1 * cross_distill_feature_loss(&ft, &fs).unwrap();
        assert_close(stage_two_loss(&uapa, &cross, &w).unwrap(), expected);

        let bad = StageTwoWeights { align: -1.0, ..w };
        assert!(matches!(
            stage_two_loss(&uapa, &cross, &bad),
            Err(LossError::BadWeight(_))
        ));
    }

    #[test]
    fn inputs_are_validated() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((3, 3));
        assert!(matches!(
            UapaInputs::new(a.clone(), b, 1.0),
            Err(LossError::RowMismatch { .. })
        ));
        assert!(matches!(
            UapaInputs::new(a.clone(), a.clone(), 0.0),
            Err(LossError::BadTemperature(_))
        ));
        let probs = arr2(&[[0.6, 0.6], [0.5, 0.5]]);
        assert!(matches!(
            CrossDistillInputs::new(a.clone(), a.clone(), probs, arr2(&[[0.5, 0.5], [0.5, 0.5]])),
            Err(LossError::NotDistribution { row: 0, .. })
        ));
    }
}
