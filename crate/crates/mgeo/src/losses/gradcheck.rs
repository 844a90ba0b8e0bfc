//! Central finite-difference verification of every analytic gradient in
//! this module tree.
//!
//! Each suite case packs a loss's inputs into one flat coordinate vector,
//! samples random points, rejects points too close to a non-smooth spot
//! (active hinge boundaries, mining ties, tiny norms), and compares the
//! hand-written gradient against (f(x + h e_i) - f(x - h e_i)) / 2h in
//! every coordinate.

use ndarray::Array2;

use crate::rng::{derive_seed, DetRng};

use super::align::{
    adaptive_temperature, adaptive_temperature_grad, cross_distill_feature_grad, uapa_align_grad,
    StageTwoWeights, UapaInputs,
};
use super::hybrid::{total_hybrid_grad, total_hybrid_loss};
use super::metric::{
    csc_grad, csc_loss, hard_pairs, infonce_directional, infonce_grad, metric_grad, metric_loss,
    pairwise_sq_dists, triplet_hard_grad, triplet_hard_loss, EmbeddingBatch,
};
use super::supervision::{
    deep_supervision_grad, deep_supervision_loss, self_distillation_grad, self_distillation_loss,
    StageLogits,
};
use super::temperature::{kl_raw, log_softmax_t, shannon_entropy, shannon_entropy_grad};
use super::LossError;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step; must lie in [1e-7, 1e-3].
    pub step: f64,
    /// Maximum allowed relative error per coordinate.
    pub tolerance: f64,
    /// Random points per loss.
    pub points: usize,
    /// Resample attempts per point before giving up.
    pub max_resamples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            points: 100,
            max_resamples: 64,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub points: usize,
    pub resamples: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("no admissible point found for {name} after {attempts} attempts")]
    Exhausted { name: &'static str, attempts: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// |a - b| / max(|a| + |b|, 1e-6): relative where the magnitudes allow,
/// absolute near zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

type ValueFn = Box<dyn Fn(&[f64]) -> Result<f64, LossError>>;
type GradFn = Box<dyn Fn(&[f64]) -> Result<Vec<f64>, LossError>>;
type SampleFn = Box<dyn Fn(&mut DetRng) -> Vec<f64>>;
type AdmitFn = Box<dyn Fn(&[f64], f64) -> bool>;

/// One loss under test: a sampler over its flattened inputs, an
/// admissibility predicate with a safety margin, and the value/gradient
/// pair to compare.
pub struct SuiteCase {
    pub name: &'static str,
    sample: SampleFn,
    admissible: AdmitFn,
    value: ValueFn,
    gradient: GradFn,
}

/// Max relative error between the analytic gradient and central
/// differences at one point.
pub fn check_point(
    value: &dyn Fn(&[f64]) -> Result<f64, LossError>,
    analytic: &[f64],
    x: &[f64],
    step: f64,
) -> Result<f64, GradCheckError> {
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for (i, &g) in analytic.iter().enumerate() {
        probe[i] = x[i] + step;
        let hi = value(&probe)?;
        probe[i] = x[i] - step;
        let lo = value(&probe)?;
        probe[i] = x[i];
        worst = worst.max(relative_error(g, (hi - lo) / (2.0 * step)));
    }
    Ok(worst)
}

/// Run one case at `cfg.points` admissible random points.
pub fn run_case(
    case: &SuiteCase,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError> {
    if !(1e-7..=1e-3).contains(&cfg.step) {
        return Err(GradCheckError::BadStep(cfg.step));
    }
    // Non-smooth spots must be farther away than anything a step-sized
    // probe can reach; 100 steps leaves two orders of safety.
    let margin = 100.0 * cfg.step;
    let case_seed = {
        let mut h = 0xcbf29ce484222325u64;
        for b in case.name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        derive_seed(cfg.seed, h)
    };
    let mut resamples = 0usize;
    let mut worst = 0.0f64;
    for point in 0..cfg.points {
        let mut rng = DetRng::new(derive_seed(case_seed, point as u64));
        let mut x = (case.sample)(&mut rng);
        let mut tries = 0usize;
        while !(case.admissible)(&x, margin) {
            tries += 1;
            resamples += 1;
            if tries > cfg.max_resamples {
                return Err(GradCheckError::Exhausted {
                    name: case.name,
                    attempts: tries,
                });
            }
            x = (case.sample)(&mut rng);
        }
        let g = (case.gradient)(&x)?;
        worst = worst.max(check_point(case.value.as_ref(), &g, &x, cfg.step)?);
    }
    Ok(GradCheckReport {
        name: case.name,
        points: cfg.points,
        resamples,
        max_rel_err: worst,
        pass: worst <= cfg.tolerance,
    })
}

/// Run the whole default suite in order.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>, GradCheckError> {
    default_suite().iter().map(|c| run_case(c, cfg)).collect()
}

fn normals(rng: &mut DetRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.next_normal()).collect()
}

fn unflatten(x: &[f64], b: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((b, c), x.to_vec()).expect("caller sizes the vector")
}

fn split2(x: &[f64], b: usize, c: usize) -> (Array2<f64>, Array2<f64>) {
    let n = b * c;
    (unflatten(&x[..n], b, c), unflatten(&x[n..], b, c))
}

fn flat(ms: &[Array2<f64>]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.iter().copied()).collect()
}

fn norms_ok(m: &Array2<f64>, floor: f64) -> bool {
    (0..m.nrows())
        .map(|i| super::row(m, i))
        .all(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() > floor)
}

/// True when every hinge and every mining decision in a batch-hard triplet
/// sits at least `margin` away from flipping.
fn triplet_smooth(features: &Array2<f64>, labels: &[usize], m: f64, margin: f64) -> bool {
    let Ok(pairs) = hard_pairs(features, labels) else {
        return false;
    };
    let d = pairwise_sq_dists(features);
    let b = features.nrows();
    for (a, pair) in pairs.iter().enumerate() {
        let Some((p, n)) = pair else { continue };
        if (d[[a, *p]] - d[[a, *n]] + m).abs() < margin {
            return false;
        }
        for o in 0..b {
            if o == a || o == *p || o == *n {
                continue;
            }
            if labels[o] == labels[a] && (d[[a, *p]] - d[[a, o]]).abs() < margin {
                return false;
            }
            if labels[o] != labels[a] && (d[[a, o]] - d[[a, *n]]).abs() < margin {
                return false;
            }
        }
    }
    true
}

fn stage_case_shapes() -> (usize, usize, usize) {
    (4, 3, 5) // stages, batch, classes
}

fn build_stages(x: &[f64]) -> StageLogits {
    let (n, b, c) = stage_case_shapes();
    let stages: Vec<Array2<f64>> = (0..n)
        .map(|i| unflatten(&x[i * b * c..(i + 1) * b * c], b, c))
        .collect();
    StageLogits::new(stages, vec![0.1, 0.2, 0.3, 0.4], vec![0.5, 0.3, 0.2], 3.0)
        .expect("fixed valid weights")
}

/// The full loss family, each with its sampler and safety predicate.
pub fn default_suite() -> Vec<SuiteCase> {
    let mut cases = Vec::new();

    let (n, b, c) = stage_case_shapes();
    let stage_dim = n * b * c;
    let stage_labels = [0usize, 2, 4];

    cases.push(SuiteCase {
        name: "softmax_cross_entropy",
        sample: Box::new(|rng| normals(rng, 4 * 6, 1.5)),
        admissible: Box::new(|_, _| true),
        value: Box::new(|x| {
            let s = StageLogits::new(vec![unflatten(x, 4, 6)], vec![1.0], vec![], 1.0)?;
            deep_supervision_loss(&s, &[0, 1, 2, 5])
        }),
        gradient: Box::new(|x| {
            let s = StageLogits::new(vec![unflatten(x, 4, 6)], vec![1.0], vec![], 1.0)?;
            Ok(flat(&deep_supervision_grad(&s, &[0, 1, 2, 5])?))
        }),
    });

    cases.push(SuiteCase {
        name: "deep_supervision",
        sample: Box::new(move |rng| normals(rng, stage_dim, 1.5)),
        admissible: Box::new(|_, _| true),
        value: Box::new(move |x| deep_supervision_loss(&build_stages(x), &stage_labels)),
        gradient: Box::new(move |x| {
            Ok(flat(&deep_supervision_grad(
                &build_stages(x),
                &stage_labels,
            )?))
        }),
    });

    cases.push(SuiteCase {
        name: "self_distillation",
        sample: Box::new(move |rng| normals(rng, stage_dim, 1.5)),
        admissible: Box::new(|_, _| true),
        value: Box::new(|x| self_distillation_loss(&build_stages(x))),
        gradient: Box::new(|x| Ok(flat(&self_distillation_grad(&build_stages(x))?))),
    });

    cases.push(SuiteCase {
        name: "shannon_entropy",
        sample: Box::new(|rng| normals(rng, 5, 1.5)),
        admissible: Box::new(|_, _| true),
        value: Box::new(|x| shannon_entropy(x)),
        gradient: Box::new(|x| shannon_entropy_grad(x)),
    });

    cases.push(SuiteCase {
        name: "adaptive_temperature",
        sample: Box::new(|rng| vec![rng.next_range(0.0, 1.6), rng.next_range(0.0, 1.6)]),
        admissible: Box::new(|_, _| true),
        value: Box::new(|x| adaptive_temperature(x[0], x[1], 1.3)),
        gradient: Box::new(|x| {
            let (gd, gs) = adaptive_temperature_grad(x[0], x[1], 1.3)?;
            Ok(vec![gd, gs])
        }),
    });

    // KL between two softmax parametrizations; reuses the teacher and
    // student formulas with unit weight and temperature.
    cases.push(SuiteCase {
        name: "kl_divergence",
        sample: Box::new(|rng| normals(rng, 10, 1.5)),
        admissible: Box::new(|_, _| true),
        value: Box::new(|x| {
            let lp = log_softmax_t(&x[..5], 1.0);
            let lq = log_softmax_t(&x[5..], 1.0);
            let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let q: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
            Ok(kl_raw(&p, &q))
        }),
        gradient: Box::new(|x| {
            let lp = log_softmax_t(&x[..5], 1.0);
            let lq = log_softmax_t(&x[5..], 1.0);
            let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let q: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
            let kl = kl_raw(&p, &q);
            let mut g = Vec::with_capacity(10);
            for i in 0..5 {
                g.push(p[i] * ((lp[i] - lq[i]) - kl));
            }
            for i in 0..5 {
                g.push(q[i] - p[i]);
            }
            Ok(g)
        }),
    });

    let triplet_labels = [0usize, 0, 1, 1, 2, 2, 3, 3];
    cases.push(SuiteCase {
        name: "triplet_hard",
        sample: Box::new(|rng| normals(rng, 8 * 4, 1.0)),
        admissible: Box::new(move |x, margin| {
            triplet_smooth(&unflatten(x, 8, 4), &triplet_labels, 0.3, margin)
        }),
        value: Box::new(move |x| triplet_hard_loss(&unflatten(x, 8, 4), &triplet_labels, 0.3)),
        gradient: Box::new(move |x| {
            let (_, g) = triplet_hard_grad(&unflatten(x, 8, 4), &triplet_labels, 0.3)?;
            Ok(g.iter().copied().collect())
        }),
    });

    cases.push(SuiteCase {
        name: "infonce",
        sample: Box::new(|rng| normals(rng, 2 * 4 * 6, 1.0)),
        admissible: Box::new(|x, _| {
            let (a, t) = split2(x, 4, 6);
            norms_ok(&a, 0.3) && norms_ok(&t, 0.3)
        }),
        value: Box::new(|x| {
            let (a, t) = split2(x, 4, 6);
            infonce_directional(&a, &t, 0.1)
        }),
        gradient: Box::new(|x| {
            let (a, t) = split2(x, 4, 6);
            let (_, ga, gt) = infonce_grad(&a, &t, 0.1)?;
            Ok(flat(&[ga, gt]))
        }),
    });

    cases.push(SuiteCase {
        name: "csc",
        sample: Box::new(|rng| normals(rng, 2 * 4 * 6, 1.0)),
        admissible: Box::new(|x, _| {
            let (d, s) = split2(x, 4, 6);
            norms_ok(&d, 0.3) && norms_ok(&s, 0.3)
        }),
        value: Box::new(|x| {
            let (d, s) = split2(x, 4, 6);
            csc_loss(&d, &s, 0.1)
        }),
        gradient: Box::new(|x| {
            let (d, s) = split2(x, 4, 6);
            let (_, gd, gs) = csc_grad(&d, &s, 0.1)?;
            Ok(flat(&[gd, gs]))
        }),
    });

    let metric_labels = [0usize, 0, 1, 1, 2, 2];
    cases.push(SuiteCase {
        name: "metric",
        sample: Box::new(|rng| normals(rng, 2 * 6 * 4, 1.0)),
        admissible: Box::new(move |x, margin| {
            let (d, s) = split2(x, 6, 4);
            norms_ok(&d, 0.3)
                && norms_ok(&s, 0.3)
                && triplet_smooth(&d, &metric_labels, 0.3, margin)
                && triplet_smooth(&s, &metric_labels, 0.3, margin)
        }),
        value: Box::new(move |x| {
            let (d, s) = split2(x, 6, 4);
            metric_loss(&EmbeddingBatch::new(d, s, 0.3, 0.1)?, &metric_labels)
        }),
        gradient: Box::new(move |x| {
            let (d, s) = split2(x, 6, 4);
            let (_, gd, gs) = metric_grad(&EmbeddingBatch::new(d, s, 0.3, 0.1)?, &metric_labels)?;
            Ok(flat(&[gd, gs]))
        }),
    });

    for (name, per_sample) in [("uapa_batch", false), ("uapa_per_sample", true)] {
        cases.push(SuiteCase {
            name,
            sample: Box::new(|rng| normals(rng, 2 * 3 * 5, 1.5)),
            admissible: Box::new(|_, _| true),
            value: Box::new(move |x| {
                let (zd, zs) = split2(x, 3, 5);
                let mut inp = UapaInputs::new(zd, zs, 1.0)?;
                inp.per_sample = per_sample;
                Ok(uapa_align_grad(&inp)?.0)
            }),
            gradient: Box::new(move |x| {
                let (zd, zs) = split2(x, 3, 5);
                let mut inp = UapaInputs::new(zd, zs, 1.0)?;
                inp.per_sample = per_sample;
                let (_, gd, gs) = uapa_align_grad(&inp)?;
                Ok(flat(&[gd, gs]))
            }),
        });
    }

    let sample_probs = |rng: &mut DetRng| -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * 3 * 5);
        for _ in 0..6 {
            let z = normals(rng, 5, 1.0);
            let lp = log_softmax_t(&z, 1.0);
            out.extend(lp.iter().map(|l| l.exp()));
        }
        out
    };
    cases.push(SuiteCase {
        name: "cross_distill_logits",
        sample: Box::new(sample_probs),
        admissible: Box::new(|x, margin| x.iter().all(|&v| v > margin.max(1e-3))),
        value: Box::new(|x| {
            // Checked in ambient coordinates, where probe points no longer
            // sum to one, so the raw kernel is the function under test.
            let (pt, ps) = split2(x, 3, 5);
            let total: f64 = (0..3)
                .map(|r| kl_raw(super::row(&pt, r), super::row(&ps, r)))
                .sum();
            Ok(total / 3.0)
        }),
        gradient: Box::new(|x| {
            let (pt, ps) = split2(x, 3, 5);
            let (_, gt, gs) = cross_distill_logits_grad_ambient(&pt, &ps)?;
            Ok(flat(&[gt, gs]))
        }),
    });

    cases.push(SuiteCase {
        name: "cross_distill_feature",
        sample: Box::new(|rng| normals(rng, 2 * 3 * 5, 1.0)),
        admissible: Box::new(|x, _| {
            let (t, s) = split2(x, 3, 5);
            norms_ok(&t, 0.3) && norms_ok(&s, 0.3)
        }),
        value: Box::new(|x| {
            let (t, s) = split2(x, 3, 5);
            Ok(cross_distill_feature_grad(&t, &s)?.0)
        }),
        gradient: Box::new(|x| {
            let (t, s) = split2(x, 3, 5);
            let (_, gt, gs) = cross_distill_feature_grad(&t, &s)?;
            Ok(flat(&[gt, gs]))
        }),
    });

    let hybrid_labels = [0usize, 0, 1];
    let hybrid_feat = 2 * 3 * 4;
    cases.push(SuiteCase {
        name: "total_hybrid",
        sample: Box::new(move |rng| {
            let mut x = normals(rng, stage_dim, 1.5);
            x.extend(normals(rng, hybrid_feat, 1.0));
            x
        }),
        admissible: Box::new(move |x, margin| {
            let (d, s) = split2(&x[stage_dim..], 3, 4);
            norms_ok(&d, 0.3)
                && norms_ok(&s, 0.3)
                && triplet_smooth(&d, &hybrid_labels, 0.3, margin)
                && triplet_smooth(&s, &hybrid_labels, 0.3, margin)
        }),
        value: Box::new(move |x| {
            let stages = build_stages(&x[..stage_dim]);
            let (d, s) = split2(&x[stage_dim..], 3, 4);
            total_hybrid_loss(
                &stages,
                &hybrid_labels,
                &EmbeddingBatch::new(d, s, 0.3, 0.1)?,
            )
        }),
        gradient: Box::new(move |x| {
            let stages = build_stages(&x[..stage_dim]);
            let (d, s) = split2(&x[stage_dim..], 3, 4);
            let (_, gz, gd, gs) = total_hybrid_grad(
                &stages,
                &hybrid_labels,
                &EmbeddingBatch::new(d, s, 0.3, 0.1)?,
            )?;
            let mut out = flat(&gz);
            out.extend(flat(&[gd, gs]));
            Ok(out)
        }),
    });

    let s2_weights = StageTwoWeights {
        align: 0.7,
        logits: 0.2,
        feature: 0.1,
    };
    let s2_logit = 3 * 5;
    cases.push(SuiteCase {
        name: "stage_two",
        sample: Box::new(move |rng| {
            let mut x = normals(rng, 2 * s2_logit, 1.5); // uapa drone + satellite logits
            x.extend(normals(rng, 2 * s2_logit, 1.0)); // teacher + student features
            x.extend(sample_probs(rng)); // teacher + student probability rows
            x
        }),
        admissible: Box::new(move |x, margin| {
            let (ft, fs) = split2(&x[2 * s2_logit..4 * s2_logit], 3, 5);
            norms_ok(&ft, 0.3)
                && norms_ok(&fs, 0.3)
                && x[4 * s2_logit..].iter().all(|&v| v > margin.max(1e-3))
        }),
        value: Box::new(move |x| {
            let (zd, zs) = split2(&x[..2 * s2_logit], 3, 5);
            let (ft, fs) = split2(&x[2 * s2_logit..4 * s2_logit], 3, 5);
            let (pt, ps) = split2(&x[4 * s2_logit..], 3, 5);
            let uapa = UapaInputs::new(zd, zs, 1.0)?;
            // Same composition as stage_two_loss, but on the raw logit
            // kernel so ambient probability probes evaluate.
            let logits: f64 = (0..3)
                .map(|r| kl_raw(super::row(&pt, r), super::row(&ps, r)))
                .sum::<f64>()
                / 3.0;
            Ok(s2_weights.align * uapa_align_grad(&uapa)?.0
                + s2_weights.logits * logits
                + s2_weights.feature * cross_distill_feature_grad(&ft, &fs)?.0)
        }),
        gradient: Box::new(move |x| {
            let (zd, zs) = split2(&x[..2 * s2_logit], 3, 5);
            let (ft, fs) = split2(&x[2 * s2_logit..4 * s2_logit], 3, 5);
            let (pt, ps) = split2(&x[4 * s2_logit..], 3, 5);
            let uapa = UapaInputs::new(zd, zs, 1.0)?;
            let (_, gzd, gzs) = uapa_align_grad(&uapa)?;
            let (_, gft, gfs) = cross_distill_feature_grad(&ft, &fs)?;
            let (_, gpt, gps) = cross_distill_logits_grad_ambient(&pt, &ps)?;
            let scale = |m: Array2<f64>, w: f64| m.mapv_into(|v| v * w);
            Ok(flat(&[
                scale(gzd, s2_weights.align),
                scale(gzs, s2_weights.align),
                scale(gft, s2_weights.feature),
                scale(gfs, s2_weights.feature),
                scale(gpt, s2_weights.logits),
                scale(gps, s2_weights.logits),
            ]))
        }),
    });

    cases
}

/// Ambient-coordinate variant of the logit cross-distillation gradient for
/// probe points that drift off the simplex.
#[allow(clippy::type_complexity)]
fn cross_distill_logits_grad_ambient(
    pt: &Array2<f64>,
    ps: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    let (b, c) = (pt.nrows(), pt.ncols());
    let bf = b as f64;
    let mut gt = Array2::zeros((b, c));
    let mut gs = Array2::zeros((b, c));
    let mut total = 0.0;
    for r in 0..b {
        for col in 0..c {
            let a = pt[[r, col]];
            let q = ps[[r, col]];
            if a <= 0.0 || q <= 0.0 {
                return Err(LossError::NotStrictlyPositive {
                    what: "probability rows",
                    row: r,
                });
            }
            total += a * (a.ln() - q.ln());
            gt[[r, col]] = (a.ln() - q.ln() + 1.0) / bf;
            gs[[r, col]] = -(a / q) / bf;
        }
    }
    Ok((total / bf, gt, gs))
}
