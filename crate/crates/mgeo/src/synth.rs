//! Synthetic fixtures and brute-force oracles.
//!
//! Two generator families back the verification suites. Class-conditional
//! Gaussians with shared isotropic covariance feed the information-bound
//! check (`verify_prop1`): their mixture density is known in closed form, so
//! mutual information can be Monte-Carlo estimated from log densities with
//! no density estimation. A simulated 54-slot view grid with designated
//! high-signal slots feeds end-to-end scoring, selection, and retrieval
//! tests. Everything is a pure function of its spec; per-trial seeds derive
//! from the master seed, so every report row reproduces in isolation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::numeric::{kahan_sum, log_sum_exp, mean, sample_std};
use crate::rng::{derive_seed, DetRng};
use crate::score::{fisher_variances, gaussian_mi, half_ln_two_pi_e, ScoreError, DEFAULT_EPS};
use crate::select::{brute_force_select, greedy_select, SelectError, SelectionConfig};
use crate::store::{EmbeddingDatabase, Role, StoreError, ViewDescriptor, ViewPose, SLOT_COUNT};

/// Fewest Monte-Carlo samples accepted by [`mc_mutual_information`].
pub const MIN_MC_SAMPLES: usize = 1000;

/// Specs in the bundled bound-verification suite.
pub const PROP1_SUITE_SIZE: usize = 200;

/// Allowance for the upward bias of the plug-in between-class variance.
/// Sampled class means scatter around the truth by about `D(C-1)sigma^2/N`,
/// which inflates the bound even at zero separation where the Monte-Carlo
/// estimate and its standard error are both exactly zero. 0.01 covers every
/// bundled spec (N >= 800, D <= 4, C <= 5) with a factor-2 cushion.
pub const PROP1_BIAS_TOLERANCE: f64 = 0.01;

/// Greedy guarantee `1 - 1/e` for monotone submodular maximization.
pub fn approx_bound() -> f64 {
    1.0 - (-1.0f64).exp()
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("covariance scale must be positive and finite, got {0}")]
    BadCovScale(f64),
    #[error("mean vector {index} has {got} entries, expected {expected}")]
    MeanDim {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("mean entries must be finite")]
    NonFiniteMean,
    #[error("samples per class must be positive")]
    NoSamples,
    #[error("a posed database holds at most {max} samples per class, got {got}")]
    TooManySamples { max: usize, got: usize },
    #[error("monte carlo estimation needs at least {min} samples, got {got}")]
    TooFewMcSamples { min: usize, got: usize },
    #[error("quadrature oracle only covers 1-D specs, got dimension {0}")]
    NotOneDimensional(usize),
    #[error("verification run needs at least one instance")]
    NoInstances,
    #[error("instance size {0} must lie in 2..=54")]
    BadInstanceSize(usize),
    #[error("k choices must be nonempty and lie in 1..=n")]
    BadKChoices,
    #[error("lambda values must be nonempty and lie in [0, 1]")]
    BadLambdas,
    #[error("need at least 1 landmark")]
    NoLandmarks,
    #[error("noise must be nonnegative and finite, got {0}")]
    BadNoise(f64),
    #[error("slot {0} out of range")]
    SlotOutOfRange(u8),
    #[error("slot {0} listed twice in the informative profile")]
    DuplicateSlot(u8),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Equal-covariance Gaussian mixture: class c emits
/// `mean_c + cov_scale * N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    means: Vec<Vec<f64>>,
    cov_scale: f64,
    samples_per_class: usize,
    seed: u64,
}

impl GaussianSpec {
    pub fn new(
        means: Vec<Vec<f64>>,
        cov_scale: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Result<GaussianSpec, SynthError> {
        if means.len() < 2 {
            return Err(SynthError::TooFewClasses(means.len()));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(SynthError::ZeroDim);
        }
        for (index, m) in means.iter().enumerate() {
            if m.len() != dim {
                return Err(SynthError::MeanDim {
                    index,
                    expected: dim,
                    got: m.len(),
                });
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(SynthError::NonFiniteMean);
            }
        }
        if !(cov_scale.is_finite() && cov_scale > 0.0) {
            return Err(SynthError::BadCovScale(cov_scale));
        }
        if samples_per_class == 0 {
            return Err(SynthError::NoSamples);
        }
        Ok(GaussianSpec {
            means,
            cov_scale,
            samples_per_class,
            seed,
        })
    }

    /// Two classes at `(+separation, 0, ...)` and `(-separation, 0, ...)`.
    pub fn symmetric_pair(
        separation: f64,
        dim: usize,
        cov_scale: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Result<GaussianSpec, SynthError> {
        if dim == 0 {
            return Err(SynthError::ZeroDim);
        }
        let mut plus = vec![0.0; dim];
        let mut minus = vec![0.0; dim];
        plus[0] = separation;
        minus[0] = -separation;
        GaussianSpec::new(vec![plus, minus], cov_scale, samples_per_class, seed)
    }

    /// Spec with random class means `mean_scale * N(0, I) / sqrt(dim)`,
    /// drawn from a stream of their own so expected mean norms equal
    /// `mean_scale` at any dimension and sampling streams stay untouched.
    pub fn isotropic_random(
        classes: usize,
        dim: usize,
        mean_scale: f64,
        cov_scale: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> Result<GaussianSpec, SynthError> {
        if dim == 0 {
            return Err(SynthError::ZeroDim);
        }
        let mut rng = DetRng::new(derive_seed(seed, MEANS_STREAM));
        let root_d = (dim as f64).sqrt();
        let means = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| mean_scale * rng.next_normal() / root_d)
                    .collect()
            })
            .collect();
        GaussianSpec::new(means, cov_scale, samples_per_class, seed)
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn cov_scale(&self) -> f64 {
        self.cov_scale
    }

    pub fn samples_per_class(&self) -> usize {
        self.samples_per_class
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Draw `samples_per_class` points per class, class-major, one derived seed
/// stream per class so class c reproduces independently of the others.
pub fn sample_gaussian(spec: &GaussianSpec) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut samples = Vec::with_capacity(spec.classes() * spec.samples_per_class);
    let mut labels = Vec::with_capacity(samples.capacity());
    for (c, mu) in spec.means.iter().enumerate() {
        let mut rng = DetRng::new(derive_seed(spec.seed, c as u64));
        for _ in 0..spec.samples_per_class {
            let x: Vec<f64> = mu
                .iter()
                .map(|&m| m + spec.cov_scale * rng.next_normal())
                .collect();
            samples.push(x);
            labels.push(c as u32);
        }
    }
    (samples, labels)
}

/// Materialize the mixture as a posed drone database: class = landmark,
/// sample index = view slot. Capped at one view per slot.
pub fn gen_gaussian_db(spec: &GaussianSpec) -> Result<(EmbeddingDatabase, Vec<u32>), SynthError> {
    if spec.samples_per_class > SLOT_COUNT as usize {
        return Err(SynthError::TooManySamples {
            max: SLOT_COUNT as usize,
            got: spec.samples_per_class,
        });
    }
    let (samples, labels) = sample_gaussian(spec);
    let descriptors = samples
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (x, &label))| {
            let slot = (i % spec.samples_per_class) as u8;
            Ok(ViewDescriptor {
                landmark_id: label,
                pose: Some(ViewPose::from_slot(slot)?),
                feature: x.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    let db = EmbeddingDatabase::new(Role::Drone, spec.dim(), descriptors)?;
    Ok((db, labels))
}

// Seed-stream tags. Keeping them distinct decouples the Monte-Carlo draws
// from the training-sample draws and the grid's three ingredient streams.
const MC_STREAM: u64 = 0x6d63;
const MEANS_STREAM: u64 = 0x6d6e;
const GAIN_STREAM: u64 = 1;
const PROTO_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Monte-Carlo mutual information in nats with its standard error.
///
/// Per sample: draw (y, x) from the mixture and evaluate
/// `t = ln p(x|y) - ln p(x) = g_y - logsumexp(g) + ln C` with
/// `g_c = -|x - mu_c|^2 / (2 sigma^2)`; the Gaussian normalizers cancel.
/// `I(x; y) = E[t]`, estimated by the sample mean; the standard error is the
/// sample standard deviation over `sqrt n`. Draws come from a dedicated
/// stream, independent of [`sample_gaussian`] for the same spec.
pub fn mc_mutual_information(
    spec: &GaussianSpec,
    n_samples: usize,
) -> Result<(f64, f64), SynthError> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(SynthError::TooFewMcSamples {
            min: MIN_MC_SAMPLES,
            got: n_samples,
        });
    }
    let c = spec.classes();
    let ln_c = (c as f64).ln();
    let inv_two_var = 1.0 / (2.0 * spec.cov_scale * spec.cov_scale);
    let mut rng = DetRng::new(derive_seed(spec.seed, MC_STREAM));
    let mut t = Vec::with_capacity(n_samples);
    let mut g = vec![0.0; c];
    for _ in 0..n_samples {
        let y = rng.next_index(c);
        let x: Vec<f64> = spec.means[y]
            .iter()
            .map(|&m| m + spec.cov_scale * rng.next_normal())
            .collect();
        for (gc, mu) in g.iter_mut().zip(&spec.means) {
            let sq: f64 = x.iter().zip(mu).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum();
            *gc = -sq * inv_two_var;
        }
        // Shift by g_y before the log-sum so identical classes cancel
        // exactly instead of leaving rounding residue.
        let gy = g[y];
        let shifted: Vec<f64> = g.iter().map(|&gc| gc - gy).collect();
        t.push(ln_c - log_sum_exp(&shifted));
    }
    let estimate = mean(&t);
    let stderr = sample_std(&t) / (n_samples as f64).sqrt();
    Ok((estimate, stderr))
}

/// High-precision 1-D oracle for the same quantity: composite Simpson
/// integration of the mixture entropy minus the (closed-form) conditional
/// entropy. Only defined for 1-D specs; the grid spans every mean plus 12
/// standard deviations, past which the integrand underflows to zero.
pub fn quadrature_mi_1d(spec: &GaussianSpec) -> Result<f64, SynthError> {
    if spec.dim() != 1 {
        return Err(SynthError::NotOneDimensional(spec.dim()));
    }
    let sigma = spec.cov_scale;
    let mus: Vec<f64> = spec.means.iter().map(|m| m[0]).collect();
    let lo = mus.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * sigma;
    let hi = mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sigma;
    let panels = 32_768usize;
    let h = (hi - lo) / panels as f64;
    let norm = 1.0 / (spec.classes() as f64 * sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = |x: f64| -> f64 {
        let p: f64 = mus
            .iter()
            .map(|&mu| {
                let z = (x - mu) / sigma;
                norm * (-0.5 * z * z).exp()
            })
            .sum();
        // p ln p -> 0 in the tails; guard the 0 * -inf corner.
        if p > 1e-300 {
            p * p.ln()
        } else {
            0.0
        }
    };
    let terms: Vec<f64> = (0..=panels)
        .map(|i| {
            let w = if i == 0 || i == panels {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * f(lo + h * i as f64)
        })
        .collect();
    let mixture_entropy = -(h / 3.0) * kahan_sum(&terms);
    let conditional_entropy = half_ln_two_pi_e() + sigma.ln();
    Ok(mixture_entropy - conditional_entropy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Config {
    /// Monte-Carlo samples per spec.
    pub mc_samples: usize,
    /// Variance-ratio regularizer passed through to the bound.
    pub eps: f64,
}

impl Default for Prop1Config {
    fn default() -> Prop1Config {
        Prop1Config {
            mc_samples: 10_000,
            eps: DEFAULT_EPS,
        }
    }
}

/// One spec's bound-versus-estimate comparison. `margin` is
/// `mc_estimate + 3 stderr - fisher_bound`; the bound holds when the margin
/// is at least `-PROP1_BIAS_TOLERANCE`. `ceiling_flag` marks bounds that
/// exceed `ln C`, the information-theoretic ceiling a mixture of C classes
/// can actually attain; those are reported rather than asserted away.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Trial {
    pub spec_index: usize,
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    pub fisher_bound: f64,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub margin: f64,
    pub holds: bool,
    pub ceiling_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub trials: Vec<Prop1Trial>,
}

impl Prop1Report {
    pub fn hold_fraction(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        self.trials.iter().filter(|t| t.holds).count() as f64 / self.trials.len() as f64
    }

    pub fn violations(&self) -> Vec<&Prop1Trial> {
        self.trials.iter().filter(|t| !t.holds).collect()
    }

    pub fn flagged(&self) -> Vec<&Prop1Trial> {
        self.trials.iter().filter(|t| t.ceiling_flag).collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "spec,seed,dim,classes,fisher_bound,mc_estimate,mc_stderr,margin,holds,ceiling_flag\n",
        );
        for t in &self.trials {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                t.spec_index,
                t.seed,
                t.dim,
                t.classes,
                t.fisher_bound,
                t.mc_estimate,
                t.mc_stderr,
                t.margin,
                t.holds,
                t.ceiling_flag
            )
            .expect("write to string");
        }
        out
    }
}

/// Check `gaussian_mi(between / N, within) <= mc + 3 stderr` on every spec:
/// the Gaussian variance-ratio approximation, fed the empirical prior-
/// weighted between-class variance, must not exceed the Monte-Carlo truth.
/// Specs run in parallel; each derives all randomness from its own seed.
pub fn verify_prop1(specs: &[GaussianSpec], cfg: &Prop1Config) -> Result<Prop1Report, SynthError> {
    let trials = specs
        .par_iter()
        .enumerate()
        .map(|(spec_index, spec)| {
            let (samples, labels) = sample_gaussian(spec);
            let (between, within) = fisher_variances(&samples, &labels)?;
            let fisher_bound = gaussian_mi(between / samples.len() as f64, within, cfg.eps)?;
            let (mc_estimate, mc_stderr) = mc_mutual_information(spec, cfg.mc_samples)?;
            let margin = mc_estimate + 3.0 * mc_stderr - fisher_bound;
            Ok(Prop1Trial {
                spec_index,
                seed: spec.seed,
                dim: spec.dim(),
                classes: spec.classes(),
                fisher_bound,
                mc_estimate,
                mc_stderr,
                margin,
                holds: margin >= -PROP1_BIAS_TOLERANCE,
                ceiling_flag: fisher_bound > (spec.classes() as f64).ln(),
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Prop1Report { trials })
}

/// The bundled 200-spec suite. Three strata:
/// moderate-separation multivariate specs (the bread and butter), 1-D pairs
/// at small separation where the bound is tightest (its slack shrinks like
/// the fourth power of the separation), and a handful of extreme-separation
/// pairs where the variance ratio blows past `ln C`. The extremes stay in
/// deliberately: they exercise the ceiling flag and are expected to violate.
pub fn default_prop1_specs(master_seed: u64) -> Vec<GaussianSpec> {
    (0..PROP1_SUITE_SIZE)
        .map(|i| {
            let seed = derive_seed(master_seed, i as u64);
            let mut rng = DetRng::new(derive_seed(seed, 1));
            if i % 33 == 13 {
                // Highest samples per class of the suite: at small
                // separation the empirical between-class variance is the
                // dominant noise source on the bound side.
                let s = rng.next_range(0.2, 0.4);
                GaussianSpec::symmetric_pair(s, 1, 1.0, 4000, seed)
            } else if i % 33 == 29 {
                let s = rng.next_range(6.0, 10.0);
                let d = 1 + (i / 33) % 2;
                GaussianSpec::symmetric_pair(s, d, 1.0, 400, seed)
            } else {
                let d = 2 + i % 3;
                let c = 2 + i % 4;
                let scale = rng.next_range(0.8, 2.0);
                let root_d = (d as f64).sqrt();
                let means = (0..c)
                    .map(|_| (0..d).map(|_| scale * rng.next_normal() / root_d).collect())
                    .collect();
                GaussianSpec::new(means, 1.0, 400, seed)
            }
            .expect("suite specs are valid by construction")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Config {
    pub instances: usize,
    /// Candidate poses per instance, drawn as distinct slots.
    pub n: usize,
    /// Subset sizes, cycled across instances.
    pub k_choices: Vec<usize>,
    /// Information weights, cycled across instances independently of k.
    pub lambdas: Vec<f64>,
    pub master_seed: u64,
}

impl Default for Prop2Config {
    fn default() -> Prop2Config {
        Prop2Config {
            instances: 1000,
            n: 12,
            k_choices: vec![2, 3, 4],
            lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            master_seed: 7,
        }
    }
}

/// One greedy-versus-exhaustive comparison. `meets_bound` allows a 1e-12
/// slack on the `1 - 1/e` threshold for summation-order noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Trial {
    pub instance: usize,
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub greedy_objective: f64,
    pub optimal_objective: f64,
    pub ratio: f64,
    pub meets_bound: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Report {
    pub trials: Vec<Prop2Trial>,
}

impl Prop2Report {
    pub fn meets_fraction(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        self.trials.iter().filter(|t| t.meets_bound).count() as f64 / self.trials.len() as f64
    }

    /// True when every pure-information instance (lambda = 1, a modular
    /// objective, so greedy top-k is exactly optimal) achieved ratio 1.
    pub fn modular_exact(&self) -> bool {
        self.trials
            .iter()
            .filter(|t| t.lambda == 1.0)
            .all(|t| (t.ratio - 1.0).abs() <= 1e-9)
    }

    pub fn violations(&self) -> Vec<&Prop2Trial> {
        self.trials.iter().filter(|t| !t.meets_bound).collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "instance,seed,n,k,lambda,greedy_objective,optimal_objective,ratio,meets_bound\n",
        );
        for t in &self.trials {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                t.instance,
                t.seed,
                t.n,
                t.k,
                t.lambda,
                t.greedy_objective,
                t.optimal_objective,
                t.ratio,
                t.meets_bound
            )
            .expect("write to string");
        }
        out
    }
}

/// Race greedy selection against exhaustive enumeration on random instances:
/// distinct slots, scores uniform in [0, 3], k and lambda cycled through the
/// configured choices. Instances run in parallel, each from a derived seed.
pub fn verify_prop2(cfg: &Prop2Config) -> Result<Prop2Report, SynthError> {
    if cfg.instances == 0 {
        return Err(SynthError::NoInstances);
    }
    if cfg.n < 2 || cfg.n > SLOT_COUNT as usize {
        return Err(SynthError::BadInstanceSize(cfg.n));
    }
    if cfg.k_choices.is_empty() || cfg.k_choices.iter().any(|&k| k == 0 || k > cfg.n) {
        return Err(SynthError::BadKChoices);
    }
    if cfg.lambdas.is_empty() || cfg.lambdas.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(SynthError::BadLambdas);
    }
    let bound = approx_bound();
    let trials = (0..cfg.instances)
        .into_par_iter()
        .map(|instance| {
            let seed = derive_seed(cfg.master_seed, instance as u64);
            let mut rng = DetRng::new(seed);
            let poses = rng
                .sample_indices(SLOT_COUNT as usize, cfg.n)
                .into_iter()
                .map(|s| ViewPose::from_slot(s as u8))
                .collect::<Result<Vec<_>, StoreError>>()?;
            let scores: Vec<f64> = (0..cfg.n).map(|_| rng.next_range(0.0, 3.0)).collect();
            let k = cfg.k_choices[instance % cfg.k_choices.len()];
            let lambda = cfg.lambdas[(instance / cfg.k_choices.len()) % cfg.lambdas.len()];
            let sel_cfg = SelectionConfig {
                k,
                lambda,
                ..SelectionConfig::default()
            };
            let greedy = greedy_select(&scores, &poses, &sel_cfg)?;
            let optimal = brute_force_select(&scores, &poses, &sel_cfg)?;
            let ratio = if optimal.objective <= 0.0 {
                1.0
            } else {
                greedy.objective / optimal.objective
            };
            Ok(Prop2Trial {
                instance,
                seed,
                n: cfg.n,
                k,
                lambda,
                greedy_objective: greedy.objective,
                optimal_objective: optimal.objective,
                ratio,
                meets_bound: ratio >= bound - 1e-12,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Prop2Report { trials })
}

/// Simulated acquisition grid. Every landmark gets one prototype vector of
/// norm `sqrt(dim)`; its 54 drone views are `gain * prototype + noise * z`
/// where informative slots carry gain 1 and the rest a per-slot gain in
/// [0.02, 0.15]. The satellite view is the prototype itself. Weak slots are
/// nearly pure noise at realistic noise levels, so per-view retrieval is
/// fallible while informative slots stay separable: exactly the structure
/// the scoring, selection, and fusion pipeline is supposed to exploit.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    landmarks: u32,
    dim: usize,
    noise: f64,
    informative_slots: Vec<u8>,
    seed: u64,
}

const WEAK_GAIN_LO: f64 = 0.02;
const WEAK_GAIN_HI: f64 = 0.15;

impl GridSpec {
    pub fn new(
        landmarks: u32,
        dim: usize,
        noise: f64,
        informative_slots: Vec<u8>,
        seed: u64,
    ) -> Result<GridSpec, SynthError> {
        if landmarks == 0 {
            return Err(SynthError::NoLandmarks);
        }
        if dim == 0 {
            return Err(SynthError::ZeroDim);
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(SynthError::BadNoise(noise));
        }
        let mut seen = [false; SLOT_COUNT as usize];
        for &slot in &informative_slots {
            if slot >= SLOT_COUNT {
                return Err(SynthError::SlotOutOfRange(slot));
            }
            if seen[slot as usize] {
                return Err(SynthError::DuplicateSlot(slot));
            }
            seen[slot as usize] = true;
        }
        let mut informative_slots = informative_slots;
        informative_slots.sort_unstable();
        Ok(GridSpec {
            landmarks,
            dim,
            noise,
            informative_slots,
            seed,
        })
    }

    /// The profile used by the end-to-end fixtures: slots 0..40 informative,
    /// 32 dimensions, noise 1.2. At that noise a single informative view
    /// matches its landmark only most of the time and weak views rarely do,
    /// while the fused 40-view descriptor matches essentially always.
    pub fn standard(landmarks: u32, seed: u64) -> GridSpec {
        GridSpec::new(landmarks, 32, 1.2, (0..40).collect(), seed)
            .expect("standard profile is valid")
    }

    pub fn landmarks(&self) -> u32 {
        self.landmarks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn informative_slots(&self) -> &[u8] {
        &self.informative_slots
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-slot signal gain. Weak gains are drawn for every slot from the
    /// gain stream before the profile is applied, so a slot's gain depends
    /// only on (seed, slot), never on which other slots are informative.
    pub fn slot_gains(&self) -> Vec<f64> {
        let mut rng = DetRng::new(derive_seed(self.seed, GAIN_STREAM));
        let mut gains: Vec<f64> = (0..SLOT_COUNT)
            .map(|_| rng.next_range(WEAK_GAIN_LO, WEAK_GAIN_HI))
            .collect();
        for &slot in &self.informative_slots {
            gains[slot as usize] = 1.0;
        }
        gains
    }
}

fn prototype(spec: &GridSpec, landmark: u32) -> Vec<f64> {
    let mut rng = DetRng::new(derive_seed(
        derive_seed(spec.seed, PROTO_STREAM),
        landmark as u64,
    ));
    loop {
        let z: Vec<f64> = (0..spec.dim).map(|_| rng.next_normal()).collect();
        let norm = crate::numeric::l2_norm(&z);
        if norm > 1e-12 {
            let scale = (spec.dim as f64).sqrt() / norm;
            return z.iter().map(|&v| v * scale).collect();
        }
    }
}

/// Generate the drone and satellite databases for a grid spec.
pub fn gen_view_grid(
    spec: &GridSpec,
) -> Result<(EmbeddingDatabase, EmbeddingDatabase), SynthError> {
    let gains = spec.slot_gains();
    let noise_master = derive_seed(spec.seed, NOISE_STREAM);
    let mut drone_rows = Vec::with_capacity(spec.landmarks as usize * SLOT_COUNT as usize);
    let mut sat_rows = Vec::with_capacity(spec.landmarks as usize);
    for landmark in 0..spec.landmarks {
        let p = prototype(spec, landmark);
        for slot in 0..SLOT_COUNT {
            let mut rng = DetRng::new(derive_seed(
                derive_seed(noise_master, landmark as u64),
                slot as u64,
            ));
            let gain = gains[slot as usize];
            let feature: Vec<f32> = p
                .iter()
                .map(|&pd| (gain * pd + spec.noise * rng.next_normal()) as f32)
                .collect();
            drone_rows.push(ViewDescriptor {
                landmark_id: landmark,
                pose: Some(ViewPose::from_slot(slot)?),
                feature,
            });
        }
        sat_rows.push(ViewDescriptor {
            landmark_id: landmark,
            pose: None,
            feature: p.iter().map(|&v| v as f32).collect(),
        });
    }
    let drone = EmbeddingDatabase::new(Role::Drone, spec.dim, drone_rows)?;
    let satellite = EmbeddingDatabase::new(Role::Satellite, spec.dim, sat_rows)?;
    Ok((drone, satellite))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::AggregationConfig;
    use crate::retrieval::{evaluate, RetrievalConfig};
    use crate::score::information_scores;

    fn pair(sep: f64, n: usize, seed: u64) -> GaussianSpec {
        GaussianSpec::symmetric_pair(sep, 1, 1.0, n, seed).unwrap()
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        assert!(matches!(
            GaussianSpec::new(vec![vec![0.0]], 1.0, 10, 0),
            Err(SynthError::TooFewClasses(1))
        ));
        assert!(matches!(
            GaussianSpec::new(vec![vec![], vec![]], 1.0, 10, 0),
            Err(SynthError::ZeroDim)
        ));
        assert!(matches!(
            GaussianSpec::new(vec![vec![0.0], vec![0.0, 1.0]], 1.0, 10, 0),
            Err(SynthError::MeanDim {
                index: 1,
                expected: 1,
                got: 2
            })
        ));
        assert!(matches!(
            GaussianSpec::new(vec![vec![f64::NAN], vec![0.0]], 1.0, 10, 0),
            Err(SynthError::NonFiniteMean)
        ));
        assert!(matches!(
            GaussianSpec::new(vec![vec![0.0], vec![1.0]], 0.0, 10, 0),
            Err(SynthError::BadCovScale(_))
        ));
        assert!(matches!(
            GaussianSpec::new(vec![vec![0.0], vec![1.0]], 1.0, 0, 0),
            Err(SynthError::NoSamples)
        ));
    }

    #[test]
    fn symmetric_pair_places_means_on_the_first_axis() {
        let spec = GaussianSpec::symmetric_pair(1.5, 3, 1.0, 4, 0).unwrap();
        assert_eq!(spec.means(), &[vec![1.5, 0.0, 0.0], vec![-1.5, 0.0, 0.0]]);
    }

    #[test]
    fn isotropic_random_means_are_reproducible_and_scaled() {
        let a = GaussianSpec::isotropic_random(4, 9, 2.0, 1.0, 10, 77).unwrap();
        let b = GaussianSpec::isotropic_random(4, 9, 2.0, 1.0, 10, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.means()[0], a.means()[1]);
        for m in a.means() {
            let norm = crate::numeric::l2_norm(m);
            assert!(norm > 0.4 && norm < 5.0, "norm = {norm}");
        }
        let flat = GaussianSpec::isotropic_random(3, 4, 0.0, 1.0, 10, 77).unwrap();
        assert!(flat.means().iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn sampling_is_deterministic_and_class_major() {
        let spec = pair(1.0, 3, 42);
        let (a, la) = sample_gaussian(&spec);
        let (b, lb) = sample_gaussian(&spec);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn empirical_means_converge_to_spec_means() {
        let spec = pair(1.0, 10_000, 7);
        let (samples, labels) = sample_gaussian(&spec);
        for (class, want) in [(0u32, 1.0f64), (1, -1.0)] {
            let xs: Vec<f64> = samples
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == class)
                .map(|(x, _)| x[0])
                .collect();
            assert!((mean(&xs) - want).abs() < 0.05);
        }
    }

    #[test]
    fn gaussian_db_round_trips_identically_for_one_seed() {
        let spec = GaussianSpec::new(
            vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![-1.0, -1.0]],
            0.5,
            54,
            99,
        )
        .unwrap();
        let (db_a, labels) = gen_gaussian_db(&spec).unwrap();
        let (db_b, _) = gen_gaussian_db(&spec).unwrap();
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        db_a.write_to(&mut bytes_a).unwrap();
        db_b.write_to(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(db_a.len(), 162);
        assert_eq!(labels.len(), 162);
        let slots: Vec<u8> = db_a.descriptors()[..54]
            .iter()
            .map(|d| d.pose.unwrap().slot())
            .collect();
        assert_eq!(slots, (0..54).collect::<Vec<u8>>());
    }

    #[test]
    fn gaussian_db_rejects_more_samples_than_slots() {
        let spec = pair(1.0, 55, 0);
        assert!(matches!(
            gen_gaussian_db(&spec),
            Err(SynthError::TooManySamples { max: 54, got: 55 })
        ));
    }

    #[test]
    fn zero_separation_yields_near_zero_fisher_and_mi() {
        let spec = GaussianSpec::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]],
            1.0,
            2000,
            5,
        )
        .unwrap();
        let (samples, labels) = sample_gaussian(&spec);
        let (between, within) = fisher_variances(&samples, &labels).unwrap();
        let normalized = between / samples.len() as f64;
        assert!(normalized < 0.02, "normalized between = {normalized}");
        let mi = gaussian_mi(normalized, within, DEFAULT_EPS).unwrap();
        assert!(mi < 0.02, "mi = {mi}");
    }

    #[test]
    fn unit_pair_fisher_ratio_is_near_one() {
        let spec = pair(1.0, 20_000, 11);
        let (samples, labels) = sample_gaussian(&spec);
        let (between, within) = fisher_variances(&samples, &labels).unwrap();
        let ratio = between / samples.len() as f64 / within;
        assert!((0.95..1.05).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn mc_rejects_small_sample_counts() {
        let spec = pair(1.0, 10, 0);
        assert!(matches!(
            mc_mutual_information(&spec, 999),
            Err(SynthError::TooFewMcSamples {
                min: 1000,
                got: 999
            })
        ));
    }

    #[test]
    fn mc_zero_separation_is_exactly_zero() {
        let spec = GaussianSpec::new(vec![vec![2.0, -1.0], vec![2.0, -1.0]], 1.0, 10, 3).unwrap();
        let (estimate, stderr) = mc_mutual_information(&spec, 2000).unwrap();
        assert_eq!(estimate, 0.0);
        assert_eq!(stderr, 0.0);
    }

    #[test]
    fn mc_wide_separation_reaches_label_entropy() {
        let spec = pair(50.0, 10, 13);
        let (estimate, stderr) = mc_mutual_information(&spec, 2000).unwrap();
        assert!((estimate - 2.0f64.ln()).abs() < 1e-12);
        assert!(stderr < 1e-12);
    }

    #[test]
    fn mc_matches_quadrature_at_unit_separation() {
        let spec = pair(1.0, 10, 17);
        let quad = quadrature_mi_1d(&spec).unwrap();
        assert!(quad > 0.0 && quad < 2.0f64.ln());
        let (estimate, stderr) = mc_mutual_information(&spec, 20_000).unwrap();
        assert!(
            (estimate - quad).abs() <= 3.0 * stderr + 1e-3,
            "mc = {estimate}, quad = {quad}, stderr = {stderr}"
        );
    }

    #[test]
    fn quadrature_rejects_multidimensional_specs() {
        let spec = GaussianSpec::symmetric_pair(1.0, 2, 1.0, 10, 0).unwrap();
        assert!(matches!(
            quadrature_mi_1d(&spec),
            Err(SynthError::NotOneDimensional(2))
        ));
    }

    #[test]
    fn stderr_shrinks_like_inverse_sqrt_of_samples() {
        let spec = pair(1.0, 10, 23);
        let (_, se_n) = mc_mutual_information(&spec, 5000).unwrap();
        let (_, se_2n) = mc_mutual_information(&spec, 10_000).unwrap();
        let ratio = se_2n / se_n;
        let ideal = 0.5f64.sqrt();
        assert!(
            (ratio - ideal).abs() <= 0.2 * ideal,
            "stderr ratio = {ratio}"
        );
    }

    #[test]
    fn bound_holds_at_moderate_separation() {
        let spec = GaussianSpec::new(
            vec![vec![1.0, 0.5], vec![-0.8, 0.3], vec![0.1, -1.2]],
            1.0,
            400,
            31,
        )
        .unwrap();
        let report = verify_prop1(std::slice::from_ref(&spec), &Prop1Config::default()).unwrap();
        let t = &report.trials[0];
        assert!(t.holds);
        assert!(t.margin > 0.0, "margin = {}", t.margin);
        assert!(!t.ceiling_flag);
    }

    #[test]
    fn zero_separation_is_covered_by_the_bias_allowance() {
        let spec = GaussianSpec::new(vec![vec![0.0], vec![0.0]], 1.0, 400, 37).unwrap();
        let report = verify_prop1(std::slice::from_ref(&spec), &Prop1Config::default()).unwrap();
        let t = &report.trials[0];
        // Plug-in Fisher noise pushes the bound slightly above the exact
        // zero on the Monte-Carlo side; the allowance absorbs it.
        assert!(t.fisher_bound > 0.0);
        assert!(t.margin < 0.0 && t.margin >= -PROP1_BIAS_TOLERANCE);
        assert!(t.holds);
    }

    #[test]
    fn extreme_separation_trips_the_ceiling_flag() {
        let spec = pair(8.0, 400, 41);
        let report = verify_prop1(std::slice::from_ref(&spec), &Prop1Config::default()).unwrap();
        let t = &report.trials[0];
        assert!(t.ceiling_flag);
        assert!(!t.holds);
        assert!(t.fisher_bound > 2.0f64.ln());
        assert!(t.mc_estimate <= 2.0f64.ln() + 3.0 * t.mc_stderr);
    }

    #[test]
    fn default_suite_holds_on_at_least_95_percent() {
        let specs = default_prop1_specs(7);
        assert_eq!(specs.len(), PROP1_SUITE_SIZE);
        let report = verify_prop1(&specs, &Prop1Config::default()).unwrap();
        let fraction = report.hold_fraction();
        assert!(fraction >= 0.95, "hold fraction = {fraction}");
        // Every violation should be an intentional ceiling case.
        for v in report.violations() {
            assert!(
                v.ceiling_flag,
                "unflagged violation at spec {}",
                v.spec_index
            );
        }
        let csv = report.csv();
        assert_eq!(csv.lines().count(), PROP1_SUITE_SIZE + 1);
        assert!(csv.starts_with("spec,seed,dim,classes,"));
    }

    #[test]
    fn modular_instances_are_exactly_optimal() {
        let cfg = Prop2Config {
            instances: 60,
            n: 10,
            lambdas: vec![1.0],
            master_seed: 11,
            ..Prop2Config::default()
        };
        let report = verify_prop2(&cfg).unwrap();
        assert_eq!(report.trials.len(), 60);
        assert!(report.modular_exact());
        for t in &report.trials {
            assert!((t.ratio - 1.0).abs() <= 1e-12, "ratio = {}", t.ratio);
        }
    }

    #[test]
    fn random_instances_meet_the_approximation_bound() {
        let cfg = Prop2Config {
            instances: 200,
            ..Prop2Config::default()
        };
        let report = verify_prop2(&cfg).unwrap();
        let fraction = report.meets_fraction();
        assert!(fraction >= 0.99, "meets fraction = {fraction}");
        for t in &report.trials {
            assert!(
                t.ratio <= 1.0 + 1e-12,
                "greedy beat the oracle: {}",
                t.ratio
            );
        }
        let csv = report.csv();
        assert_eq!(csv.lines().count(), 201);
        assert!(csv.starts_with("instance,seed,n,k,lambda,"));
    }

    #[test]
    fn selecting_everything_is_exactly_optimal() {
        let cfg = Prop2Config {
            instances: 10,
            n: 8,
            k_choices: vec![8],
            lambdas: vec![0.5],
            master_seed: 19,
            ..Prop2Config::default()
        };
        let report = verify_prop2(&cfg).unwrap();
        for t in &report.trials {
            assert!((t.ratio - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn prop2_config_validation() {
        let base = Prop2Config::default();
        let bad = Prop2Config {
            instances: 0,
            ..base.clone()
        };
        assert!(matches!(verify_prop2(&bad), Err(SynthError::NoInstances)));
        let bad = Prop2Config {
            n: 55,
            ..base.clone()
        };
        assert!(matches!(
            verify_prop2(&bad),
            Err(SynthError::BadInstanceSize(55))
        ));
        let bad = Prop2Config {
            k_choices: vec![13],
            ..base.clone()
        };
        assert!(matches!(verify_prop2(&bad), Err(SynthError::BadKChoices)));
        let bad = Prop2Config {
            lambdas: vec![1.5],
            ..base
        };
        assert!(matches!(verify_prop2(&bad), Err(SynthError::BadLambdas)));
    }

    #[test]
    fn reports_are_reproducible() {
        let cfg = Prop2Config {
            instances: 30,
            ..Prop2Config::default()
        };
        assert_eq!(
            verify_prop2(&cfg).unwrap().csv(),
            verify_prop2(&cfg).unwrap().csv()
        );
        let specs = default_prop1_specs(3)[..5].to_vec();
        let p1 = Prop1Config::default();
        assert_eq!(
            verify_prop1(&specs, &p1).unwrap().csv(),
            verify_prop1(&specs, &p1).unwrap().csv()
        );
    }

    #[test]
    fn grid_spec_validation_rejects_bad_profiles() {
        assert!(matches!(
            GridSpec::new(0, 8, 1.0, vec![], 0),
            Err(SynthError::NoLandmarks)
        ));
        assert!(matches!(
            GridSpec::new(4, 0, 1.0, vec![], 0),
            Err(SynthError::ZeroDim)
        ));
        assert!(matches!(
            GridSpec::new(4, 8, f64::NAN, vec![], 0),
            Err(SynthError::BadNoise(_))
        ));
        assert!(matches!(
            GridSpec::new(4, 8, 1.0, vec![54], 0),
            Err(SynthError::SlotOutOfRange(54))
        ));
        assert!(matches!(
            GridSpec::new(4, 8, 1.0, vec![3, 3], 0),
            Err(SynthError::DuplicateSlot(3))
        ));
    }

    #[test]
    fn grid_generation_is_reproducible() {
        let spec = GridSpec::new(12, 16, 1.0, (0..10).collect(), 21).unwrap();
        let (d1, s1) = gen_view_grid(&spec).unwrap();
        let (d2, s2) = gen_view_grid(&spec).unwrap();
        let enc = |db: &EmbeddingDatabase| {
            let mut v = Vec::new();
            db.write_to(&mut v).unwrap();
            v
        };
        assert_eq!(enc(&d1), enc(&d2));
        assert_eq!(enc(&s1), enc(&s2));
        assert_eq!(d1.len(), 12 * 54);
        assert_eq!(s1.len(), 12);
        assert!(s1.descriptors().iter().all(|d| d.pose.is_none()));
    }

    #[test]
    fn weak_gains_do_not_depend_on_the_profile() {
        let a = GridSpec::new(4, 8, 1.0, vec![0, 1, 2], 33).unwrap();
        let b = GridSpec::new(4, 8, 1.0, vec![50, 51], 33).unwrap();
        let ga = a.slot_gains();
        let gb = b.slot_gains();
        for slot in 3..50 {
            assert_eq!(ga[slot], gb[slot]);
        }
        assert_eq!(ga[0], 1.0);
        assert_eq!(gb[50], 1.0);
        assert!(ga[10] >= WEAK_GAIN_LO && ga[10] <= WEAK_GAIN_HI);
    }

    #[test]
    fn noiseless_grid_retrieves_perfectly() {
        let spec = GridSpec::new(40, 8, 0.0, (0..6).collect(), 3).unwrap();
        let (drone, sat) = gen_view_grid(&spec).unwrap();
        let report = evaluate(
            &drone,
            &sat,
            None,
            &AggregationConfig::default(),
            &RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(report.recall_at[&1], 1.0);
        assert_eq!(report.ap_mean, 1.0);
    }

    #[test]
    fn boosted_slots_rank_top_of_information_scores() {
        let spec = GridSpec::new(120, 16, 1.0, vec![0, 17, 35], 9).unwrap();
        let (drone, _) = gen_view_grid(&spec).unwrap();
        let scores = information_scores(&drone, DEFAULT_EPS).unwrap();
        let mut order: Vec<(f64, u8)> = scores.stats.iter().map(|s| (s.score, s.slot)).collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let top: std::collections::BTreeSet<u8> = order[..3].iter().map(|&(_, s)| s).collect();
        assert_eq!(top, [0u8, 17, 35].into_iter().collect());
    }

    #[test]
    fn fusion_restores_recall_that_weak_views_lose() {
        let spec = GridSpec::standard(60, 7);
        let (drone, sat) = gen_view_grid(&spec).unwrap();
        let agg = AggregationConfig::default();
        let raw = evaluate(&drone, &sat, None, &agg, &RetrievalConfig::default()).unwrap();
        assert!(raw.recall_at[&1] < 1.0, "raw R@1 = {}", raw.recall_at[&1]);

        let scored = information_scores(&drone, DEFAULT_EPS).unwrap();
        let scores = scored.scores();
        let poses = scored.poses();
        let sel = greedy_select(&scores, &poses, &SelectionConfig::default()).unwrap();
        let selection: Vec<(ViewPose, f64)> = sel
            .selected
            .iter()
            .map(|&i| (poses[i], scores[i]))
            .collect();
        let fused_cfg = RetrievalConfig {
            use_msrm: true,
            ..RetrievalConfig::default()
        };
        let fused = evaluate(&drone, &sat, Some(&selection), &agg, &fused_cfg).unwrap();
        assert_eq!(
            fused.recall_at[&1], 1.0,
            "fused R@1 = {}",
            fused.recall_at[&1]
        );
        assert_eq!(
            raw.distance_ops / fused.distance_ops,
            54,
            "op ratio should be the slot count"
        );
    }
}
