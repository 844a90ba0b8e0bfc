//! Greedy diverse subset selection over scored slots.
//!
//! Selection trades per-slot information against spatial spread on the
//! capture grid. Spatial distance between two poses is
//! `omega_h * height_unit * |dh| + omega_theta * circ(dtheta)` with circular
//! azimuth distance. Two set functions appear here:
//!
//! - [`objective`]: `sum_{v in S} I_v + lambda * sum_{v in S} min_{u in
//!   S\{v}} D(v, u)`, the additive information-plus-diversity value used for
//!   reporting.
//! - [`blended_objective`]: `lambda * sum_{v in S} I_v + (1 - lambda) *
//!   sum_{v in S} min_{u in S\{v}} D(v, u) / Dmax`, the set-function form of
//!   the greedy criterion below, with diversity normalized by the largest
//!   pairwise distance among all candidates. This is the quantity the greedy
//!   ascends and the one the brute-force oracle maximizes; at `lambda = 1` it
//!   is modular, so greedy (then: plain top-k by score) is exactly optimal.
//!
//! The greedy rule seeds with the highest-scoring slot, then repeatedly adds
//! `argmax lambda * I_v + (1 - lambda) * min_{s in S} D(v, s) / Dmax`.
//! Ties break toward the lower slot id, then the lower input index.

use crate::numeric::kahan_sum;
use crate::store::ViewPose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    /// Subset size.
    pub k: usize,
    /// Information weight in [0, 1]; 1 - lambda weighs diversity.
    pub lambda: f64,
    /// Weight per height-level step.
    pub omega_h: f64,
    /// Weight per azimuth degree.
    pub omega_theta: f64,
    /// Physical size of one height-level step.
    pub height_unit: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k: 40,
            lambda: 0.5,
            omega_h: 2.0,
            omega_theta: 1.0,
            height_unit: 1.0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SelectError {
    #[error("k must be in 1..={n}, got {k}")]
    BadK { k: usize, n: usize },
    #[error("lambda must be in [0, 1], got {0}")]
    BadLambda(f64),
    #[error("weights must be non-negative and finite")]
    BadWeights,
    #[error("scores ({scores}) and poses ({poses}) must have equal length")]
    LengthMismatch { scores: usize, poses: usize },
    #[error("azimuth {0} out of range [0, 360)")]
    BadAzimuth(f64),
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("subset index {index} out of range for {n} slots")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("subset contains duplicate index {0}")]
    DuplicateIndex(usize),
    #[error("instance too large for exhaustive search: n = {n}, k = {k}")]
    TooLarge { n: usize, k: usize },
}

impl SelectionConfig {
    // `k` only matters when a subset is being grown, so the objective
    // functions validate weights alone.
    fn check_weights(&self) -> Result<(), SelectError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SelectError::BadLambda(self.lambda));
        }
        let ws = [self.omega_h, self.omega_theta, self.height_unit];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SelectError::BadWeights);
        }
        Ok(())
    }

    fn check_k(&self, n: usize) -> Result<(), SelectError> {
        if self.k == 0 || self.k > n {
            return Err(SelectError::BadK { k: self.k, n });
        }
        Ok(())
    }
}

/// Circular distance between two azimuths in degrees, both in [0, 360).
pub fn circular_distance(a: f64, b: f64) -> Result<f64, SelectError> {
    for &x in &[a, b] {
        if !(0.0..360.0).contains(&x) {
            return Err(SelectError::BadAzimuth(x));
        }
    }
    let d = (a - b).abs();
    Ok(d.min(360.0 - d))
}

/// Grid distance between two poses under the configured weights.
pub fn spatial_distance(p: ViewPose, q: ViewPose, cfg: &SelectionConfig) -> f64 {
    let dh = (p.height_level() as f64 - q.height_level() as f64).abs();
    let dtheta = circular_distance(p.azimuth_deg() as f64, q.azimuth_deg() as f64)
        .expect("stored poses have valid azimuths");
    cfg.omega_h * cfg.height_unit * dh + cfg.omega_theta * dtheta
}

/// Largest pairwise spatial distance among the given poses (0 for fewer than
/// two poses).
pub fn max_pairwise_distance(poses: &[ViewPose], cfg: &SelectionConfig) -> f64 {
    let mut best = 0.0f64;
    for i in 0..poses.len() {
        for j in (i + 1)..poses.len() {
            best = best.max(spatial_distance(poses[i], poses[j], cfg));
        }
    }
    best
}

fn check_instance(
    scores: &[f64],
    poses: &[ViewPose],
    cfg: &SelectionConfig,
) -> Result<(), SelectError> {
    if scores.len() != poses.len() {
        return Err(SelectError::LengthMismatch {
            scores: scores.len(),
            poses: poses.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(SelectError::NonFiniteScore(i));
    }
    cfg.check_weights()
}

fn check_subset(subset: &[usize], n: usize) -> Result<(), SelectError> {
    let mut seen = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(SelectError::IndexOutOfRange { index: i, n });
        }
        if seen[i] {
            return Err(SelectError::DuplicateIndex(i));
        }
        seen[i] = true;
    }
    Ok(())
}

fn min_dist_within(subset: &[usize], v: usize, poses: &[ViewPose], cfg: &SelectionConfig) -> f64 {
    subset
        .iter()
        .filter(|&&u| u != v)
        .map(|&u| spatial_distance(poses[v], poses[u], cfg))
        .fold(f64::INFINITY, f64::min)
}

/// Reporting objective: `sum I_v + lambda * sum_v min_{u != v} D(v, u)`.
/// A singleton subset has no diversity term.
pub fn objective(
    subset: &[usize],
    scores: &[f64],
    poses: &[ViewPose],
    cfg: &SelectionConfig,
) -> Result<f64, SelectError> {
    check_instance(scores, poses, cfg)?;
    check_subset(subset, scores.len())?;
    let info = kahan_sum(&subset.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    if subset.len() < 2 {
        return Ok(info);
    }
    let div = kahan_sum(
        &subset
            .iter()
            .map(|&v| min_dist_within(subset, v, poses, cfg))
            .collect::<Vec<_>>(),
    );
    Ok(info + cfg.lambda * div)
}

/// Selection objective: the set-function form of the greedy criterion,
/// `lambda * sum I_v + (1 - lambda) * sum_v min_{u != v} D(v, u) / Dmax`,
/// where `Dmax` is the largest pairwise distance over *all* candidate poses.
pub fn blended_objective(
    subset: &[usize],
    scores: &[f64],
    poses: &[ViewPose],
    cfg: &SelectionConfig,
) -> Result<f64, SelectError> {
    check_instance(scores, poses, cfg)?;
    check_subset(subset, scores.len())?;
    let info = kahan_sum(&subset.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    let dmax = max_pairwise_distance(poses, cfg);
    if subset.len() < 2 || dmax == 0.0 {
        return Ok(cfg.lambda * info);
    }
    let div = kahan_sum(
        &subset
            .iter()
            .map(|&v| min_dist_within(subset, v, poses, cfg) / dmax)
            .collect::<Vec<_>>(),
    );
    Ok(cfg.lambda * info + (1.0 - cfg.lambda) * div)
}

/// Result of a selection run. `selected` holds indices into the input arrays
/// in insertion order; `gains` holds the greedy criterion value at each step
/// (empty for the exhaustive oracle); `objective` is the
/// [`blended_objective`] of the final subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub gains: Vec<f64>,
    pub objective: f64,
}

impl SelectionResult {
    pub fn slot_ids(&self, poses: &[ViewPose]) -> Vec<u8> {
        self.selected.iter().map(|&i| poses[i].slot()).collect()
    }
}

// Tie order: higher criterion first; on equal criterion the lower slot id,
// then the lower input index.
fn better(cand: (f64, u8, usize), best: (f64, u8, usize)) -> bool {
    cand.0 > best.0 || (cand.0 == best.0 && (cand.1, cand.2) < (best.1, best.2))
}

/// Greedy selection: seed with the best score, then repeatedly add the slot
/// maximizing `lambda * I_v + (1 - lambda) * min_{s in S} D(v, s) / Dmax`.
pub fn greedy_select(
    scores: &[f64],
    poses: &[ViewPose],
    cfg: &SelectionConfig,
) -> Result<SelectionResult, SelectError> {
    check_instance(scores, poses, cfg)?;
    let n = scores.len();
    cfg.check_k(n)?;
    let dmax = max_pairwise_distance(poses, cfg);

    let mut selected = Vec::with_capacity(cfg.k);
    let mut gains = Vec::with_capacity(cfg.k);
    let mut in_set = vec![false; n];
    // Distance from each candidate to the current subset.
    let mut min_dist = vec![f64::INFINITY; n];

    let mut first = (f64::NEG_INFINITY, u8::MAX, usize::MAX);
    for i in 0..n {
        let cand = (scores[i], poses[i].slot(), i);
        if better(cand, first) {
            first = cand;
        }
    }
    selected.push(first.2);
    gains.push(first.0);
    in_set[first.2] = true;
    for i in 0..n {
        min_dist[i] = spatial_distance(poses[i], poses[first.2], cfg);
    }

    while selected.len() < cfg.k {
        let mut best = (f64::NEG_INFINITY, u8::MAX, usize::MAX);
        for i in 0..n {
            if in_set[i] {
                continue;
            }
            let diversity = if dmax == 0.0 { 0.0 } else { min_dist[i] / dmax };
            let crit = cfg.lambda * scores[i] + (1.0 - cfg.lambda) * diversity;
            if better((crit, poses[i].slot(), i), best) {
                best = (crit, poses[i].slot(), i);
            }
        }
        let pick = best.2;
        selected.push(pick);
        gains.push(best.0);
        in_set[pick] = true;
        for i in 0..n {
            min_dist[i] = min_dist[i].min(spatial_distance(poses[i], poses[pick], cfg));
        }
    }

    let objective = blended_objective(&selected, scores, poses, cfg)?;
    Ok(SelectionResult {
        selected,
        gains,
        objective,
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// Exhaustive oracle: maximize [`blended_objective`] over all size-k subsets.
/// Ties resolve to the lexicographically smallest index set. Guarded to
/// n <= 20 and at most 10^6 subsets; `gains` is left empty.
pub fn brute_force_select(
    scores: &[f64],
    poses: &[ViewPose],
    cfg: &SelectionConfig,
) -> Result<SelectionResult, SelectError> {
    check_instance(scores, poses, cfg)?;
    let n = scores.len();
    cfg.check_k(n)?;
    if n > 20 || binomial(n, cfg.k) > 1_000_000 {
        return Err(SelectError::TooLarge { n, k: cfg.k });
    }

    let mut subset: Vec<usize> = (0..cfg.k).collect();
    let mut best_subset = subset.clone();
    let mut best_val = blended_objective(&subset, scores, poses, cfg)?;
    // Lexicographic next-combination; the first maximum encountered wins,
    // which is the lexicographically smallest maximizer.
    loop {
        let mut i = cfg.k;
        loop {
            if i == 0 {
                return Ok(SelectionResult {
                    selected: best_subset,
                    gains: Vec::new(),
                    objective: best_val,
                });
            }
            i -= 1;
            if subset[i] != i + n - cfg.k {
                break;
            }
        }
        subset[i] += 1;
        for j in (i + 1)..cfg.k {
            subset[j] = subset[j - 1] + 1;
        }
        let val = blended_objective(&subset, scores, poses, cfg)?;
        if val > best_val {
            best_val = val;
            best_subset = subset.clone();
        }
    }
}
