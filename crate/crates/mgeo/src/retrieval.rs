//! Brute-force cross-view matching and evaluation.
//!
//! Queries are matched against a gallery by cosine or negated Euclidean
//! similarity; the gallery is sorted by descending similarity with ties
//! broken by ascending id (then input position, for galleries holding
//! several views of one landmark). Reports carry Recall@K, mean average
//! precision, and an exact count of similarity evaluations, which is what
//! substantiates the matching-cost reduction from fusing each landmark's
//! views into a single descriptor.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::aggregate::{aggregate_database, AggregateError, AggregationConfig};
use crate::numeric::kahan_sum;
use crate::store::{landmark_mismatch, EmbeddingDatabase, Role, ViewPose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    DroneToSatellite,
    SatelliteToDrone,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::DroneToSatellite => write!(f, "drone->satellite"),
            Direction::SatelliteToDrone => write!(f, "satellite->drone"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    Cosine,
    NegativeEuclidean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    pub direction: Direction,
    pub similarity: SimilarityKind,
    pub k_values: Vec<usize>,
    pub use_msrm: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            direction: Direction::DroneToSatellite,
            similarity: SimilarityKind::Cosine,
            k_values: vec![1, 5, 10],
            use_msrm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub ap_mean: f64,
    pub distance_ops: u64,
    pub query_count: usize,
    pub gallery_count: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query set is empty")]
    EmptyQueries,
    #[error("recall cutoff {k} outside 1..={gallery}")]
    BadK { k: usize, gallery: usize },
    #[error("no k values configured")]
    NoKValues,
    #[error("no relevant items in the ranking")]
    NoRelevant,
    #[error("databases disagree on landmarks: {0:?}")]
    LandmarkMismatch(Vec<u32>),
    #[error("expected a {expected} database, got {actual}")]
    WrongRole { expected: Role, actual: Role },
    #[error("fused evaluation requires a slot selection")]
    MissingSelection,
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

/// Similarity between two vectors: cosine in [-1, 1] or the negated
/// Euclidean distance. Accumulates in f64.
pub fn similarity(q: &[f32], g: &[f32], kind: SimilarityKind) -> Result<f64, RetrievalError> {
    if q.len() != g.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: q.len(),
            actual: g.len(),
        });
    }
    match kind {
        SimilarityKind::Cosine => {
            let mut dot = 0.0f64;
            let mut nq = 0.0f64;
            let mut ng = 0.0f64;
            for (a, b) in q.iter().zip(g) {
                let (a, b) = (*a as f64, *b as f64);
                dot += a * b;
                nq += a * a;
                ng += b * b;
            }
            if nq == 0.0 || ng == 0.0 {
                return Err(RetrievalError::ZeroVector);
            }
            Ok(dot / (nq.sqrt() * ng.sqrt()))
        }
        SimilarityKind::NegativeEuclidean => {
            let mut sq = 0.0f64;
            for (a, b) in q.iter().zip(g) {
                let d = *a as f64 - *b as f64;
                sq += d * d;
            }
            Ok(-sq.sqrt())
        }
    }
}

/// Order ids by descending score; ties by ascending id, then input position.
/// The order depends only on the relative order of the scores, so any
/// strictly increasing transform of them leaves the ranking unchanged.
pub fn rank_by_scores(ids: &[u32], scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(ids[a].cmp(&ids[b]))
            .then(a.cmp(&b))
    });
    order.into_iter().map(|i| ids[i]).collect()
}

/// Rank a gallery of (id, feature) pairs against one query.
pub fn rank_gallery(
    query: &[f32],
    gallery: &[(u32, &[f32])],
    kind: SimilarityKind,
) -> Result<Vec<u32>, RetrievalError> {
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    let mut ids = Vec::with_capacity(gallery.len());
    let mut scores = Vec::with_capacity(gallery.len());
    for (id, feat) in gallery {
        ids.push(*id);
        scores.push(similarity(query, feat, kind)?);
    }
    Ok(rank_by_scores(&ids, &scores))
}

/// 1 if `true_id` appears among the first K ranked entries, else 0.
pub fn recall_at_k(ranked: &[u32], true_id: u32, k: usize) -> Result<u32, RetrievalError> {
    if k == 0 || k > ranked.len() {
        return Err(RetrievalError::BadK {
            k,
            gallery: ranked.len(),
        });
    }
    Ok(u32::from(ranked[..k].contains(&true_id)))
}

/// Mean of precision-at-rank over the relevant entries:
/// `(1/R) * sum over relevant positions of (relevant seen so far) / rank`.
/// Every gallery entry whose id is in `relevant` counts as one item.
pub fn average_precision(ranked: &[u32], relevant: &[u32]) -> Result<f64, RetrievalError> {
    let mut seen = 0usize;
    let mut terms = Vec::new();
    for (pos, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            seen += 1;
            terms.push(seen as f64 / (pos + 1) as f64);
        }
    }
    if seen == 0 {
        return Err(RetrievalError::NoRelevant);
    }
    Ok(kahan_sum(&terms) / seen as f64)
}

fn db_items(db: &EmbeddingDatabase) -> Vec<(u32, &[f32])> {
    db.descriptors()
        .iter()
        .map(|d| (d.landmark_id, d.feature.as_slice()))
        .collect()
}

/// Full evaluation run. With `use_msrm` set, the drone side is first fused
/// into one descriptor per landmark using `selection` and `agg_cfg`; the
/// satellite side always has one descriptor per landmark. Distance ops count
/// every similarity evaluation performed.
pub fn evaluate(
    drone_db: &EmbeddingDatabase,
    satellite_db: &EmbeddingDatabase,
    selection: Option<&[(ViewPose, f64)]>,
    agg_cfg: &AggregationConfig,
    cfg: &RetrievalConfig,
) -> Result<RetrievalReport, RetrievalError> {
    if drone_db.role() != Role::Drone {
        return Err(RetrievalError::WrongRole {
            expected: Role::Drone,
            actual: drone_db.role(),
        });
    }
    if satellite_db.role() != Role::Satellite {
        return Err(RetrievalError::WrongRole {
            expected: Role::Satellite,
            actual: satellite_db.role(),
        });
    }
    if drone_db.dim() != satellite_db.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: drone_db.dim(),
            actual: satellite_db.dim(),
        });
    }
    let mismatch = landmark_mismatch(drone_db, satellite_db);
    if !mismatch.is_empty() {
        return Err(RetrievalError::LandmarkMismatch(mismatch));
    }
    if cfg.k_values.is_empty() {
        return Err(RetrievalError::NoKValues);
    }

    let fused;
    let drone_side: Vec<(u32, &[f32])> = if cfg.use_msrm {
        let sel = selection.ok_or(RetrievalError::MissingSelection)?;
        fused = aggregate_database(drone_db, sel, agg_cfg)?;
        db_items(&fused)
    } else {
        db_items(drone_db)
    };
    let satellite_side = db_items(satellite_db);

    let (queries, gallery) = match cfg.direction {
        Direction::DroneToSatellite => (&drone_side, &satellite_side),
        Direction::SatelliteToDrone => (&satellite_side, &drone_side),
    };
    if queries.is_empty() {
        return Err(RetrievalError::EmptyQueries);
    }
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    for &k in &cfg.k_values {
        if k == 0 || k > gallery.len() {
            return Err(RetrievalError::BadK {
                k,
                gallery: gallery.len(),
            });
        }
    }

    // Parallel over queries; per-query results land in input order, and the
    // reductions below are sequential, so the report does not depend on the
    // thread count.
    let per_query: Vec<(Vec<u32>, f64)> = queries
        .par_iter()
        .map(|(true_id, feat)| {
            let ranked = rank_gallery(feat, gallery, cfg.similarity)?;
            let hits = cfg
                .k_values
                .iter()
                .map(|&k| recall_at_k(&ranked, *true_id, k))
                .collect::<Result<Vec<u32>, _>>()?;
            let ap = average_precision(&ranked, &[*true_id])?;
            Ok((hits, ap))
        })
        .collect::<Result<_, RetrievalError>>()?;

    let nq = queries.len() as f64;
    let mut recall_at = BTreeMap::new();
    for (ki, &k) in cfg.k_values.iter().enumerate() {
        let hits: Vec<f64> = per_query.iter().map(|(h, _)| h[ki] as f64).collect();
        recall_at.insert(k, kahan_sum(&hits) / nq);
    }
    let aps: Vec<f64> = per_query.iter().map(|(_, ap)| *ap).collect();

    Ok(RetrievalReport {
        recall_at,
        ap_mean: kahan_sum(&aps) / nq,
        distance_ops: queries.len() as u64 * gallery.len() as u64,
        query_count: queries.len(),
        gallery_count: gallery.len(),
    })
}
