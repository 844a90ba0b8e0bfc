//! Acceptance gate: one test per release criterion, each printing a single
//! PASS line with its measured numbers. Tests share a lock so the wall-clock
//! budgets are measured without interference from sibling tests.

use std::path::PathBuf;
use std::process::Command;
use std::sync::{Mutex, PoisonError};
use std::time::{Duration, Instant};

use mgeo::aggregate::{uniform_selection, AggregationConfig};
use mgeo::losses::{run_suite, GradCheckConfig};
use mgeo::retrieval::{
    average_precision, evaluate, rank_gallery, recall_at_k, Direction, RetrievalConfig,
    SimilarityKind,
};
use mgeo::rng::{derive_seed, DetRng};
use mgeo::score::information_scores;
use mgeo::select::{greedy_select, SelectionConfig};
use mgeo::store::{load_database, save_database};
use mgeo::synth::{
    default_prop1_specs, gen_gaussian_db, gen_view_grid, verify_prop1, verify_prop2, GaussianSpec,
    GridSpec, Prop1Config, Prop2Config,
};
use mgeo::{EmbeddingDatabase, Role, ViewDescriptor, ViewPose};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(PoisonError::into_inner)
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("tmp dir");
    dir.join(name)
}

const EPS: f64 = 1e-6;
const TAU: f64 = 1.0;

fn eval_config(k_values: Vec<usize>, use_msrm: bool) -> RetrievalConfig {
    RetrievalConfig {
        direction: Direction::DroneToSatellite,
        similarity: SimilarityKind::Cosine,
        k_values,
        use_msrm,
    }
}

/// Score the grid and pick the top-k blended subset, as the pipeline does.
fn pipeline_selection(drone: &EmbeddingDatabase, k: usize) -> Vec<(ViewPose, f64)> {
    let set = information_scores(drone, EPS).expect("scoring succeeds");
    let scores = set.scores();
    let poses = set.poses();
    let cfg = SelectionConfig {
        k,
        ..SelectionConfig::default()
    };
    let sel = greedy_select(&scores, &poses, &cfg).expect("selection succeeds");
    sel.selected
        .iter()
        .map(|&i| (poses[i], scores[i]))
        .collect()
}

fn recall1_fused(
    drone: &EmbeddingDatabase,
    sat: &EmbeddingDatabase,
    selection: &[(ViewPose, f64)],
) -> f64 {
    let report = evaluate(
        drone,
        sat,
        Some(selection),
        &AggregationConfig { tau: TAU },
        &eval_config(vec![1], true),
    )
    .expect("fused evaluation succeeds");
    report.recall_at[&1]
}

/// Criterion 1: fusing 54 views into one descriptor per landmark cuts
/// distance ops by exactly the view count on a 200-landmark grid, fast.
#[test]
fn criterion_1_complexity_reduction() {
    let _guard = serial();
    let start = Instant::now();

    let spec = GridSpec::standard(200, 7);
    let (drone, sat) = gen_view_grid(&spec).expect("grid generates");
    let raw = evaluate(
        &drone,
        &sat,
        None,
        &AggregationConfig { tau: TAU },
        &eval_config(vec![1], false),
    )
    .expect("raw evaluation succeeds");
    let selection = pipeline_selection(&drone, 40);
    let fused = evaluate(
        &drone,
        &sat,
        Some(&selection),
        &AggregationConfig { tau: TAU },
        &eval_config(vec![1], true),
    )
    .expect("fused evaluation succeeds");

    let elapsed = start.elapsed();
    assert_eq!(raw.distance_ops, 54 * fused.distance_ops);
    let ratio = raw.distance_ops as f64 / fused.distance_ops as f64;
    assert_eq!(ratio, 54.0);
    assert!(ratio >= 50.0);
    assert!(
        elapsed < Duration::from_secs(5),
        "took {elapsed:?}, budget 5s"
    );
    println!(
        "criterion 1 (complexity reduction): PASS ratio {ratio} ({} vs {} ops) in {elapsed:?}",
        raw.distance_ops, fused.distance_ops
    );
}

/// Criterion 2: greedy subset selection stays within the 1-1/e factor of
/// exhaustive search on 1000 random instances, and is exactly optimal
/// whenever the diversity term is switched off.
#[test]
fn criterion_2_greedy_approximation() {
    let _guard = serial();
    let start = Instant::now();

    let cfg = Prop2Config::default();
    assert_eq!(cfg.instances, 1000);
    assert_eq!(cfg.n, 12);
    assert_eq!(cfg.k_choices, vec![2, 3, 4]);
    let report = verify_prop2(&cfg).expect("verification runs");

    let elapsed = start.elapsed();
    let meets = report.meets_fraction();
    assert!(meets >= 0.99, "bound met on only {meets}");
    assert!(
        report.modular_exact(),
        "a lambda=1 instance was not optimal"
    );
    assert!(
        elapsed < Duration::from_secs(30),
        "took {elapsed:?}, budget 30s"
    );
    println!(
        "criterion 2 (greedy approximation): PASS {}/{} above 1-1/e, modular exact, in {elapsed:?}",
        report.trials.len() - report.violations().len(),
        report.trials.len()
    );
}

/// Criterion 3: the variance-ratio information score upper-stays below
/// Monte-Carlo mutual information (plus three standard errors) on 200
/// low-dimensional Gaussian specs.
#[test]
fn criterion_3_information_bound() {
    let _guard = serial();
    let start = Instant::now();

    let specs = default_prop1_specs(7);
    assert_eq!(specs.len(), 200);
    assert!(specs.iter().all(|s| s.dim() <= 4), "spec dims exceed 4");
    let report = verify_prop1(&specs, &Prop1Config::default()).expect("verification runs");

    let elapsed = start.elapsed();
    let fraction = report.hold_fraction();
    assert!(fraction >= 0.95, "bound held on only {fraction}");
    assert!(
        elapsed < Duration::from_secs(60),
        "took {elapsed:?}, budget 60s"
    );
    println!(
        "criterion 3 (information bound): PASS held on {}/{} specs in {elapsed:?}",
        report.trials.len() - report.violations().len(),
        report.trials.len()
    );
}

/// Criterion 4: every training loss passes central finite-difference
/// gradient checks at 1e-4 relative error over at least 100 points.
#[test]
fn criterion_4_gradient_suite() {
    let _guard = serial();
    let start = Instant::now();

    let cfg = GradCheckConfig::default();
    assert_eq!(cfg.tolerance, 1e-4);
    assert!(cfg.points >= 100);
    let reports = run_suite(&cfg).expect("suite runs");

    let elapsed = start.elapsed();
    assert!(!reports.is_empty());
    for r in &reports {
        assert!(
            r.points >= 100,
            "{} checked only {} points",
            r.name,
            r.points
        );
        assert!(
            r.pass && r.max_rel_err <= 1e-4,
            "{} max rel err {}",
            r.name,
            r.max_rel_err
        );
    }
    assert!(
        elapsed < Duration::from_secs(60),
        "took {elapsed:?}, budget 60s"
    );
    println!(
        "criterion 4 (gradient suite): PASS {} losses, all within 1e-4, in {elapsed:?}",
        reports.len()
    );
}

fn naive_similarity(q: &[f32], g: &[f32], kind: SimilarityKind) -> f64 {
    match kind {
        SimilarityKind::Cosine => {
            let mut dot = 0.0f64;
            let mut nq = 0.0f64;
            let mut ng = 0.0f64;
            for i in 0..q.len() {
                dot += q[i] as f64 * g[i] as f64;
                nq += q[i] as f64 * q[i] as f64;
                ng += g[i] as f64 * g[i] as f64;
            }
            dot / (nq.sqrt() * ng.sqrt())
        }
        SimilarityKind::NegativeEuclidean => {
            let mut sq = 0.0f64;
            for i in 0..q.len() {
                let d = q[i] as f64 - g[i] as f64;
                sq += d * d;
            }
            -sq.sqrt()
        }
    }
}

/// Quadratic reference ranking: repeatedly scan the remaining gallery for
/// the best entry (highest similarity, ties to the smaller id).
fn naive_rank(query: &[f32], gallery: &[(u32, Vec<f32>)], kind: SimilarityKind) -> Vec<u32> {
    let sims: Vec<f64> = gallery
        .iter()
        .map(|(_, g)| naive_similarity(query, g, kind))
        .collect();
    let mut remaining: Vec<usize> = (0..gallery.len()).collect();
    let mut ranked = Vec::with_capacity(gallery.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let (ci, cb) = (remaining[i], remaining[best]);
            if sims[ci] > sims[cb] || (sims[ci] == sims[cb] && gallery[ci].0 < gallery[cb].0) {
                best = i;
            }
        }
        ranked.push(gallery[remaining[best]].0);
        remaining.remove(best);
    }
    ranked
}

fn naive_recall_at_k(ranked: &[u32], true_id: u32, k: usize) -> u32 {
    let mut hit = 0;
    for id in &ranked[..k] {
        if *id == true_id {
            hit = 1;
        }
    }
    hit
}

fn naive_average_precision(ranked: &[u32], relevant: &[u32]) -> f64 {
    let mut seen = 0usize;
    let mut total = 0.0f64;
    for (pos, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            seen += 1;
            total += seen as f64 / (pos + 1) as f64;
        }
    }
    total / seen as f64
}

/// Criterion 5: ranking metrics agree exactly with a naive quadratic
/// reference on 100 random instances, and view fusion lifts Recall@1 to 1.0
/// on a grid where single noisy views fall short.
#[test]
fn criterion_5_retrieval_oracle_equivalence() {
    let _guard = serial();

    for instance in 0..100u64 {
        let mut rng = DetRng::new(derive_seed(0x05ac1e, instance));
        let n = 2 + rng.next_index(49);
        let dim = 1 + rng.next_index(8);
        let kind = if instance % 2 == 0 {
            SimilarityKind::Cosine
        } else {
            SimilarityKind::NegativeEuclidean
        };
        let gallery: Vec<(u32, Vec<f32>)> = (0..n)
            .map(|id| {
                let mut feat: Vec<f32> =
                    (0..dim).map(|_| rng.next_range(-2.0, 2.0) as f32).collect();
                if feat.iter().all(|&v| v == 0.0) {
                    feat[0] = 1.0;
                }
                (id as u32, feat)
            })
            .collect();
        let gallery_refs: Vec<(u32, &[f32])> =
            gallery.iter().map(|(id, f)| (*id, f.as_slice())).collect();
        let ks = {
            let mut ks = vec![1, n.div_ceil(2), n];
            ks.dedup();
            ks
        };

        for _ in 0..(1 + rng.next_index(8)) {
            let mut query: Vec<f32> = (0..dim).map(|_| rng.next_range(-2.0, 2.0) as f32).collect();
            if query.iter().all(|&v| v == 0.0) {
                query[0] = 1.0;
            }
            let true_id = rng.next_index(n) as u32;

            let ranked = rank_gallery(&query, &gallery_refs, kind).expect("ranking succeeds");
            let reference = naive_rank(&query, &gallery, kind);
            assert_eq!(ranked, reference, "instance {instance}: rankings differ");

            for &k in &ks {
                let lib = recall_at_k(&ranked, true_id, k).expect("valid cutoff");
                assert_eq!(
                    lib,
                    naive_recall_at_k(&reference, true_id, k),
                    "instance {instance}: recall@{k} differs"
                );
            }

            let mut relevant = vec![true_id];
            if instance % 3 == 0 && n > 1 {
                relevant.push((true_id + 1) % n as u32);
            }
            let lib_ap = average_precision(&ranked, &relevant).expect("ap defined");
            let naive_ap = naive_average_precision(&reference, &relevant);
            assert_eq!(
                lib_ap.to_bits(),
                naive_ap.to_bits(),
                "instance {instance}: ap {lib_ap} vs {naive_ap}"
            );
        }
    }

    let spec = GridSpec::standard(200, 7);
    let (drone, sat) = gen_view_grid(&spec).expect("grid generates");
    let raw = evaluate(
        &drone,
        &sat,
        None,
        &AggregationConfig { tau: TAU },
        &eval_config(vec![1], false),
    )
    .expect("raw evaluation succeeds");
    let raw_r1 = raw.recall_at[&1];
    let fused_r1 = recall1_fused(&drone, &sat, &pipeline_selection(&drone, 40));
    assert!(raw_r1 < 1.0, "single noisy views already at {raw_r1}");
    assert_eq!(fused_r1, 1.0, "fusion left recall at {fused_r1}");
    println!(
        "criterion 5 (retrieval oracle equivalence): PASS 100 instances exact; fusion lifts R@1 {raw_r1} to {fused_r1}"
    );
}

/// Criterion 6: with 40 informative slots of 54, accuracy at k=40 is at
/// least accuracy at k=10 and at least the all-slots uniform baseline.
#[test]
fn criterion_6_peak_k_shape() {
    let _guard = serial();

    let spec = GridSpec::new(200, 32, 3.5, (0..40).collect(), 7).expect("valid grid spec");
    let (drone, sat) = gen_view_grid(&spec).expect("grid generates");

    let mut curve = Vec::new();
    for k in [10usize, 20, 30, 40, 50] {
        let r1 = recall1_fused(&drone, &sat, &pipeline_selection(&drone, k));
        curve.push((k, r1));
    }
    let uniform_r1 = recall1_fused(&drone, &sat, &uniform_selection());

    let at = |k: usize| curve.iter().find(|(ck, _)| *ck == k).expect("k present").1;
    assert!(
        at(40) >= at(10),
        "accuracy fell from k=10 {} to k=40 {}",
        at(10),
        at(40)
    );
    assert!(
        at(40) >= uniform_r1,
        "k=40 {} below uniform {}",
        at(40),
        uniform_r1
    );
    println!("criterion 6 (peak-k shape): PASS curve {curve:?}, uniform {uniform_r1}");
}

fn random_database(seed: u64) -> EmbeddingDatabase {
    let mut rng = DetRng::new(seed);
    if rng.next_f64() < 0.5 {
        let spec = GaussianSpec::isotropic_random(
            2 + rng.next_index(3),
            1 + rng.next_index(6),
            rng.next_range(0.5, 2.5),
            rng.next_range(0.3, 2.0),
            1 + rng.next_index(8),
            rng.next_u64(),
        )
        .expect("valid mixture spec");
        let (db, _) = gen_gaussian_db(&spec).expect("sampling succeeds");
        return db;
    }
    let role = if rng.next_f64() < 0.5 {
        Role::Drone
    } else {
        Role::Satellite
    };
    let dim = 1 + rng.next_index(12);
    let mut descriptors = Vec::new();
    let feature = |rng: &mut DetRng| -> Vec<f32> {
        (0..dim)
            .map(|_| {
                let roll = rng.next_f64();
                if roll < 0.05 {
                    -0.0
                } else if roll < 0.10 {
                    f32::MIN_POSITIVE / 2.0
                } else {
                    rng.next_range(-8.0, 8.0) as f32
                }
            })
            .collect()
    };
    for landmark_id in 0..(rng.next_index(6) as u32) {
        let posed = rng.next_index(5);
        for slot in rng.sample_indices(54, posed) {
            descriptors.push(ViewDescriptor {
                landmark_id,
                pose: Some(ViewPose::from_slot(slot as u8).expect("slot in range")),
                feature: feature(&mut rng),
            });
        }
        if rng.next_f64() < 0.4 {
            descriptors.push(ViewDescriptor {
                landmark_id,
                pose: None,
                feature: feature(&mut rng),
            });
        }
    }
    EmbeddingDatabase::new(role, dim, descriptors).expect("valid database")
}

/// Criterion 7: 1000 random databases survive a save, load, save cycle with
/// byte-identical files.
#[test]
fn criterion_7_round_trip() {
    let _guard = serial();

    let first = tmp("trip-a.mgeo");
    let second = tmp("trip-b.mgeo");
    for i in 0..1000u64 {
        let db = random_database(derive_seed(0x707a11, i));
        save_database(&db, &first).expect("first save succeeds");
        let loaded = load_database(&first).expect("load succeeds");
        save_database(&loaded, &second).expect("second save succeeds");
        let a = std::fs::read(&first).expect("read first");
        let b = std::fs::read(&second).expect("read second");
        assert_eq!(a, b, "database {i} did not round-trip byte-identically");
    }
    println!("criterion 7 (round trip): PASS 1000 databases byte-identical");
}

/// Criterion 8: every subcommand's stdout is byte-identical across repeated
/// runs and across thread counts.
#[test]
fn criterion_8_subcommand_determinism() {
    let _guard = serial();

    let drone = tmp("det-drone.mgeo");
    let sat = tmp("det-sat.mgeo");
    let gauss = tmp("det-gauss.mgeo");
    let fused = tmp("det-fused.mgeo");
    let ingested = tmp("det-ingested.mgeo");
    let csv = tmp("det-rows.csv");
    std::fs::write(
        &csv,
        "landmark_id,height_level,azimuth_deg,f0,f1\n1,0,0,0.5,1.5\n1,0,20,-0.5,2.5\n2,255,0,3.5,-1.0\n",
    )
    .expect("write csv");
    let p = |p: &PathBuf| p.to_str().expect("utf-8 path").to_owned();

    let commands: Vec<Vec<String>> = vec![
        vec![
            "gen".into(),
            "grid".into(),
            "--landmarks".into(),
            "20".into(),
            "--seed".into(),
            "11".into(),
            "--drone-out".into(),
            p(&drone),
            "--sat-out".into(),
            p(&sat),
        ],
        vec![
            "gen".into(),
            "gaussian".into(),
            "--classes".into(),
            "3".into(),
            "--dim".into(),
            "2".into(),
            "--samples-per-class".into(),
            "8".into(),
            "--seed".into(),
            "5".into(),
            "--output".into(),
            p(&gauss),
        ],
        vec![
            "ingest".into(),
            "--role".into(),
            "satellite".into(),
            "--input".into(),
            p(&csv),
            "--output".into(),
            p(&ingested),
        ],
        vec!["manifest".into(), "--input".into(), p(&drone)],
        vec!["score".into(), "--input".into(), p(&drone)],
        vec![
            "select".into(),
            "--input".into(),
            p(&drone),
            "--k".into(),
            "10".into(),
        ],
        vec![
            "aggregate".into(),
            "--input".into(),
            p(&drone),
            "--output".into(),
            p(&fused),
        ],
        vec![
            "retrieve".into(),
            "--drone".into(),
            p(&drone),
            "--sat".into(),
            p(&sat),
            "--top".into(),
            "2".into(),
            "--msrm".into(),
        ],
        vec![
            "evaluate".into(),
            "--drone".into(),
            p(&drone),
            "--sat".into(),
            p(&sat),
            "--msrm".into(),
        ],
        vec!["gradcheck".into(), "--points".into(), "20".into()],
        vec![
            "verify".into(),
            "prop1".into(),
            "--mc-samples".into(),
            "1000".into(),
        ],
        vec![
            "verify".into(),
            "prop2".into(),
            "--instances".into(),
            "40".into(),
        ],
        vec![
            "bench".into(),
            "--drone".into(),
            p(&drone),
            "--sat".into(),
            p(&sat),
        ],
    ];

    for args in &commands {
        let mut outputs = Vec::new();
        for threads in ["1", "3"] {
            let out = Command::new(env!("CARGO_BIN_EXE_mgeo"))
                .args(args)
                .args(["--threads", threads])
                .env_remove("MGEO_THREADS")
                .output()
                .expect("binary runs");
            assert_eq!(
                out.status.code(),
                Some(0),
                "{args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            outputs.push(out.stdout);
        }
        assert_eq!(
            outputs[0], outputs[1],
            "stdout differs across thread counts for {args:?}"
        );
    }
    println!(
        "criterion 8 (subcommand determinism): PASS {} subcommands byte-identical across runs and thread counts",
        commands.len()
    );
}
