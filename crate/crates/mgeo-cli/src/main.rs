//! Command-line front end wiring every pipeline stage behind one binary.
//!
//! Output contract: stdout carries exactly one CSV document per invocation,
//! header row first; notes, summaries, and timings go to stderr. Identical
//! argv plus identical input files produce byte-identical stdout at any
//! `--threads` setting. Exit codes: 0 success, 1 data error, 2 usage error
//! (argument parsing), 3 verification failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mgeo::aggregate::{aggregate_database, uniform_selection, AggregationConfig};
use mgeo::losses::{run_suite, GradCheckConfig};
use mgeo::retrieval::{evaluate, rank_gallery, Direction, RetrievalConfig, SimilarityKind};
use mgeo::score::information_scores;
use mgeo::select::{greedy_select, SelectionConfig};
use mgeo::store::{load_database, save_database, SENTINEL_HEIGHT, SLOT_COUNT};
use mgeo::synth::{
    default_prop1_specs, gen_gaussian_db, gen_view_grid, verify_prop1, verify_prop2, GaussianSpec,
    GridSpec, Prop1Config, Prop2Config,
};
use mgeo::{EmbeddingDatabase, Role, ViewDescriptor, ViewPose};

/// Floor on `verify prop1`'s hold fraction before exit code 3.
const MIN_HOLD_FRACTION: f64 = 0.95;
/// Floor on `verify prop2`'s bound-meeting fraction before exit code 3.
const MIN_MEETS_FRACTION: f64 = 0.99;

static QUIET: AtomicBool = AtomicBool::new(false);

/// stderr chatter (summaries, tables, timings); silenced by --quiet.
/// Errors print unconditionally.
macro_rules! note {
    ($($arg:tt)*) => {
        if !QUIET.load(Ordering::Relaxed) {
            eprintln!($($arg)*);
        }
    };
}

#[derive(Parser)]
#[command(
    name = "mgeo",
    version,
    about = "Cross-view landmark embedding toolkit: scoring, selection, fusion, retrieval, and verification oracles",
    propagate_version = true
)]
struct Cli {
    /// Worker threads (default: MGEO_THREADS env var, then all cores).
    /// Results never depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress stderr summaries and timings; stdout CSV and errors remain.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a binary database from a CSV of descriptor rows.
    ///
    /// Expected header: landmark_id,height_level,azimuth_deg,<feature...>
    /// with one column per feature dimension. Empty pose fields (or the
    /// 255,0 sentinel pair) mean a poseless record.
    Ingest {
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Input CSV path.
        #[arg(long)]
        input: PathBuf,
        /// Output database path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the landmark/pose manifest of a database.
    Manifest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Score every view slot of a posed drone database.
    Score {
        #[arg(long)]
        input: PathBuf,
        /// Variance-ratio regularizer.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Greedily select an informative, spatially diverse slot subset.
    Select {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Fuse each landmark's selected views into one descriptor database.
    Aggregate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Weight all 54 slots equally instead of scoring and selecting.
        #[arg(long)]
        uniform: bool,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Rank the gallery for every query and print the top matches.
    Retrieve {
        #[arg(long)]
        drone: PathBuf,
        #[arg(long)]
        sat: PathBuf,
        #[arg(long, value_enum, default_value_t = DirectionArg::DroneToSatellite)]
        direction: DirectionArg,
        #[arg(long, value_enum, default_value_t = SimilarityArg::Cosine)]
        similarity: SimilarityArg,
        /// Matches to print per query.
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[command(flatten)]
        fusion: FusionArgs,
    },
    /// Compute Recall@K and mean AP over all queries.
    Evaluate {
        #[arg(long)]
        drone: PathBuf,
        #[arg(long)]
        sat: PathBuf,
        #[arg(long, value_enum, default_value_t = DirectionArg::DroneToSatellite)]
        direction: DirectionArg,
        #[arg(long, value_enum, default_value_t = SimilarityArg::Cosine)]
        similarity: SimilarityArg,
        /// Recall cutoffs, comma separated.
        #[arg(long = "k-at", default_value = "1,5,10", value_delimiter = ',')]
        k_at: Vec<usize>,
        #[command(flatten)]
        fusion: FusionArgs,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Max relative error accepted per point.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Random points per loss.
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Resample attempts per point before giving up.
        #[arg(long = "max-resamples", default_value_t = 64)]
        max_resamples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run a verification oracle and report per-trial results.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Generate synthetic fixtures.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Time retrieval with and without fusion and report the distance-op ratio.
    Bench {
        #[arg(long)]
        drone: PathBuf,
        #[arg(long)]
        sat: PathBuf,
        #[arg(long = "k-at", default_value = "1,5,10", value_delimiter = ',')]
        k_at: Vec<usize>,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Information bound vs Monte-Carlo truth on Gaussian mixtures.
    Prop1 {
        #[arg(long = "master-seed", default_value_t = 7)]
        master_seed: u64,
        /// Monte-Carlo samples per spec.
        #[arg(long = "mc-samples", default_value_t = 10_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
    },
    /// Greedy selection vs exhaustive enumeration on random instances.
    Prop2 {
        #[arg(long = "master-seed", default_value_t = 7)]
        master_seed: u64,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        /// Candidate slots per instance.
        #[arg(long, default_value_t = 12)]
        n: usize,
        /// Subset sizes, comma separated, cycled across instances.
        #[arg(long = "k-choices", default_value = "2,3,4", value_delimiter = ',')]
        k_choices: Vec<usize>,
        /// Information weights, comma separated, cycled across instances.
        #[arg(long, default_value = "0,0.25,0.5,0.75,1", value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum GenCommand {
    /// Simulated 54-slot view grid with designated informative slots.
    Grid {
        #[arg(long, default_value_t = 200)]
        landmarks: u32,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 1.2)]
        noise: f64,
        /// Informative slots as ranges and singles, e.g. "0-9,17,35".
        #[arg(long, default_value = "0-39", value_parser = parse_slot_set)]
        informative: SlotSet,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long = "drone-out")]
        drone_out: PathBuf,
        #[arg(long = "sat-out")]
        sat_out: PathBuf,
    },
    /// Class-conditional Gaussian database with random isotropic means.
    Gaussian {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        /// Expected norm of each class mean.
        #[arg(long = "mean-scale", default_value_t = 1.5)]
        mean_scale: f64,
        /// Shared covariance scale (standard deviation).
        #[arg(long = "cov-scale", default_value_t = 1.0)]
        cov_scale: f64,
        /// Samples per class; each sample occupies one view slot.
        #[arg(long = "samples-per-class", default_value_t = 54)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Drone,
    Satellite,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Drone => Role::Drone,
            RoleArg::Satellite => Role::Satellite,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    DroneToSatellite,
    SatelliteToDrone,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Direction {
        match d {
            DirectionArg::DroneToSatellite => Direction::DroneToSatellite,
            DirectionArg::SatelliteToDrone => Direction::SatelliteToDrone,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SimilarityArg {
    Cosine,
    NegEuclidean,
}

impl From<SimilarityArg> for SimilarityKind {
    fn from(s: SimilarityArg) -> SimilarityKind {
        match s {
            SimilarityArg::Cosine => SimilarityKind::Cosine,
            SimilarityArg::NegEuclidean => SimilarityKind::NegativeEuclidean,
        }
    }
}

#[derive(Args, Clone)]
struct SelectionArgs {
    /// Views to select per landmark.
    #[arg(long, default_value_t = 40)]
    k: usize,
    /// Information weight in [0, 1]; the remainder weighs spatial diversity.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Distance weight per height-level step.
    #[arg(long = "omega-h", default_value_t = 2.0)]
    omega_h: f64,
    /// Distance weight per azimuth degree.
    #[arg(long = "omega-theta", default_value_t = 1.0)]
    omega_theta: f64,
    /// Physical size of one height-level step.
    #[arg(long = "height-unit", default_value_t = 1.0)]
    height_unit: f64,
}

impl SelectionArgs {
    fn to_config(&self) -> SelectionConfig {
        SelectionConfig {
            k: self.k,
            lambda: self.lambda,
            omega_h: self.omega_h,
            omega_theta: self.omega_theta,
            height_unit: self.height_unit,
        }
    }
}

#[derive(Args, Clone)]
struct FusionArgs {
    /// Fuse each landmark's drone views into one descriptor before matching.
    #[arg(long)]
    msrm: bool,
    /// Fuse with all 54 slots weighted equally (no scoring or selection).
    #[arg(long, conflicts_with = "msrm")]
    uniform: bool,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Softmax sharpness for fusion weights.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Variance-ratio regularizer for slot scoring.
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
}

impl FusionArgs {
    fn mode(&self) -> &'static str {
        if self.uniform {
            "uniform"
        } else if self.msrm {
            "scored"
        } else {
            "none"
        }
    }

    /// The (pose, score) pairs to fuse with, or None when fusion is off.
    fn selection_pairs(&self, drone: &EmbeddingDatabase) -> Result<Option<Vec<(ViewPose, f64)>>> {
        if self.uniform {
            return Ok(Some(uniform_selection()));
        }
        if !self.msrm {
            return Ok(None);
        }
        Ok(Some(scored_selection(
            drone,
            &self.selection.to_config(),
            self.eps,
        )?))
    }
}

/// Data errors exit 1, verification failures exit 3; usage errors exit 2
/// from argument parsing before run() is reached.
enum Failure {
    Data(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Failure {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    QUIET.store(cli.quiet, Ordering::Relaxed);
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => std::env::var("MGEO_THREADS")
            .ok()
            .map(|s| {
                s.parse::<usize>()
                    .with_context(|| format!("MGEO_THREADS must be an integer, got {s:?}"))
            })
            .transpose()?,
    };
    if let Some(n) = n.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("failed to build the thread pool")?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Ingest {
            role,
            input,
            output,
        } => cmd_ingest(role.into(), &input, &output)?,
        Command::Manifest { input } => {
            let db = load_db(&input)?;
            print!("{}", db.manifest_csv());
        }
        Command::Score { input, eps } => cmd_score(&input, eps)?,
        Command::Select {
            input,
            selection,
            eps,
        } => cmd_select(&input, &selection.to_config(), eps)?,
        Command::Aggregate {
            input,
            output,
            uniform,
            selection,
            tau,
            eps,
        } => cmd_aggregate(&input, &output, uniform, &selection.to_config(), tau, eps)?,
        Command::Retrieve {
            drone,
            sat,
            direction,
            similarity,
            top,
            fusion,
        } => cmd_retrieve(
            &drone,
            &sat,
            direction.into(),
            similarity.into(),
            top,
            &fusion,
        )?,
        Command::Evaluate {
            drone,
            sat,
            direction,
            similarity,
            k_at,
            fusion,
        } => cmd_evaluate(
            &drone,
            &sat,
            direction.into(),
            similarity.into(),
            k_at,
            &fusion,
        )?,
        Command::Gradcheck {
            step,
            tolerance,
            points,
            max_resamples,
            seed,
        } => cmd_gradcheck(step, tolerance, points, max_resamples, seed)?,
        Command::Verify(v) => cmd_verify(v)?,
        Command::Gen(g) => cmd_gen(g)?,
        Command::Bench {
            drone,
            sat,
            k_at,
            selection,
            tau,
            eps,
        } => cmd_bench(&drone, &sat, k_at, &selection.to_config(), tau, eps)?,
    }
    Ok(())
}

fn load_db(path: &Path) -> Result<EmbeddingDatabase> {
    load_database(path).with_context(|| {
        format!(
            "failed to load {} (create one with `mgeo gen grid` or `mgeo ingest`)",
            path.display()
        )
    })
}

fn save_db(db: &EmbeddingDatabase, path: &Path) -> Result<()> {
    save_database(db, path).with_context(|| format!("failed to write {}", path.display()))
}

/// One parsed `--informative` argument; a newtype so clap treats the whole
/// comma-separated expression as a single value.
#[derive(Clone)]
struct SlotSet(Vec<u8>);

/// Slot sets like "0-9,17,35": comma-separated singles and inclusive ranges.
fn parse_slot_set(s: &str) -> Result<SlotSet, String> {
    let mut slots = Vec::new();
    for token in s.split(',') {
        let token = token.trim();
        if let Some((lo, hi)) = token.split_once('-') {
            let lo: u8 = lo
                .trim()
                .parse()
                .map_err(|e| format!("bad slot {lo:?}: {e}"))?;
            let hi: u8 = hi
                .trim()
                .parse()
                .map_err(|e| format!("bad slot {hi:?}: {e}"))?;
            if lo > hi {
                return Err(format!("range {token:?} runs backwards"));
            }
            slots.extend(lo..=hi);
        } else {
            slots.push(
                token
                    .parse()
                    .map_err(|e| format!("bad slot {token:?}: {e}"))?,
            );
        }
    }
    if slots.iter().any(|&s| s >= SLOT_COUNT) {
        return Err(format!("slots must be below {SLOT_COUNT}"));
    }
    Ok(SlotSet(slots))
}

/// Score the drone database and pick the greedy subset, with the k-vs-slots
/// conflict rejected up front.
fn scored_selection(
    drone: &EmbeddingDatabase,
    cfg: &SelectionConfig,
    eps: f64,
) -> Result<Vec<(ViewPose, f64)>> {
    let set = information_scores(drone, eps).context("slot scoring failed")?;
    let scores = set.scores();
    let poses = set.poses();
    if cfg.k > poses.len() {
        bail!(
            "--k {} exceeds the {} scorable slots; pass --k {} or fewer",
            cfg.k,
            poses.len(),
            poses.len()
        );
    }
    let sel = greedy_select(&scores, &poses, cfg).context("greedy selection failed")?;
    Ok(sel
        .selected
        .iter()
        .map(|&i| (poses[i], scores[i]))
        .collect())
}

fn cmd_ingest(role: Role, input: &Path, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("failed to read {}", input.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| anyhow!("{} is empty; expected a CSV header", input.display()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4
        || cols[0].trim() != "landmark_id"
        || cols[1].trim() != "height_level"
        || cols[2].trim() != "azimuth_deg"
    {
        bail!(
            "unexpected header {header:?}; expected landmark_id,height_level,azimuth_deg \
             followed by one column per feature dimension"
        );
    }
    let dim = cols.len() - 3;
    let mut descriptors = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let row = lineno + 1;
        if fields.len() != cols.len() {
            bail!(
                "line {row}: expected {} fields, got {}",
                cols.len(),
                fields.len()
            );
        }
        let landmark_id: u32 = fields[0]
            .trim()
            .parse()
            .with_context(|| format!("line {row}: bad landmark_id {:?}", fields[0]))?;
        let h = fields[1].trim();
        let a = fields[2].trim();
        let pose = if h.is_empty() && a.is_empty() {
            None
        } else {
            let height: u8 = h
                .parse()
                .with_context(|| format!("line {row}: bad height_level {h:?}"))?;
            let azimuth: u16 = a
                .parse()
                .with_context(|| format!("line {row}: bad azimuth_deg {a:?}"))?;
            if height == SENTINEL_HEIGHT && azimuth == 0 {
                None
            } else {
                Some(ViewPose::new(height, azimuth).with_context(|| {
                    format!("line {row}: pose ({h}, {a}) is not on the capture grid")
                })?)
            }
        };
        let feature = fields[3..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f32>()
                    .with_context(|| format!("line {row}: bad feature value {f:?}"))
            })
            .collect::<Result<Vec<f32>>>()?;
        descriptors.push(ViewDescriptor {
            landmark_id,
            pose,
            feature,
        });
    }
    let db = EmbeddingDatabase::new(role, dim, descriptors)
        .context("rows do not form a valid database")?;
    save_db(&db, output)?;
    let mut out = String::from("role,dim,descriptors,landmarks\n");
    writeln!(
        out,
        "{},{},{},{}",
        match db.role() {
            Role::Drone => "drone",
            Role::Satellite => "satellite",
        },
        db.dim(),
        db.len(),
        db.landmark_ids().len()
    )
    .expect("write to string");
    print!("{out}");
    note!("wrote {}", output.display());
    Ok(())
}

fn cmd_score(input: &Path, eps: f64) -> Result<()> {
    let db = load_db(input)?;
    let set = information_scores(&db, eps).context("slot scoring failed")?;
    let mut out = String::from(
        "slot,height_level,azimuth_deg,h_marginal,h_range,sigma2_between,sigma2_within,mi_approx,score\n",
    );
    for s in &set.stats {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.slot,
            s.pose.height_level(),
            s.pose.azimuth_deg(),
            s.h_marginal,
            s.h_range,
            s.sigma2_between,
            s.sigma2_within,
            s.mi_approx,
            s.score
        )
        .expect("write to string");
    }
    print!("{out}");
    for sk in &set.skipped {
        note!(
            "note: slot {} skipped ({} landmark{})",
            sk.slot,
            sk.landmarks,
            if sk.landmarks == 1 { "" } else { "s" }
        );
    }
    Ok(())
}

fn cmd_select(input: &Path, cfg: &SelectionConfig, eps: f64) -> Result<()> {
    let db = load_db(input)?;
    let set = information_scores(&db, eps).context("slot scoring failed")?;
    let scores = set.scores();
    let poses = set.poses();
    if cfg.k > poses.len() {
        bail!(
            "--k {} exceeds the {} scorable slots; pass --k {} or fewer",
            cfg.k,
            poses.len(),
            poses.len()
        );
    }
    let sel = greedy_select(&scores, &poses, cfg).context("greedy selection failed")?;
    let mut out = String::from("step,slot,height_level,azimuth_deg,gain,score\n");
    for (step, (&i, &gain)) in sel.selected.iter().zip(&sel.gains).enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            step + 1,
            poses[i].slot(),
            poses[i].height_level(),
            poses[i].azimuth_deg(),
            gain,
            scores[i]
        )
        .expect("write to string");
    }
    print!("{out}");
    note!("subset objective: {}", sel.objective);
    Ok(())
}

fn cmd_aggregate(
    input: &Path,
    output: &Path,
    uniform: bool,
    cfg: &SelectionConfig,
    tau: f64,
    eps: f64,
) -> Result<()> {
    let db = load_db(input)?;
    let selection = if uniform {
        uniform_selection()
    } else {
        scored_selection(&db, cfg, eps)?
    };
    let fused =
        aggregate_database(&db, &selection, &AggregationConfig { tau }).context("fusion failed")?;
    save_db(&fused, output)?;
    let mut out = String::from("landmarks,dim,views_fused,path\n");
    writeln!(
        out,
        "{},{},{},{}",
        fused.len(),
        fused.dim(),
        selection.len(),
        output.display()
    )
    .expect("write to string");
    print!("{out}");
    Ok(())
}

/// Load both databases and fuse the drone side if requested. Returns the
/// sides in (query, gallery) order for the direction.
fn load_sides(
    drone_path: &Path,
    sat_path: &Path,
    fusion: &FusionArgs,
    direction: Direction,
) -> Result<(EmbeddingDatabase, EmbeddingDatabase)> {
    let drone = load_db(drone_path)?;
    let sat = load_db(sat_path)?;
    let drone = match fusion.selection_pairs(&drone)? {
        Some(selection) => {
            aggregate_database(&drone, &selection, &AggregationConfig { tau: fusion.tau })
                .context("fusion failed")?
        }
        None => drone,
    };
    Ok(match direction {
        Direction::DroneToSatellite => (drone, sat),
        Direction::SatelliteToDrone => (sat, drone),
    })
}

fn cmd_retrieve(
    drone_path: &Path,
    sat_path: &Path,
    direction: Direction,
    similarity: SimilarityKind,
    top: usize,
    fusion: &FusionArgs,
) -> Result<()> {
    let (queries, gallery) = load_sides(drone_path, sat_path, fusion, direction)?;
    if queries.dim() != gallery.dim() {
        bail!(
            "dimension mismatch: queries have {}, gallery has {}",
            queries.dim(),
            gallery.dim()
        );
    }
    let gallery_rows: Vec<(u32, &[f32])> = gallery
        .descriptors()
        .iter()
        .map(|d| (d.landmark_id, d.feature.as_slice()))
        .collect();
    let mut out = String::from("query_landmark,query_slot,rank,match_landmark\n");
    for q in queries.descriptors() {
        let ranked =
            rank_gallery(&q.feature, &gallery_rows, similarity).context("ranking failed")?;
        let slot = q.pose.map(|p| p.slot().to_string()).unwrap_or_default();
        for (rank, id) in ranked.iter().take(top).enumerate() {
            writeln!(out, "{},{},{},{}", q.landmark_id, slot, rank + 1, id)
                .expect("write to string");
        }
    }
    print!("{out}");
    note!("{:<14} value", "setting");
    note!("{:<14} {}", "queries", queries.len());
    note!("{:<14} {}", "gallery", gallery_rows.len());
    note!("{:<14} {}", "top", top);
    note!("{:<14} {}", "fusion", fusion.mode());
    Ok(())
}

fn retrieval_config(
    direction: Direction,
    similarity: SimilarityKind,
    k_at: Vec<usize>,
    use_msrm: bool,
) -> RetrievalConfig {
    let mut k_values = k_at;
    k_values.sort_unstable();
    k_values.dedup();
    RetrievalConfig {
        direction,
        similarity,
        k_values,
        use_msrm,
    }
}

fn cmd_evaluate(
    drone_path: &Path,
    sat_path: &Path,
    direction: Direction,
    similarity: SimilarityKind,
    k_at: Vec<usize>,
    fusion: &FusionArgs,
) -> Result<()> {
    let drone = load_db(drone_path)?;
    let sat = load_db(sat_path)?;
    let selection = fusion.selection_pairs(&drone)?;
    let cfg = retrieval_config(direction, similarity, k_at, selection.is_some());
    let report = evaluate(
        &drone,
        &sat,
        selection.as_deref(),
        &AggregationConfig { tau: fusion.tau },
        &cfg,
    )
    .context("evaluation failed")?;

    let mut header = String::from("direction,similarity,msrm,queries,gallery,distance_ops");
    for k in report.recall_at.keys() {
        write!(header, ",recall_at_{k}").expect("write to string");
    }
    header.push_str(",ap_mean");
    let mut row = format!(
        "{},{},{},{},{},{}",
        direction,
        match similarity {
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::NegativeEuclidean => "neg-euclidean",
        },
        fusion.mode(),
        report.query_count,
        report.gallery_count,
        report.distance_ops
    );
    for r in report.recall_at.values() {
        write!(row, ",{r}").expect("write to string");
    }
    write!(row, ",{}", report.ap_mean).expect("write to string");
    println!("{header}");
    println!("{row}");

    note!("{:<14} value", "metric");
    note!("{:<14} {}", "queries", report.query_count);
    note!("{:<14} {}", "gallery", report.gallery_count);
    note!("{:<14} {}", "distance ops", report.distance_ops);
    for (k, r) in &report.recall_at {
        note!("{:<14} {r:.4}", format!("recall@{k}"));
    }
    note!("{:<14} {:.4}", "mean AP", report.ap_mean);
    Ok(())
}

fn cmd_gradcheck(
    step: f64,
    tolerance: f64,
    points: usize,
    max_resamples: usize,
    seed: u64,
) -> Result<(), Failure> {
    let cfg = GradCheckConfig {
        step,
        tolerance,
        points,
        max_resamples,
        seed,
    };
    let reports = run_suite(&cfg)
        .map_err(|e| Failure::Data(anyhow!(e).context("gradient suite could not run")))?;
    let mut out = String::from("loss,points,resamples,max_rel_err,pass\n");
    for r in &reports {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.name, r.points, r.resamples, r.max_rel_err, r.pass
        )
        .expect("write to string");
        note!(
            "{:26} {} (max rel err {:.3e})",
            r.name,
            if r.pass { "pass" } else { "FAIL" },
            r.max_rel_err
        );
    }
    print!("{out}");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    if !failed.is_empty() {
        return Err(Failure::Verification(format!(
            "{} of {} losses exceeded the {tolerance:e} tolerance: {}",
            failed.len(),
            reports.len(),
            failed.join(", ")
        )));
    }
    Ok(())
}

fn cmd_verify(cmd: VerifyCommand) -> Result<(), Failure> {
    match cmd {
        VerifyCommand::Prop1 {
            master_seed,
            mc_samples,
            eps,
        } => {
            let specs = default_prop1_specs(master_seed);
            let report = verify_prop1(&specs, &Prop1Config { mc_samples, eps }).map_err(|e| {
                Failure::Data(anyhow!(e).context("bound verification could not run"))
            })?;
            print!("{}", report.csv());
            let fraction = report.hold_fraction();
            note!(
                "bound held on {}/{} specs ({} ceiling-flagged)",
                report.trials.len() - report.violations().len(),
                report.trials.len(),
                report.flagged().len()
            );
            if fraction < MIN_HOLD_FRACTION {
                return Err(Failure::Verification(format!(
                    "bound held on only {:.1}% of specs (need {:.0}%)",
                    100.0 * fraction,
                    100.0 * MIN_HOLD_FRACTION
                )));
            }
        }
        VerifyCommand::Prop2 {
            master_seed,
            instances,
            n,
            k_choices,
            lambdas,
        } => {
            let cfg = Prop2Config {
                instances,
                n,
                k_choices,
                lambdas,
                master_seed,
            };
            let report = verify_prop2(&cfg).map_err(|e| {
                Failure::Data(anyhow!(e).context("greedy verification could not run"))
            })?;
            print!("{}", report.csv());
            let fraction = report.meets_fraction();
            for v in report.violations() {
                note!(
                    "below bound: instance {} (seed {}), k {}, lambda {}, ratio {}",
                    v.instance,
                    v.seed,
                    v.k,
                    v.lambda,
                    v.ratio
                );
            }
            note!(
                "bound met on {}/{} instances; modular instances exact: {}",
                report.trials.len() - report.violations().len(),
                report.trials.len(),
                report.modular_exact()
            );
            if fraction < MIN_MEETS_FRACTION {
                return Err(Failure::Verification(format!(
                    "approximation bound met on only {:.1}% of instances (need {:.0}%)",
                    100.0 * fraction,
                    100.0 * MIN_MEETS_FRACTION
                )));
            }
            if !report.modular_exact() {
                return Err(Failure::Verification(
                    "a lambda=1 instance was not exactly optimal".into(),
                ));
            }
        }
    }
    Ok(())
}

fn cmd_gen(cmd: GenCommand) -> Result<()> {
    match cmd {
        GenCommand::Grid {
            landmarks,
            dim,
            noise,
            informative,
            seed,
            drone_out,
            sat_out,
        } => {
            let spec = GridSpec::new(landmarks, dim, noise, informative.0, seed)
                .context("invalid grid spec")?;
            let (drone, sat) = gen_view_grid(&spec).context("grid generation failed")?;
            save_db(&drone, &drone_out)?;
            save_db(&sat, &sat_out)?;
            let mut out =
                String::from("landmarks,dim,noise,informative_count,drone_path,sat_path\n");
            writeln!(
                out,
                "{},{},{},{},{},{}",
                landmarks,
                dim,
                noise,
                spec.informative_slots().len(),
                drone_out.display(),
                sat_out.display()
            )
            .expect("write to string");
            print!("{out}");
        }
        GenCommand::Gaussian {
            classes,
            dim,
            mean_scale,
            cov_scale,
            samples_per_class,
            seed,
            output,
        } => {
            let spec = GaussianSpec::isotropic_random(
                classes,
                dim,
                mean_scale,
                cov_scale,
                samples_per_class,
                seed,
            )
            .context("invalid mixture spec")?;
            let (db, _labels) = gen_gaussian_db(&spec).context("sampling failed")?;
            save_db(&db, &output)?;
            let mut out = String::from("classes,dim,samples_per_class,cov_scale,mean_scale,path\n");
            writeln!(
                out,
                "{},{},{},{},{},{}",
                classes,
                dim,
                samples_per_class,
                cov_scale,
                mean_scale,
                output.display()
            )
            .expect("write to string");
            print!("{out}");
        }
    }
    Ok(())
}

fn cmd_bench(
    drone_path: &Path,
    sat_path: &Path,
    k_at: Vec<usize>,
    cfg: &SelectionConfig,
    tau: f64,
    eps: f64,
) -> Result<()> {
    let drone = load_db(drone_path)?;
    let sat = load_db(sat_path)?;
    let agg = AggregationConfig { tau };

    let raw_cfg = retrieval_config(
        Direction::DroneToSatellite,
        SimilarityKind::Cosine,
        k_at.clone(),
        false,
    );
    let t0 = Instant::now();
    let raw = evaluate(&drone, &sat, None, &agg, &raw_cfg).context("evaluation failed")?;
    let raw_elapsed = t0.elapsed();

    let selection = scored_selection(&drone, cfg, eps)?;
    let fused_cfg = retrieval_config(
        Direction::DroneToSatellite,
        SimilarityKind::Cosine,
        k_at,
        true,
    );
    let t1 = Instant::now();
    let fused =
        evaluate(&drone, &sat, Some(&selection), &agg, &fused_cfg).context("evaluation failed")?;
    let fused_elapsed = t1.elapsed();

    // Wall-clock times go to stderr: stdout stays byte-identical across runs.
    note!("raw:   {} ops in {:?}", raw.distance_ops, raw_elapsed);
    note!(
        "fused: {} ops in {:?} (selection + fusion excluded from timing)",
        fused.distance_ops,
        fused_elapsed
    );

    let ratio = raw.distance_ops as f64 / fused.distance_ops as f64;
    let mut out = String::from(
        "queries_raw,queries_fused,gallery,ops_raw,ops_fused,op_ratio,recall_at_1_raw,recall_at_1_fused,ap_mean_raw,ap_mean_fused\n",
    );
    writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        raw.query_count,
        fused.query_count,
        raw.gallery_count,
        raw.distance_ops,
        fused.distance_ops,
        ratio,
        raw.recall_at.values().next().copied().unwrap_or(0.0),
        fused.recall_at.values().next().copied().unwrap_or(0.0),
        raw.ap_mean,
        fused.ap_mean
    )
    .expect("write to string");
    print!("{out}");
    Ok(())
}
