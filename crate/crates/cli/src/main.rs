mod config;
mod output;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use spincorr_core::experiment::tally_records;
use spincorr_core::frame::{IntraPostAngles, GAUGE_TAG};
use spincorr_core::geodesic::{export_stereogram, stereogram_svg, trajectory_csv, Sign};
use spincorr_core::geometry::sample_uniform_direction;
use spincorr_core::hidden::FitOptions;
use spincorr_core::*;

use config::{options, parse, require};
use output::{write_atomic, write_report, Envelope};

const TOOL: &str = "spincorr";

/// Stream id for the orientations of randomly generated marks. Trials draw
/// from sub-streams of the seed's default stream, so the two never overlap.
const MARK_STREAM: u64 = 0x6d61_726b;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = TOOL, version, about = "Spin-correlation simulations, frame reconstruction and geodesic runs")]
struct Cli {
    /// Worker threads; output does not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write `duration_seconds` as null so reports are byte-comparable.
    #[arg(long, global = true)]
    omit_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a logbook of paired measurements.
    Simulate(SimulateArgs),
    /// Aggregate a logbook into per-pair agreement frequencies.
    Stats(StatsArgs),
    /// Recover mark orientations from pair statistics.
    Reconstruct(ReconstructArgs),
    /// Check a hidden-variable sampler against the marginal constraints.
    VerifyDist(VerifyArgs),
    /// Estimate the CHSH combination for a backend.
    Chsh(ChshArgs),
    /// Fit a grid density under the marginal constraints.
    FitDensity(FitArgs),
    /// Integrate a geodesic and report its invariants.
    Geodesic(Box<GeodesicArgs>),
}

options! {
    SimulateArgs => SimulateConfig {
        backend("backend"): String = "qm".into(), "qm, classical-vector or tetrahedron";
        law("law"): String = "anti-parallel".into(), "anti-parallel or parallel";
        pairs("pairs"): usize = 100_000, "Number of trials";
        marks("marks"): String = "8x8".into(), "Random marks as LxR or random:N";
        schedule("schedule"): String = "uniform".into(), "uniform or cyclic";
        out("out"): PathBuf = "logbook.csv".into(), "Logbook CSV";
    }
    optional {
        seed("seed"): u64, "Random seed";
        posts("posts"): PathBuf, "JSON file with explicit marks, overrides --marks";
        truth("truth"): PathBuf, "Write the mark orientations used";
        report("report"): PathBuf, "Report JSON";
    }
}

options! {
    StatsArgs => StatsConfig {
        input("input"): PathBuf = "logbook.csv".into(), "Logbook CSV";
        out("out"): PathBuf = "stats.json".into(), "Pair statistics JSON";
    }
    optional {
        posts("posts"): PathBuf, "Marks file; rejects ids not listed";
        report("report"): PathBuf, "Report JSON";
    }
}

options! {
    ReconstructArgs => ReconstructConfig {
        input("input"): PathBuf = "stats.json".into(), "Pair statistics JSON";
        hypothesis("hypothesis"): String = "qm_sin2".into(), "qm_sin2, qm_cos2 or linear";
        max_iter("max-iter"): usize = EmbedOptions::default().max_iter, "Optimizer iteration cap";
        tol("tol"): f64 = EmbedOptions::default().tol, "Relative stress decrease to stop at";
        out("out"): PathBuf = "embedding.json".into(), "Embedding JSON";
    }
    optional {
        truth("truth"): PathBuf, "Marks file with true orientations to score against";
        angles("angles"): PathBuf, "Write the observed angle matrix as CSV";
        report("report"): PathBuf, "Report JSON";
    }
}

options! {
    VerifyArgs => VerifyConfig {
        sampler("sampler"): String = "tetrahedron".into(), "tetrahedron, factorized or classical";
        samples("samples"): usize = 1_000_000, "Number of draws";
        bins("bins"): usize = 20, "Bins per axis";
        out("out"): PathBuf = "verify.json".into(), "Report JSON";
    }
    optional {
        seed("seed"): u64, "Random seed";
    }
}

options! {
    ChshArgs => ChshConfig {
        backend("backend"): String = "qm".into(), "qm, classical-vector or tetrahedron";
        law("law"): String = "anti-parallel".into(), "anti-parallel or parallel";
        trials("trials"): usize = 1_000_000, "Trials per setting";
        out("out"): PathBuf = "chsh.json".into(), "Report JSON";
    }
    optional {
        seed("seed"): u64, "Random seed";
    }
}

options! {
    FitArgs => FitConfig {
        grid("grid"): usize = 20, "Cells per axis";
        objective("objective"): String = "max-entropy".into(), "max-entropy or min-l2";
        constraints("constraints"): String = "all".into(), "all, or a list of z-ab-marginal, pair-marginals, conditional";
        max_sweeps("max-sweeps"): usize = FitOptions::default().max_sweeps, "Sweep cap";
        tolerance("tolerance"): f64 = FitOptions::default().tolerance, "Residual target";
        stall_sweeps("stall-sweeps"): usize = FitOptions::default().stall_sweeps, "Sweeps without progress before giving up";
        out("out"): PathBuf = "density.txt".into(), "Density text file";
    }
    optional {
        report("report"): PathBuf, "Report JSON";
    }
}

options! {
    GeodesicArgs => GeodesicConfig {
        a("A"): f64 = 4.0, "Constant A";
        p("P"): f64 = 5.0, "Constant P";
        w("W"): f64 = 1.0, "Constant W";
        x("X"): f64 = 1.2, "Constant X";
        r0("r0"): f64 = 1.0, "Initial radius";
        theta0("theta0"): f64 = std::f64::consts::FRAC_PI_2, "Initial polar angle";
        span("span"): f64 = 40.0, "Affine parameter span";
        rel_tol("rel-tol"): f64 = 1e-10, "Relative tolerance";
        abs_tol("abs-tol"): f64 = 1e-12, "Absolute tolerance";
        sign_ur("sign-ur"): String = "minus".into(), "Initial sign of U^r";
        sign_utheta("sign-utheta"): String = "plus".into(), "Initial sign of U^theta";
        stereo_offset("stereo-offset"): f64 = geodesic::DEFAULT_STEREO_OFFSET_DEG, "Stereo view separation in degrees";
        out("out"): PathBuf = "geodesic.json".into(), "Report JSON";
    }
    optional {
        trajectory("trajectory"): PathBuf, "Trajectory CSV";
        svg("svg"): PathBuf, "Stereo pair SVG";
    }
}

/// Marks of both posts as stored on disk.
#[derive(Serialize, Deserialize)]
struct PostsFile {
    left: Vec<Mark>,
    right: Vec<Mark>,
}

impl PostsFile {
    fn read(path: &Path) -> Result<(Post, Post), CliError> {
        let text = read_text(path)?;
        let f: PostsFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("invalid marks file {}: {e}", path.display())))?;
        let left = Post::new(Side::Left, f.left).map_err(CliError::runtime)?;
        let right = Post::new(Side::Right, f.right).map_err(CliError::runtime)?;
        Ok((left, right))
    }

    fn truth(path: &Path) -> Result<HashMap<MarkKey, UnitVec>, CliError> {
        let (left, right) = Self::read(path)?;
        let mut map = HashMap::new();
        for post in [&left, &right] {
            for m in post.marks() {
                map.insert(MarkKey::new(post.side(), m.id.clone()), m.orientation);
            }
        }
        Ok(map)
    }
}

/// `LxR` or `random:N` (N marks per post).
fn parse_mark_counts(value: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("invalid --marks `{value}`: expected LxR or random:N"));
    let (l, r) = match value.strip_prefix("random:") {
        Some(n) => (n, n),
        None => value.split_once(['x', 'X']).ok_or_else(bad)?,
    };
    let l: usize = l.trim().parse().map_err(|_| bad())?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    if l == 0 || r == 0 {
        return Err(bad());
    }
    Ok((l, r))
}

fn random_posts(n_left: usize, n_right: usize, seed: u64) -> Result<(Post, Post), CliError> {
    let mut rng = RandomStream::with_stream(seed, MARK_STREAM);
    let mut marks = |prefix: &str, n: usize| -> Vec<Mark> {
        (0..n)
            .map(|i| Mark::new(format!("{prefix}{i}"), sample_uniform_direction(&mut rng)))
            .collect()
    };
    let left = marks("l", n_left);
    let right = marks("r", n_right);
    Ok((
        Post::new(Side::Left, left).map_err(CliError::runtime)?,
        Post::new(Side::Right, right).map_err(CliError::runtime)?,
    ))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    s.push('\n');
    Ok(s.into_bytes())
}

struct Run {
    started: Instant,
    omit_timing: bool,
}

impl Run {
    fn report<C: Serialize, P: Serialize>(
        &self,
        path: &Path,
        sub: &str,
        config: &C,
        payload: P,
    ) -> Result<(), CliError> {
        let envelope = Envelope {
            tool: TOOL,
            version: env!("CARGO_PKG_VERSION"),
            subcommand: sub,
            config,
            duration_seconds: (!self.omit_timing).then(|| self.started.elapsed().as_secs_f64()),
            payload,
        };
        write_report(path, &envelope)
    }
}

fn measurement(backend: &str, law: &str) -> Result<Measurement, CliError> {
    Ok(Measurement {
        backend: parse(backend, "backend")?,
        law: parse(law, "law")?,
    })
}

fn simulate(run: &Run, args: &SimulateArgs) -> Result<(), CliError> {
    let cfg: SimulateConfig = config::resolve(args, args.config.as_ref(), "simulate")?;
    let seed = require(cfg.seed, "seed")?;
    let m = measurement(&cfg.backend, &cfg.law)?;
    let schedule: Schedule = parse(&cfg.schedule, "schedule")?;
    let (left, right) = match &cfg.posts {
        Some(path) => PostsFile::read(path)?,
        None => {
            let (l, r) = parse_mark_counts(&cfg.marks)?;
            random_posts(l, r, seed)?
        }
    };
    let records = generate_logbook((&left, &right), m, cfg.pairs, seed, schedule).map_err(CliError::runtime)?;
    let mut csv = Vec::with_capacity(32 * records.len());
    write_logbook_csv(&records, &mut csv).map_err(CliError::runtime)?;
    write_atomic(&cfg.out, &csv)?;
    if let Some(path) = &cfg.truth {
        let file = PostsFile {
            left: left.marks().to_vec(),
            right: right.marks().to_vec(),
        };
        write_atomic(path, &to_json_bytes(&file)?)?;
    }
    if let Some(path) = &cfg.report {
        let same = records.iter().filter(|r| r.outcome == Outcome::S).count();
        let payload = json!({
            "records": records.len(),
            "left_marks": left.ids(),
            "right_marks": right.ids(),
            "fraction_same": same as f64 / records.len() as f64,
        });
        run.report(path, "simulate", &cfg, payload)?;
    }
    Ok(())
}

fn stats(run: &Run, args: &StatsArgs) -> Result<(), CliError> {
    let cfg: StatsConfig = config::resolve(args, args.config.as_ref(), "stats")?;
    let file = std::fs::File::open(&cfg.input)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", cfg.input.display())))?;
    let records = read_logbook_csv(std::io::BufReader::new(file)).map_err(CliError::runtime)?;
    let stats = match &cfg.posts {
        Some(path) => {
            let (left, right) = PostsFile::read(path)?;
            estimate_pair_stats((&left, &right), &records).map_err(CliError::runtime)?
        }
        None => tally_records(&records),
    };
    write_atomic(&cfg.out, stats.to_json().map_err(CliError::runtime)?.as_bytes())?;
    if let Some(path) = &cfg.report {
        let payload = json!({
            "records": records.len(),
            "observed_pairs": stats.len(),
            "left_marks": stats.left_ids(),
            "right_marks": stats.right_ids(),
        });
        run.report(path, "stats", &cfg, payload)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct IntraPostJson {
    ids: Vec<String>,
    angles: Vec<Vec<f64>>,
    rank_deficient: bool,
}

impl From<IntraPostAngles> for IntraPostJson {
    fn from(a: IntraPostAngles) -> Self {
        let n = a.ids.len();
        IntraPostJson {
            angles: (0..n).map(|i| (0..n).map(|j| a.angles[(i, j)]).collect()).collect(),
            ids: a.ids,
            rank_deficient: a.rank_deficient,
        }
    }
}

fn reconstruct(run: &Run, args: &ReconstructArgs) -> Result<(), CliError> {
    let cfg: ReconstructConfig = config::resolve(args, args.config.as_ref(), "reconstruct")?;
    let hypothesis: Hypothesis = parse(&cfg.hypothesis, "hypothesis")?;
    let stats = PairStats::from_json(&read_text(&cfg.input)?).map_err(CliError::runtime)?;
    let angles = angles_from_stats(&stats, hypothesis).map_err(CliError::runtime)?;
    if let Some(path) = &cfg.angles {
        write_atomic(path, angles.to_csv().as_bytes())?;
    }
    let opts = EmbedOptions {
        max_iter: cfg.max_iter,
        tol: cfg.tol,
    };
    let solution = embed_on_sphere(&angles, &opts).map_err(CliError::runtime)?;
    write_atomic(&cfg.out, solution.to_json().as_bytes())?;
    let alignment = match &cfg.truth {
        Some(path) => Some(align_and_score(&solution, &PostsFile::truth(path)?).map_err(CliError::runtime)?),
        None => None,
    };
    if let Some(path) = &cfg.report {
        let tolerance = angles.noise_tolerance();
        let embeddability =
            embeddability_test(&solution.completed_cosines(&angles), Some(tolerance)).map_err(CliError::runtime)?;
        let payload = json!({
            "hypothesis": hypothesis,
            "marks": angles.len(),
            "observed_pairs": stats.len(),
            "gauge": GAUGE_TAG,
            "stress": solution.stress,
            "iterations": solution.iterations,
            "converged": solution.converged,
            "rank_deficient": solution.rank_deficient,
            "embeddable": embeddability.embeddable(),
            "embeddability": embeddability,
            "alignment": alignment,
            "intra_post": {
                "left": IntraPostJson::from(intra_post_angles(&solution, Side::Left)),
                "right": IntraPostJson::from(intra_post_angles(&solution, Side::Right)),
            },
        });
        run.report(path, "reconstruct", &cfg, payload)?;
    }
    Ok(())
}

fn verify_dist(run: &Run, args: &VerifyArgs) -> Result<(), CliError> {
    let cfg: VerifyConfig = config::resolve(args, args.config.as_ref(), "verify-dist")?;
    let seed = require(cfg.seed, "seed")?;
    let sampler: SamplerKind = parse(&cfg.sampler, "sampler")?;
    let report =
        verify_marginals(&sampler, cfg.samples, cfg.bins, &RandomStream::new(seed)).map_err(CliError::runtime)?;
    run.report(&cfg.out, "verify-dist", &cfg, report)
}

fn chsh_cmd(run: &Run, args: &ChshArgs) -> Result<(), CliError> {
    let cfg: ChshConfig = config::resolve(args, args.config.as_ref(), "chsh")?;
    let seed = require(cfg.seed, "seed")?;
    let m = measurement(&cfg.backend, &cfg.law)?;
    let estimate = chsh(m, &ChshSettings::standard(), cfg.trials, seed).map_err(CliError::runtime)?;
    run.report(&cfg.out, "chsh", &cfg, estimate)
}

fn fit_density(run: &Run, args: &FitArgs) -> Result<(), CliError> {
    let cfg: FitConfig = config::resolve(args, args.config.as_ref(), "fit-density")?;
    let objective: Objective = parse(&cfg.objective, "objective")?;
    let constraints = ConstraintSet::parse_list(&cfg.constraints)
        .map_err(|e| CliError::Usage(format!("invalid --constraints `{}`: {e}", cfg.constraints)))?;
    let opts = FitOptions {
        max_sweeps: cfg.max_sweeps,
        tolerance: cfg.tolerance,
        stall_sweeps: cfg.stall_sweeps,
    };
    let density = fit_discrete_density(cfg.grid, objective, constraints, &opts).map_err(CliError::runtime)?;
    write_atomic(&cfg.out, density.to_text().as_bytes())?;
    if let Some(path) = &cfg.report {
        let payload = json!({
            "grid_n": density.grid_n(),
            "total_mass": density.total_mass(),
            "residuals": density.residuals,
        });
        run.report(path, "fit-density", &cfg, payload)?;
    }
    Ok(())
}

fn parse_sign(value: &str, flag: &str) -> Result<Sign, CliError> {
    match value {
        "plus" | "+" => Ok(Sign::Plus),
        "minus" | "-" => Ok(Sign::Minus),
        _ => Err(CliError::Usage(format!(
            "invalid --{flag} `{value}`: expected plus or minus"
        ))),
    }
}

fn geodesic_cmd(run: &Run, args: &GeodesicArgs) -> Result<(), CliError> {
    let cfg: GeodesicConfig = config::resolve(args, args.config.as_ref(), "geodesic")?;
    let sign_ur = parse_sign(&cfg.sign_ur, "sign-ur")?;
    let sign_utheta = parse_sign(&cfg.sign_utheta, "sign-utheta")?;
    let constants = GeodesicConstants::new(cfg.p, cfg.x, cfg.a, cfg.w).map_err(CliError::runtime)?;
    let state =
        state_from_constants(&constants, cfg.r0, cfg.theta0, sign_ur, sign_utheta).map_err(CliError::runtime)?;
    let traj = match integrate(&state, cfg.span, cfg.rel_tol, cfg.abs_tol) {
        Ok(t) => t,
        Err(GeodesicError::StepUnderflow { s, partial }) => {
            eprintln!("{TOOL}: warning: step size underflow at s = {s}; reporting the partial trajectory");
            *partial
        }
        Err(e) => return Err(CliError::runtime(e)),
    };
    if let Some(path) = &cfg.trajectory {
        write_atomic(path, trajectory_csv(&traj).as_bytes())?;
    }
    if let Some(path) = &cfg.svg {
        let svg = stereogram_svg(&export_stereogram(&traj, cfg.stereo_offset));
        write_atomic(path, svg.as_bytes())?;
    }
    run.report(&cfg.out, "geodesic", &cfg, GeodesicReport::new(&constants, &traj))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let run = Run {
        started: Instant::now(),
        omit_timing: cli.omit_timing,
    };
    match &cli.command {
        Command::Simulate(a) => simulate(&run, a),
        Command::Stats(a) => stats(&run, a),
        Command::Reconstruct(a) => reconstruct(&run, a),
        Command::VerifyDist(a) => verify_dist(&run, a),
        Command::Chsh(a) => chsh_cmd(&run, a),
        Command::FitDensity(a) => fit_density(&run, a),
        Command::Geodesic(a) => geodesic_cmd(&run, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{TOOL}: --threads must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(&cli)),
        Err(e) => Err(CliError::runtime(e)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("{TOOL}: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("{TOOL}: {}", msg.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
