//! Command implementations behind the `mt3d` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mt3d::evalbench::{aggregate, precision_auc, run_bench, success_auc, AggregateTable, BenchReport, ClassScore, DEFAULT_BENCH_SIZES};
use mt3d::formats::{
    file_sha256, read_tracklet, timing_sidecar, tracklet_digest, write_tracklet, ResultsFile, RunManifest, Summary,
    TrackletMeta, TrackletResult, LABELS_FILE, RESULTS_SCHEMA,
};
use mt3d::selfcheck::{report_text, run_all, CheckOutcome};
use mt3d::synthgen::{generate, preset, ScenarioSpec, PRESET_NAMES};
use mt3d::tracker::{run_tracklet, subsample_htv, FrameResult, PredictorMode};
use mt3d::weights::{required_tensors, ModelWeights, WeightsFile};
use mt3d::Config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SELFCHECK: i32 = 3;

/// Environment variable holding the default worker count of `track`.
pub const THREADS_ENV: &str = "MT3D_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] mt3d::Error),
    #[error("{failed} self-check(s) failed")]
    Selfcheck { failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Selfcheck { .. } => EXIT_SELFCHECK,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn data_err(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Data(mt3d::Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| mt3d::Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| {
        mt3d::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data") + "\n"
}

/// `<path>.manifest.json`
pub fn manifest_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn load_config(path: Option<&Path>, small: bool) -> Result<Config> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| mt3d::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| data_err(p, e.to_string()))?
        }
        None if small => Config::small(),
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "mt3d", version, about = "Single-object LiDAR tracking toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic tracklet directory.
    Synth(SynthArgs),
    /// Track one or more tracklet directories and write a results file.
    Track(TrackArgs),
    /// Aggregate result files into a per-class table.
    Eval(EvalArgs),
    /// Measure cost and throughput over input sizes.
    Bench(BenchArgs),
    /// Run the embedded oracle suite.
    Selfcheck(SelfcheckArgs),
    /// Create or inspect weight files.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Built-in scenario name.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    pub preset: Option<String>,
    /// Scenario JSON file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Tracklet directories, or directories of tracklet directories.
    #[arg(required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub weights: PathBuf,
    /// Keep every n-th frame.
    #[arg(long, default_value_t = 1)]
    pub interval: usize,
    /// Replace every prediction with the ground truth.
    #[arg(long)]
    pub gt_replay: bool,
    /// Worker count; defaults to $MT3D_THREADS, then 1.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Result files or glob patterns.
    #[arg(required = true)]
    pub results: Vec<String>,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated ascending point counts.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BENCH_SIZES)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Corrupt kernel outputs so that the checks must fail.
    #[arg(long)]
    pub inject_fault: bool,
    /// Print the outcomes as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum WeightsCommand {
    /// Seeded initialization.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the small built-in configuration.
        #[arg(long, conflicts_with = "config")]
        small: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a file and list its tensors.
    Inspect { path: PathBuf },
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let command: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let dir = synth(&a, argv)?;
            println!("wrote {}", dir.display());
        }
        Command::Track(a) => {
            let r = track(&a, argv)?;
            println!(
                "{} tracklet(s), {} frames: success {:.2}, precision {:.2}",
                r.tracklets.len(),
                r.summary.frames,
                r.summary.success,
                r.summary.precision
            );
        }
        Command::Eval(a) => {
            let out = eval(&a, argv)?;
            print!("{}", out.table.to_text());
        }
        Command::Bench(a) => {
            let report = bench(&a, argv)?;
            if a.out.is_none() {
                print!("{}", report.to_csv());
            }
            print!("{}", report.summary());
        }
        Command::Selfcheck(a) => {
            let outcomes = run_all(a.inject_fault);
            if a.json {
                print!("{}", to_json(&outcomes));
            } else {
                print!("{}", report_text(&outcomes));
            }
            selfcheck_verdict(&outcomes)?;
        }
        Command::Weights(WeightsCommand::Init {
            config,
            small,
            seed,
            out,
        }) => {
            let cfg = load_config(config.as_deref(), small)?;
            let digest = weights_init(&cfg, seed, &out, argv)?;
            println!("wrote {} sha256 {digest}", out.display());
        }
        Command::Weights(WeightsCommand::Inspect { path }) => print!("{}", weights_inspect(&path)?),
    }
    Ok(())
}

pub fn selfcheck_verdict(outcomes: &[CheckOutcome]) -> Result<()> {
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("selfcheck: {}/{} passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        return Err(CliError::Selfcheck { failed });
    }
    Ok(())
}

pub fn scenario(args: &SynthArgs) -> Result<ScenarioSpec> {
    let mut spec = match (&args.preset, &args.spec) {
        (Some(name), _) => preset(name)
            .ok_or_else(|| CliError::Usage(format!("unknown preset `{name}` (known: {})", PRESET_NAMES.join(", "))))?,
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| mt3d::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| data_err(p, e.to_string()))?
        }
        (None, None) => return Err(CliError::Usage("need --preset or --spec".into())),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn synth(args: &SynthArgs, argv: &[String]) -> Result<PathBuf> {
    let spec = scenario(args)?;
    let t = generate(&spec)?;
    let meta = TrackletMeta {
        class: t.class.clone(),
        source: spec.name.clone(),
        preset: args.preset.clone(),
        seed: Some(spec.seed),
    };
    write_tracklet(&args.out, &t, &meta)?;
    let manifest = RunManifest {
        command: argv.to_vec(),
        config: Config::default(),
        input_hashes: args
            .spec
            .iter()
            .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
            .collect::<Result<_>>()?,
        outputs: vec![args.out.display().to_string()],
        seed: Some(spec.seed),
        timing: None,
    };
    write_file(&args.out.join("manifest.json"), to_json(&manifest))?;
    Ok(args.out.clone())
}

/// Tracklet directories under `root`, sorted; `root` itself if it holds labels.
pub fn tracklet_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(LABELS_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| mt3d::Error::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LABELS_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(data_err(root, format!("no {LABELS_FILE} here or in any subdirectory")));
    }
    Ok(dirs)
}

pub fn worker_count(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(CliError::Usage("worker count must be at least 1".into()));
    }
    Ok(n)
}

/// Success and precision in percent over the given frames.
pub fn summarize(frames: &[FrameResult], cap: f64) -> Result<Summary> {
    let ious: Vec<f64> = frames.iter().map(|f| f.iou).collect();
    let errors: Vec<f64> = frames.iter().map(|f| f.center_error).collect();
    Ok(Summary {
        success: 100.0 * success_auc(&ious)?.auc,
        precision: 100.0 * precision_auc(&errors, cap)?.auc,
        frames: frames.len(),
    })
}

#[derive(Serialize)]
struct Timing {
    seconds: f64,
    threads: usize,
}

/// Run tracking and write the results file plus its timing sidecar.
pub fn track(args: &TrackArgs, argv: &[String]) -> Result<ResultsFile> {
    if args.interval == 0 {
        return Err(CliError::Usage("--interval must be at least 1".into()));
    }
    let threads = worker_count(args.threads)?;
    let start = Instant::now();
    let file = WeightsFile::load(&args.weights)?;
    let cfg = file.config.clone();
    let weights = Arc::new(file.weights);
    let mode = if args.gt_replay {
        PredictorMode::GtReplay
    } else {
        PredictorMode::Model
    };
    let mut dirs = Vec::new();
    for d in &args.data {
        dirs.extend(tracklet_dirs(d)?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let per_dir: Vec<(String, String, TrackletResult)> = pool.install(|| {
        dirs.par_iter()
            .map(|dir| -> Result<_> {
                let (t, _) = read_tracklet(dir)?;
                let digest = tracklet_digest(&t);
                let t = subsample_htv(&t, args.interval)?;
                let run = run_tracklet(&t, &cfg, Arc::clone(&weights), mode)?;
                let summary = summarize(run.scored(), cfg.precision_cap)?;
                Ok((
                    dir.display().to_string(),
                    digest,
                    TrackletResult {
                        class: t.class.clone(),
                        source: t.source.clone(),
                        frames: run.frames,
                        summary,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut input_hashes = BTreeMap::new();
    input_hashes.insert(args.weights.display().to_string(), file_sha256(&args.weights)?);
    let mut tracklets = Vec::with_capacity(per_dir.len());
    for (dir, digest, r) in per_dir {
        input_hashes.insert(dir, digest);
        tracklets.push(r);
    }
    let scored: Vec<FrameResult> = tracklets.iter().flat_map(|t| t.frames[1..].iter().cloned()).collect();
    let sidecar = timing_sidecar(&args.out);
    let results = ResultsFile {
        schema: RESULTS_SCHEMA.into(),
        interval: args.interval,
        mode,
        summary: summarize(&scored, cfg.precision_cap)?,
        tracklets,
        manifest: RunManifest {
            command: argv.to_vec(),
            config: cfg,
            input_hashes,
            outputs: vec![args.out.display().to_string()],
            seed: None,
            timing: Some(sidecar.display().to_string()),
        },
    };
    write_file(&args.out, results.to_json())?;
    let timing = Timing {
        seconds: start.elapsed().as_secs_f64(),
        threads,
    };
    write_file(&sidecar, to_json(&timing))?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub inputs: Vec<String>,
    pub table: AggregateTable,
}

fn is_sidecar(p: &Path) -> bool {
    let name = p.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    name.ends_with(".timing.json") || name.ends_with(".manifest.json")
}

/// Expand patterns into a sorted, de-duplicated file list. Timing and
/// manifest sidecars are skipped.
pub fn expand_results(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for p in patterns {
        let matches = glob::glob(p).map_err(|e| CliError::Usage(format!("bad pattern `{p}`: {e}")))?;
        paths.extend(matches.filter_map(|m| m.ok()).filter(|m| m.is_file() && !is_sidecar(m)));
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        return Err(data_err(Path::new(&patterns.join(" ")), "no result files match"));
    }
    Ok(paths)
}

pub fn eval(args: &EvalArgs, argv: &[String]) -> Result<EvalOutput> {
    let paths = expand_results(&args.results)?;
    let mut rows = Vec::new();
    for p in &paths {
        let text = fs::read_to_string(p).map_err(|e| mt3d::Error::Io {
            path: p.clone(),
            source: e,
        })?;
        let r = ResultsFile::from_json(&text, p)?;
        rows.extend(r.tracklets.iter().map(|t| ClassScore {
            class: t.class.clone(),
            frames: t.summary.frames,
            success: t.summary.success,
            precision: t.summary.precision,
        }));
    }
    if rows.is_empty() {
        return Err(data_err(&paths[0], "result files contain no tracklets"));
    }
    let out = EvalOutput {
        inputs: paths.iter().map(|p| p.display().to_string()).collect(),
        table: aggregate(&rows)?,
    };
    if let Some(json) = &args.json {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            out: &'a EvalOutput,
            manifest: RunManifest,
        }
        let manifest = RunManifest {
            command: argv.to_vec(),
            config: Config::default(),
            input_hashes: paths
                .iter()
                .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
                .collect::<Result<_>>()?,
            outputs: vec![json.display().to_string()],
            seed: None,
            timing: None,
        };
        write_file(json, to_json(&Doc { out: &out, manifest }))?;
    }
    Ok(out)
}

pub fn bench(args: &BenchArgs, argv: &[String]) -> Result<BenchReport> {
    let cfg = load_config(args.config.as_deref(), false)?;
    if args.sizes.is_empty() || args.sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Usage("--sizes must be ascending".into()));
    }
    if args.reps < 3 {
        return Err(CliError::Usage("--reps must be at least 3".into()));
    }
    if args.sizes[0] < cfg.tokens {
        return Err(CliError::Usage(format!("sizes must be at least the token count {}", cfg.tokens)));
    }
    let weights = ModelWeights::init(&cfg, args.seed)?;
    let report = run_bench(&cfg, &weights, &args.sizes, args.reps)?;
    if let Some(out) = &args.out {
        write_file(out, report.to_csv())?;
        let manifest = RunManifest {
            command: argv.to_vec(),
            config: cfg,
            input_hashes: BTreeMap::new(),
            outputs: vec![out.display().to_string()],
            seed: Some(args.seed),
            timing: Some(out.display().to_string()),
        };
        write_file(&manifest_sidecar(out), to_json(&manifest))?;
    }
    Ok(report)
}

/// Returns the sha256 of the written file.
pub fn weights_init(cfg: &Config, seed: u64, out: &Path, argv: &[String]) -> Result<String> {
    let file = WeightsFile::new(cfg.clone(), ModelWeights::init(cfg, seed)?);
    let bytes = file.to_bytes()?;
    write_file(out, &bytes)?;
    let manifest = RunManifest {
        command: argv.to_vec(),
        config: cfg.clone(),
        input_hashes: BTreeMap::new(),
        outputs: vec![out.display().to_string()],
        seed: Some(seed),
        timing: None,
    };
    write_file(&manifest_sidecar(out), to_json(&manifest))?;
    Ok(mt3d::formats::sha256_hex(&bytes))
}

pub fn weights_inspect(path: &Path) -> Result<String> {
    let file = WeightsFile::load(path)?;
    let mut out = format!("file      {}\nsha256    {}\n", path.display(), file_sha256(path)?);
    out.push_str(&format!("config    {}\n", serde_json::to_string(&file.config).expect("plain data")));
    out.push_str(&format!("params    {}\n", file.weights.parameter_count()));
    let present: BTreeMap<String, Vec<usize>> = file
        .weights
        .tensors()
        .into_iter()
        .map(|(n, v)| (n, v.shape().to_vec()))
        .collect();
    for (name, shape) in &present {
        out.push_str(&format!("  {name:<40} {shape:?}\n"));
    }
    let missing = required_tensors(&file.config)
        .into_iter()
        .filter(|(n, s)| present.get(n) != Some(s))
        .count();
    out.push_str(&format!("required  {} missing or mismatched\n", missing));
    if let Some(bank) = &file.bank {
        out.push_str(&format!("bank      {} frame(s), timestamps {:?}\n", bank.len(), bank.timestamps()));
    }
    Ok(out)
}
