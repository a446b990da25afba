mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use planrank::dataset::{
    generate_synthetic_workload, read_candidate_set, read_dataset, read_split, write_dataset, write_split,
    CandidateSet, SplitManifest,
};
use planrank::decision::decide;
use planrank::embedder::EmbedderKind;
use planrank::evalkit::compare_policies;
use planrank::ood::{fit_detector, load_detector, plan_features, save_detector, OodDetector, DETECTOR_MAGIC};
use planrank::ranker::rank_with_scores;
use planrank::training::{load_checkpoint, save_checkpoint, train_with_progress, ModelCheckpoint, CHECKPOINT_MAGIC};
use planrank::{ErrorKind, container};
use serde_json::{json, Value};

use config::{ConfigError, RunConfig};

/// Format version stamped on rank and decide outputs.
const OUTPUT_FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "planrank", version, about = "Learned listwise query-plan ranking")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic workload and its train/test split.
    GenData(OutArgs),
    /// Train a ranker on the training split.
    Train {
        #[command(flatten)]
        out: OutArgs,
        /// tree_lstm or tree_cnn.
        #[arg(long)]
        embedder: Option<String>,
    },
    /// Fit and calibrate the OOD detector on the training split.
    TrainOod(OutArgs),
    /// Rank one candidate set.
    Rank(InputArgs),
    /// Rank one candidate set and apply the gated top-k selection.
    Decide {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        gate: GateArgs,
    },
    /// Compare policies on the test split.
    Eval {
        #[command(flatten)]
        out: OutArgs,
        #[command(flatten)]
        gate: GateArgs,
    },
    /// Print the header of a checkpoint or detector file.
    Inspect {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct OutArgs {
    /// Output path; defaults to the path in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InputArgs {
    /// File holding exactly one candidate set (one JSON line).
    #[arg(long)]
    input: PathBuf,
    /// Write JSON here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GateArgs {
    #[arg(long)]
    k: Option<usize>,
    /// Decide even with a degraded detector.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] planrank::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let kind = match self {
            CliError::Usage(_) => return 1,
            CliError::Config(ConfigError::Invalid(e)) | CliError::Core(e) => e.kind(),
            CliError::Config(_) => return 1,
        };
        match kind {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Model => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let cfg = RunConfig::load(&path, cli.seed)?;
    match cli.command {
        Command::GenData(a) => gen_data(&cfg, a.out),
        Command::Train { out, embedder } => train_cmd(cfg, out.out, embedder),
        Command::TrainOod(a) => train_ood(&cfg, a.out),
        Command::Rank(a) => rank_cmd(&cfg, &a),
        Command::Decide { input, gate } => decide_cmd(&cfg, &input, &gate),
        Command::Eval { out, gate } => eval_cmd(&cfg, out.out, &gate),
        Command::Inspect { input } => inspect(&input),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(planrank::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn prepare_output(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    prepare_output(path)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn emit_json(value: &Value, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(planrank::Error::from)? + "\n";
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_split(cfg: &RunConfig) -> CliResult<(Vec<CandidateSet>, SplitManifest)> {
    let data = read_dataset(&cfg.paths.dataset)?;
    let split = read_split(&cfg.paths.split)?;
    Ok((data, split))
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<()> {
    let data = generate_synthetic_workload(&cfg.workload)?;
    let manifest = SplitManifest::build(&data, cfg.split_ratio, cfg.seed)?;
    let dataset_path = out.unwrap_or_else(|| cfg.paths.dataset.clone());
    prepare_output(&dataset_path)?;
    prepare_output(&cfg.paths.split)?;
    write_dataset(&dataset_path, &data)?;
    write_split(&cfg.paths.split, &manifest)?;
    println!(
        "wrote {} queries to {} ({} train / {} test, split in {})",
        data.len(),
        dataset_path.display(),
        manifest.train.len(),
        manifest.test.len(),
        cfg.paths.split.display()
    );
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, out: Option<PathBuf>, embedder: Option<String>) -> CliResult<()> {
    if let Some(name) = embedder {
        cfg.train.embedder = EmbedderKind::parse(&name)?;
    }
    let (data, split) = load_split(&cfg)?;
    let train_set = split.train_sets(&data)?;
    let out = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    prepare_output(&out)?;
    let model = train_with_progress(&train_set, &cfg.train, |epoch, loss| {
        println!("epoch {:>4}  loss {loss:.6}", epoch + 1);
    })?;
    save_checkpoint(&model, &out)?;
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

fn train_ood(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<()> {
    let model = load_checkpoint(&cfg.paths.checkpoint)?;
    let (data, split) = load_split(cfg)?;
    let mut features = Vec::new();
    for cs in split.train_sets(&data)? {
        features.extend(plan_features(&model, cs.plans())?);
    }
    let out = out.unwrap_or_else(|| cfg.paths.detector.clone());
    prepare_output(&out)?;
    let det = fit_detector(&features, &cfg.ood)?;
    save_detector(&det, &out)?;
    let th = det.thresholds;
    println!(
        "tau_in {:.6}  tau_out {:.6}{}",
        th.tau_in,
        th.tau_out,
        if th.degraded { "  (degraded: calibration overlap)" } else { "" }
    );
    if let Some(c) = &det.calibration {
        println!(
            "mean g: holdout {:.4}, negatives {:.4}",
            c.mean_g_in, c.mean_g_negative
        );
    }
    println!("saved detector to {}", out.display());
    Ok(())
}

fn plan_ids(cs: &CandidateSet, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| cs.plans()[i].plan_id().to_string()).collect()
}

fn rank_cmd(cfg: &RunConfig, a: &InputArgs) -> CliResult<()> {
    let model = load_checkpoint(&cfg.paths.checkpoint)?;
    let cs = read_candidate_set(&a.input)?;
    let (ranked, scores) = rank_with_scores(&cs, &model)?;
    let all: Vec<usize> = (0..cs.len()).collect();
    let value = json!({
        "format_version": OUTPUT_FORMAT_VERSION,
        "query_id": cs.query_id(),
        "plan_ids": plan_ids(&cs, &all),
        "ranking": plan_ids(&cs, &ranked.by_position),
        "permutation": ranked.permutation,
        "by_position": ranked.by_position,
        "scores": scores.to_rows(),
    });
    emit_json(&value, a.out.as_deref())
}

fn decide_cmd(cfg: &RunConfig, a: &InputArgs, gate: &GateArgs) -> CliResult<()> {
    let model = load_checkpoint(&cfg.paths.checkpoint)?;
    let det = load_detector(&cfg.paths.detector)?;
    let cs = read_candidate_set(&a.input)?;
    let k = gate.k.unwrap_or(cfg.decision.k);
    let force = gate.force || cfg.decision.force;
    let (outcome, ranked, _) = decide(&cs, &model, &det, k, cfg.decision.tie_epsilon, force)?;
    let mut value = serde_json::to_value(&outcome).map_err(planrank::Error::from)?;
    value["format_version"] = json!(OUTPUT_FORMAT_VERSION);
    value["ranking"] = json!(plan_ids(&cs, &ranked.by_position));
    value["degraded_detector"] = json!(det.thresholds.degraded);
    emit_json(&value, a.out.as_deref())
}

fn eval_cmd(cfg: &RunConfig, out: Option<PathBuf>, gate: &GateArgs) -> CliResult<()> {
    let model = load_checkpoint(&cfg.paths.checkpoint)?;
    let det = load_detector(&cfg.paths.detector)?;
    let (data, split) = load_split(cfg)?;
    let test = split.test_sets(&data)?;
    let k = gate.k.unwrap_or(cfg.decision.k);
    let report = compare_policies(&test, &model, &det, k, gate.force || cfg.decision.force)?;
    print!("{}", report.to_table());
    let out = out.unwrap_or_else(|| cfg.paths.report.clone());
    write_text(&out, &report.to_json())?;
    println!("wrote report to {}", out.display());
    Ok(())
}

fn inspect(path: &Path) -> CliResult<()> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let header = match container::sniff(&bytes) {
        Some(m) if &m == CHECKPOINT_MAGIC => ModelCheckpoint::from_bytes(&bytes)?.header_json(),
        Some(m) if &m == DETECTOR_MAGIC => OodDetector::from_bytes(&bytes)?.header_json(),
        _ => {
            return Err(planrank::Error::CorruptFile(format!(
                "{} is neither a checkpoint nor a detector file",
                path.display()
            ))
            .into())
        }
    };
    emit_json(&header, None)
}
