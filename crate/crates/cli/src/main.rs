use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedvit::data::{self, Dataset, SkewSpec, SplitKind, SyntheticSpec};
use fedvit::experiment::{self, RunConfig};
use fedvit::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "fedvit", version, about = "Federated ViT with per-head personalized self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic non-IID dataset and its client assignment.
    GenData(GenData),
    /// Run a federation from a TOML config.
    Run(RunArgs),
    /// Run once per personalization ratio and tabulate final AUCs.
    Sweep(SweepArgs),
    /// Describe a checkpoint file.
    Inspect {
        /// FVT1 checkpoint.
        checkpoint: PathBuf,
    },
}

#[derive(clap::Args)]
struct GenData {
    /// Number of clients.
    #[arg(long, default_value_t = 6)]
    clients: usize,
    /// Samples per client (train + test).
    #[arg(long, default_value_t = 600)]
    n: usize,
    /// Dirichlet concentration of per-client class proportions.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Base seed; falls back to FEDVIT_SEED.
    #[arg(long, env = "FEDVIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Per-client intensity shift strength (0 disables).
    #[arg(long, default_value_t = 0.3)]
    shift: f64,
    /// Class template amplitude.
    #[arg(long, default_value_t = 0.15)]
    amplitude: f64,
    /// Per-client minimum samples of each class.
    #[arg(long, default_value_t = 30)]
    min_per_class: usize,
    /// Output directory; receives data.fvd and assignment.csv.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run config.
    config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train up to N clients concurrently; results are unchanged.
    #[arg(long, default_value_t = 1)]
    parallel_clients: usize,
}

#[derive(clap::Args)]
struct SweepArgs {
    /// TOML run config.
    config: PathBuf,
    /// Comma-separated personalization ratios.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
    p: Vec<f64>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train up to N clients concurrently; results are unchanged.
    #[arg(long, default_value_t = 1)]
    parallel_clients: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Data(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Checksum(_) => 3,
        Error::Numeric { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Run(a) => run(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(a: &GenData) -> fedvit::Result<()> {
    for (flag, v) in [("--clients", a.clients), ("--n", a.n), ("--image-size", a.image_size)] {
        if v == 0 {
            return Err(Error::Config(format!("{flag} must be positive")));
        }
    }
    if !(a.alpha > 0.0) {
        return Err(Error::Config(format!("--alpha must be positive, got {}", a.alpha)));
    }
    if !(0.0..1.0).contains(&a.shift) {
        return Err(Error::Config(format!("--shift must lie in [0, 1), got {}", a.shift)));
    }
    let skew = if a.shift > 0.0 {
        SkewSpec::with_random_shifts(a.alpha, a.clients, a.shift, a.seed)
    } else {
        SkewSpec::label_only(a.alpha, a.seed)
    };
    let mut spec = SyntheticSpec::new(a.clients, a.n, a.image_size, a.classes, skew);
    spec.template_amplitude = a.amplitude;
    spec.min_per_class = a.min_per_class;
    let shards = data::generate_synthetic(&spec)?;

    let mut parts: Vec<&Dataset> = Vec::new();
    let mut assignment = Vec::new();
    let mut report = String::new();
    for s in &shards {
        parts.push(&s.train);
        parts.push(&s.test);
        assignment.extend(std::iter::repeat_n((s.client_id, SplitKind::Train), s.train.len()));
        assignment.extend(std::iter::repeat_n((s.client_id, SplitKind::Test), s.test.len()));
        let hist: Vec<String> = s
            .train
            .class_counts()
            .iter()
            .zip(s.test.class_counts())
            .map(|(tr, te)| (tr + te).to_string())
            .collect();
        writeln!(report, "client {}: {}", s.client_id, hist.join(" ")).unwrap();
    }
    let all = Dataset::concat(parts).expect("at least one client");

    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    data::save_dataset(&all, a.out.join("data.fvd"))?;
    data::write_assignment(&assignment, a.out.join("assignment.csv"))?;
    print!("{report}");
    Ok(())
}

fn load_config(path: &Path) -> fedvit::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Ok(s) = std::env::var("FEDVIT_SEED") {
        cfg.fed.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("FEDVIT_SEED must be an unsigned integer, got `{s}`")))?;
    }
    Ok(cfg)
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(a: &RunArgs) -> fedvit::Result<()> {
    let cfg = load_config(&a.config)?;
    let summary = experiment::run(&cfg, &out_dir(&a.out, &cfg), a.parallel_clients)?;
    println!("{}", summary.summary_line());
    Ok(())
}

fn sweep(a: &SweepArgs) -> fedvit::Result<()> {
    let cfg = load_config(&a.config)?;
    let rows = experiment::sweep(&cfg, &a.p, &out_dir(&a.out, &cfg), a.parallel_clients)?;
    print!("{}", experiment::sweep_csv(&rows));
    Ok(())
}

fn inspect(path: &Path) -> fedvit::Result<()> {
    let ckpt = checkpoint::load_checkpoint(path)?;
    print!("{}", experiment::inspect(&ckpt));
    if ckpt.is_intact() {
        Ok(())
    } else {
        Err(Error::Checksum(ckpt.checksum_failures.join(", ")))
    }
}
