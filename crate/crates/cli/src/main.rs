//! `corrdemo` command-line runner.
//!
//! Each subcommand runs one experiment and writes `results.csv`,
//! `summary.json`, `curves.json` and optional transcripts into the output
//! directory. The exit status is 0 when every pass flag is true, 1 when a
//! bound is violated and 2 on configuration or input errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use corrdemo::experiments::{parse_grid, run_experiment, ExperimentConfig, ExperimentError, THREADS_ENV};

#[derive(Parser, Debug)]
#[command(name = "corrdemo", version, about = "Learning from correct demonstrations: experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Online mistake counts under adversarial search.
    RunOnline(Flags),
    /// Online-to-batch expected loss against the log-size envelope.
    RunBatch(Flags),
    /// k-list learner upper bounds and revealing-adversary lower bounds.
    RunPassk(Flags),
    /// Likelihood-maximization failure instances.
    RunMleFailure(Flags),
    /// Overlap of likelihood maximizers and the uniform-support control.
    RunMleOverlap(Flags),
    /// Suboptimal demonstrators: weight monotonicity, regret, square-root bound.
    RunAgnostic(Flags),
    /// Planted lower-bound constructions.
    RunLowerBounds(Flags),
    /// Exact averages over the deterministic demonstrator prior.
    RunCloningReport(Flags),
    /// Mistakes against class size for several learners.
    Sweep(Flags),
    /// Generate or load an instance and validate it.
    ValidateInstance(Flags),
}

impl Command {
    fn parts(&self) -> (&'static str, &Flags) {
        match self {
            Command::RunOnline(f) => ("run-online", f),
            Command::RunBatch(f) => ("run-batch", f),
            Command::RunPassk(f) => ("run-passk", f),
            Command::RunMleFailure(f) => ("run-mle-failure", f),
            Command::RunMleOverlap(f) => ("run-mle-overlap", f),
            Command::RunAgnostic(f) => ("run-agnostic", f),
            Command::RunLowerBounds(f) => ("run-lower-bounds", f),
            Command::RunCloningReport(f) => ("run-cloning-report", f),
            Command::Sweep(f) => ("sweep", f),
            Command::ValidateInstance(f) => ("validate-instance", f),
        }
    }
}

/// Flags mirror the configuration fields and override a config file.
#[derive(Args, Debug, Default)]
struct Flags {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Instance spec, e.g. `majority_lb:d=33`, `random:S=64`, `file:path=inst.json`.
    #[arg(long)]
    instance: Option<String>,
    /// Learner: `alg1:realizable`, `alg1:agnostic`, `alg1:<a>,<b>`, `passk:k=<k>`, `majority`, `ci`.
    #[arg(long)]
    learner: Option<String>,
    /// Sample-size grid such as `1..128` or `1,2,4,8`.
    #[arg(long = "m", alias = "grid")]
    grid: Option<String>,
    /// Online horizon.
    #[arg(long = "T", alias = "rounds")]
    rounds: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delta: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    /// Comma-separated list, e.g. `0.1,0.25,1/2`.
    #[arg(long)]
    gamma: Option<String>,
    /// Comma-separated list of list sizes.
    #[arg(long)]
    k: Option<String>,
    /// Comma-separated list of lower-bound sizes.
    #[arg(long)]
    d: Option<String>,
    /// Rollouts per adversarial search.
    #[arg(long)]
    budget: Option<usize>,
    /// Variant selector: `supp`, `unif`, `overlap`, `positive` or `both`.
    #[arg(long)]
    which: Option<String>,
    /// Off-support mass of the suboptimal demonstrator.
    #[arg(long)]
    noise: Option<String>,
    /// Output directory; defaults to `results/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the environment variable or the core count.
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
    /// Save per-trial JSONL transcripts.
    #[arg(long)]
    transcripts: bool,
    /// Also write a standalone SVG figure.
    #[arg(long)]
    svg: bool,
}

fn list_of<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, ExperimentError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| ExperimentError::Config(format!("bad {what} value {s}"))))
        .collect()
}

fn build_config(experiment: &str, f: &Flags) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &f.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.experiment = experiment.to_string();
    if let Some(v) = &f.instance {
        cfg.instance = Some(v.clone());
    }
    if let Some(v) = &f.learner {
        cfg.learner = Some(v.clone());
    }
    if let Some(v) = &f.grid {
        cfg.grid = parse_grid(v)?;
    }
    if f.rounds.is_some() {
        cfg.rounds = f.rounds;
    }
    if let Some(v) = f.trials {
        cfg.trials = v;
    }
    if f.runs.is_some() {
        cfg.runs = f.runs;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = &f.delta {
        cfg.delta = v.clone();
    }
    if let Some(v) = &f.epsilon {
        cfg.epsilon = v.clone();
    }
    if let Some(v) = &f.gamma {
        cfg.gamma = list_of(v, "gamma")?;
    }
    if let Some(v) = &f.k {
        cfg.k = list_of(v, "k")?;
    }
    if let Some(v) = &f.d {
        cfg.d = list_of(v, "d")?;
    }
    if let Some(v) = f.budget {
        cfg.budget = v;
    }
    if let Some(v) = &f.which {
        cfg.which = Some(v.clone());
    }
    if let Some(v) = &f.noise {
        cfg.noise = v.clone();
    }
    if let Some(v) = &f.out {
        cfg.out = Some(v.clone());
    }
    if f.threads.is_some() {
        cfg.threads = f.threads;
    }
    cfg.transcripts |= f.transcripts;
    cfg.svg |= f.svg;
    Ok(cfg)
}

fn run(experiment: &str, flags: &Flags) -> Result<bool, ExperimentError> {
    let cfg = build_config(experiment, flags)?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("results").join(experiment));
    let output = run_experiment(&cfg)?;
    output.write(&out_dir, cfg.svg)?;
    println!(
        "{}: pass={} rows={} worst_slack={} audited={} disagreements={}",
        output.experiment,
        output.pass(),
        output.rows.len(),
        output.worst_slack().map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
        output.audit.comparisons,
        output.audit.disagreements
    );
    for row in output.failures().iter().take(10) {
        eprintln!(
            "violation: {} {} {}={} observed {} bound {}",
            row.learner, row.metric, row.param_name, row.param, row.observed, row.bound
        );
    }
    eprintln!("results written to {}", out_dir.display());
    Ok(output.pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, flags) = cli.command.parts();
    match run(experiment, flags) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
