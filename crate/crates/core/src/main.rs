use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use weightpath::envs::EnvId;
use weightpath::pipeline::{exit_code, run_stage, PipelineConfig, Stage};
use weightpath::tipl::TokenAnchor;
use weightpath::{Error, Result};

#[derive(Parser)]
#[command(name = "weightpath", version, about = "Collect, encode and forecast policy weight trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train PPO trials and write their weight trajectories.
    Collect(Overrides),
    /// Write synthetic quadratic-descent trajectories instead of PPO ones.
    CollectOracle(Overrides),
    /// Fit the SVD codec on the training trials.
    Encode(Overrides),
    /// Train the transformer on coded training trajectories.
    Train(Overrides),
    /// Forecast held-out trajectories and score the predictions.
    Evaluate(Overrides),
    /// Write the CSV table and JSON summary.
    Report(Overrides),
}

/// Flags override values from `--config`, which override the defaults.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvId>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// Codec rank.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Token frame: absolute or window.
    #[arg(long)]
    anchor: Option<TokenAnchor>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    batches_per_iter: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    prefix_len: Option<usize>,
    /// Forward prediction steps.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
}

macro_rules! set {
    ($o:expr, $($field:ident => $target:expr),+ $(,)?) => {
        $(if let Some(v) = $o.$field.clone() { $target = v; })+
    };
}

impl Overrides {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        set!(self,
            work_dir => c.work_dir,
            env => c.env,
            trials => c.trials,
            total_steps => c.total_steps,
            snapshot_every => c.snapshot_every,
            base_seed => c.base_seed,
            d => c.d,
            context_len => c.tipl.context_len,
            embed_dim => c.tipl.embed_dim,
            layers => c.tipl.layers,
            heads => c.tipl.heads,
            dropout => c.tipl.dropout,
            anchor => c.tipl.anchor,
            lr => c.tipl.lr,
            warmup_steps => c.tipl.warmup_steps,
            batch_size => c.tipl.batch_size,
            batches_per_iter => c.tipl.batches_per_iter,
            iters => c.tipl.iters,
            train_seed => c.train_seed,
            prefix_len => c.eval.prefix_len,
            k => c.eval.k,
            episodes => c.eval.episodes,
            eval_seed => c.eval.seed,
        );
        c.validate()?;
        Ok(c)
    }
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var("WEIGHTPATH_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("WEIGHTPATH_WORKERS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size worker pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_workers()?;
    let (stage, overrides) = match &cli.command {
        Command::Collect(o) => (Stage::Collect, o),
        Command::CollectOracle(o) => (Stage::CollectOracle, o),
        Command::Encode(o) => (Stage::Encode, o),
        Command::Train(o) => (Stage::Train, o),
        Command::Evaluate(o) => (Stage::Evaluate, o),
        Command::Report(o) => (Stage::Report, o),
    };
    let config = overrides.resolve()?;
    let outcome = run_stage(&config, stage).inspect_err(|_e| {
        eprintln!("stage {} failed", stage.name());
    })?;
    if outcome.skipped {
        println!("{}: up to date", stage.name());
    } else {
        for path in &outcome.outputs {
            println!("{}: wrote {}", stage.name(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
