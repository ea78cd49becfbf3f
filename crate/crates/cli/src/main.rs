use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cubedagger::envs::{DisturbanceSpec, Task};
use cubedagger_cli::config::{parse_seeds, ExperimentConfig};
use cubedagger_cli::evaluate_checkpoint;
use cubedagger_cli::runner::{median, run_matrix};
use cubedagger_cli::serve::TeleopServer;

#[derive(Parser)]
#[command(name = "cubedagger", version, about = "Interactive imitation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the (condition, seed) matrix and write metrics, CSVs and checkpoints.
    Run(RunArgs),
    /// Evaluate a checkpoint under the disturbance model.
    Eval(EvalArgs),
    /// Serve the live teleoperation loop over a websocket.
    Teleop(TeleopArgs),
}

#[derive(Args)]
struct Overrides {
    /// TOML configuration file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Condition name, comma-separated list, or "all".
    #[arg(long, alias = "conditions")]
    condition: Option<String>,
    /// Seed count ("21" means 0..21) or comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
}

impl Overrides {
    fn apply(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(task) = &self.task {
            config.task = task.clone();
        }
        if let Some(c) = &self.condition {
            config.conditions = vec![c.clone()];
        }
        if let Some(s) = &self.seeds {
            config.seeds = parse_seeds(s)?;
        }
        if let Some(e) = self.episodes {
            config.episodes = e;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on another task than the one trained on.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, default_value_t = 20)]
    rollouts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable the disturbance.
    #[arg(long, conflicts_with_all = ["probability", "magnitude"])]
    clean: bool,
    #[arg(long)]
    probability: Option<f64>,
    #[arg(long)]
    magnitude: Option<f64>,
}

#[derive(Args)]
struct TeleopArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    port: Option<u16>,
    /// Interface to bind.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn run(args: RunArgs) -> Result<bool> {
    let mut config = args.overrides.apply()?;
    if let Some(out) = args.out {
        config.out = out;
    }
    config.validate()?;
    let out = config.out.clone();
    let report = run_matrix(&config, &out)?;

    println!("{:<8} {:>5} {:>12} {:>12} {:>10}", "cond", "runs", "retention", "robustness", "diff");
    for condition in &report.config.conditions {
        let rows: Vec<_> = report
            .results
            .iter()
            .filter(|r| r.condition.as_str() == condition)
            .collect();
        let ret: Vec<f64> = rows.iter().map(|r| r.retention).collect();
        let rob: Vec<f64> = rows.iter().map(|r| r.robustness).collect();
        let diff: Vec<f64> = rows.iter().map(|r| r.mean_diff).collect();
        println!(
            "{:<8} {:>5} {:>12.3} {:>12.3} {:>10.4}",
            condition,
            rows.len(),
            median(&ret),
            median(&rob),
            median(&diff)
        );
    }
    println!("(medians over seeds; outputs in {})", out.display());
    for f in &report.failures {
        eprintln!("FAILED {} {} seed {}: {}", f.task, f.condition, f.seed, f.error);
    }
    Ok(report.failures.is_empty())
}

fn eval(args: EvalArgs) -> Result<()> {
    let task = args.task.as_deref().map(str::parse::<Task>).transpose()?;
    let disturbance = if args.clean {
        Some(DisturbanceSpec::none())
    } else if args.probability.is_some() || args.magnitude.is_some() {
        let base = task.map(|t| t.disturbance()).unwrap_or(DisturbanceSpec {
            probability: 0.05,
            magnitude: 1.0,
        });
        Some(DisturbanceSpec {
            probability: args.probability.unwrap_or(base.probability),
            magnitude: args.magnitude.unwrap_or(base.magnitude),
        })
    } else {
        None
    };
    let report = evaluate_checkpoint(&args.checkpoint, task, disturbance, args.rollouts, args.seed)?;
    println!(
        "{} {} (after {} episodes), disturbance p={} m={}",
        report.task,
        report.condition,
        report.episode,
        report.disturbance.probability,
        report.disturbance.magnitude
    );
    println!(
        "score {:.3} ± {:.3} over {} rollouts (normalized {:.3})",
        report.evaluation.mean,
        report.evaluation.std,
        report.evaluation.scores.len(),
        report.task.reference().normalize(report.evaluation.mean)
    );
    Ok(())
}

fn teleop(args: TeleopArgs) -> Result<()> {
    let config = args.overrides.apply()?;
    let port = args.port.unwrap_or(config.teleop.port);
    let session = config.teleop_config()?;
    let addr: SocketAddr = format!("{}:{port}", args.host)
        .parse()
        .context("parsing bind address")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let server = TeleopServer::start(session, addr).await?;
        println!("teleop bridge on ws://{}/ws (ctrl-c to stop)", server.addr());
        server.run_until_ctrl_c().await
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Teleop(a) => teleop(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
