use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use netslice_core::agents::action_space_report;
use netslice_core::config::{ConfigError, ExperimentConfig, Resolved};
use netslice_core::experiment::{self, ExperimentError};
use netslice_core::metrics::{format_table, CurveKind, Format};

#[derive(Parser)]
#[command(name = "netslice", version, about = "Network slicing simulator with multi-agent DRL resource control")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seeds to run; overrides the config. Repeat or separate with commas.
    #[arg(long = "seed", alias = "seeds", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Run directory; defaults to `<output.dir>/<command>-<config stem>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<u64>,
    /// Metrics export format: `csv` or `json-lines`.
    #[arg(long)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured algorithm from scratch.
    Train(Common),
    /// Greedy evaluation of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate baselines and checkpoints on common seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Baseline names or checkpoint directories; defaults to the config's list.
        #[arg(long = "policy", value_delimiter = ',')]
        policies: Vec<String>,
        /// Adds a checkpoint to the compared policies.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Re-lay out a trained population for the config's slice count and keep training.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Joint action counts for DQN against MADDPG's per-agent dimensions.
    ReportActionSpace {
        #[arg(long, default_value_t = 3)]
        slices: usize,
        #[arg(long, default_value_t = 5)]
        levels: usize,
    },
}

struct Prepared {
    resolved: Resolved,
    seeds: Vec<u64>,
    out: PathBuf,
    episodes: Option<u64>,
}

fn prepare(c: &Common, command: &str) -> Result<Prepared, ExperimentError> {
    let mut resolved = ExperimentConfig::load(&c.config)?;
    if let Some(f) = c.format {
        resolved.config.output.format = f;
    }
    let seeds = if c.seeds.is_empty() { resolved.config.training.seeds.clone() } else { c.seeds.clone() };
    if seeds.is_empty() {
        return Err(ConfigError::new("training.seeds", "at least one seed is required").into());
    }
    let out = c.out.clone().unwrap_or_else(|| {
        let stem = c.config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        resolved.config.output.dir.join(format!("{command}-{stem}"))
    });
    Ok(Prepared { resolved, seeds, out, episodes: c.episodes })
}

fn report_training(out: &Path, summary: &experiment::TrainSummary) {
    for (seed, curve) in summary.seeds.iter().zip(&summary.curves) {
        let last = curve.iter().rev().find(|p| p.kind == CurveKind::Eval).or(curve.last());
        match last {
            Some(p) => println!("seed {seed}: episode {} reward {:.4}", p.episode, p.mean_reward),
            None => println!("seed {seed}: no training episodes"),
        }
    }
    println!("run directory: {}", out.display());
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.cmd {
        Command::Train(c) => {
            let p = prepare(&c, "train")?;
            let summary = experiment::cmd_train(&p.resolved, &p.out, &p.seeds, p.episodes)?;
            report_training(&p.out, &summary);
        }
        Command::Evaluate { common, checkpoint } => {
            let p = prepare(&common, "evaluate")?;
            let episodes = p.episodes.unwrap_or(p.resolved.config.training.eval_episodes);
            let res = experiment::cmd_evaluate(&p.resolved, &checkpoint, &p.seeds, episodes, Some(&p.out))?;
            print!("{}", format_table(&res.table));
        }
        Command::Compare { common, mut policies, checkpoint } => {
            let p = prepare(&common, "compare")?;
            if policies.is_empty() {
                policies = p.resolved.config.training.compare.clone();
            }
            policies.extend(checkpoint.iter().map(|c| c.display().to_string()));
            let episodes = p.episodes.unwrap_or(p.resolved.config.training.eval_episodes);
            let res = experiment::cmd_compare(&p.resolved, &policies, &p.seeds, episodes, Some(&p.out))?;
            print!("{}", format_table(&res.table));
        }
        Command::Transfer { common, checkpoint } => {
            let p = prepare(&common, "transfer")?;
            let summary = experiment::cmd_transfer(&p.resolved, &checkpoint, &p.out, &p.seeds, p.episodes)?;
            report_training(&p.out, &summary);
        }
        Command::ReportActionSpace { slices, levels } => {
            if slices == 0 || levels == 0 {
                return Err(ConfigError::new(if slices == 0 { "slices" } else { "levels" }, "must be positive").into());
            }
            let r = action_space_report(slices, levels);
            println!("{}", serde_json::to_string_pretty(&r).expect("report"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
