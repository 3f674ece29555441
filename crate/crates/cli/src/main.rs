use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use updet_cli::commands::{cmd_attention, cmd_eval, cmd_train, cmd_transfer, thread_budget};
use updet_cli::config::parse_scenario;
use updet_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "updet",
    about = "Train, evaluate and inspect entity-transformer multi-agent value functions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `trainer.lr=0.001` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to resume, evaluate or transfer from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Team sizes as NxM (allies x enemies).
    #[arg(long, global = true)]
    scenario: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, or resume from --checkpoint.
    Train,
    /// Greedy evaluation of --checkpoint on --scenario.
    Eval {
        /// Defaults to trainer.test_episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Fine-tune --checkpoint on --scenario.
    Transfer,
    /// Export agent 0's grouped attention for every evaluation tick.
    Attention {
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out_dir={}", toml_string(&out.to_string_lossy())));
    }
    if let Some(ckpt) = &cli.checkpoint {
        overrides.push(format!(
            "checkpoint={}",
            toml_string(&ckpt.to_string_lossy())
        ));
    }
    if let Some(s) = &cli.scenario {
        let (a, e) = parse_scenario(s).map_err(CliError::Config)?;
        overrides.push(format!("scenario.n_ally={a}"));
        overrides.push(format!("scenario.n_enemy={e}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides).map_err(CliError::Config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    let threads = thread_budget();
    match &cli.command {
        Command::Train | Command::Transfer => {
            let summary = if matches!(cli.command, Command::Train) {
                cmd_train(&cfg, threads)?
            } else {
                cmd_transfer(&cfg, threads)?
            };
            for name in &summary.fresh_params {
                eprintln!("initialized fresh: {name}");
            }
            for r in &summary.records {
                println!(
                    "step {:>8}  win {:.3}  return {:.3}  len {:.1}  eps {:.3}",
                    r.env_step, r.win_rate, r.mean_return, r.ep_len, r.epsilon
                );
            }
            println!("final checkpoint: {}", summary.final_checkpoint.display());
        }
        Command::Eval { episodes } => {
            let episodes = episodes.unwrap_or(cfg.trainer.test_episodes);
            let s = cmd_eval(&cfg, episodes, threads)?;
            println!(
                "{}x{}: episodes {}  win_rate {}  mean_return {}  mean_len {}",
                cfg.scenario.n_ally,
                cfg.scenario.n_enemy,
                s.episodes,
                s.win_rate,
                s.mean_return,
                s.mean_len
            );
        }
        Command::Attention { episodes } => {
            let ticks = cmd_attention(&cfg, *episodes)?;
            println!(
                "wrote {} attention matrices to {}",
                ticks.len(),
                cfg.out_dir.join("attention").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
