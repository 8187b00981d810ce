use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crosslm::config::{GradcheckConfig, Mode, RunConfig};
use crosslm::{experiment, gradcheck, Error, Result};

#[derive(Parser)]
#[command(name = "crosslm", version, about = "Deterministic desk-scale simulator of collaborative SLM/LLM training")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration (optional for `gradcheck`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `run_dir` from the configuration.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Replace an existing run directory.
    #[arg(long, global = true)]
    force: bool,

    /// Overrides the master seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment mode for `run`; every configured mode when omitted.
    #[arg(long, global = true)]
    mode: Option<Mode>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the toy task, general corpus and client shards.
    GenData,
    /// Pre-train the language model and record its held-out perplexity.
    Pretrain,
    /// Execute one or all experiment modes.
    Run,
    /// Evaluate every executed mode and write report.json.
    Eval,
    /// Finite-difference check of the language-model loss gradients.
    Gradcheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let run_dir: Option<&Path> = cli.run_dir.as_deref();
    match cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            let dir = experiment::cmd_gen_data(&cfg, run_dir, cli.force)?;
            println!("data written to {}", dir.root().display());
        }
        Command::Pretrain => {
            let cfg = load_config(cli)?;
            let ppl = experiment::cmd_pretrain(&cfg, run_dir)?;
            println!("held-out perplexity before federation: {ppl:.4}");
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let modes = match cli.mode {
                Some(m) => vec![m],
                None => cfg.modes.clone(),
            };
            for m in modes {
                experiment::cmd_run(&cfg, run_dir, m)?;
                println!("mode {m} complete");
            }
        }
        Command::Eval => {
            let cfg = load_config(cli)?;
            let report = experiment::cmd_eval(&cfg, run_dir)?;
            print!("{}", report.table());
        }
        Command::Gradcheck => {
            let gc = match &cli.config {
                Some(_) => load_config(cli)?.gradcheck,
                None => GradcheckConfig::default(),
            };
            let report = gradcheck::run_gradcheck(&gc, None)?;
            print!("{}", report.summary());
            report.into_result()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.config.is_none() && !matches!(cli.command, Command::Gradcheck) {
        eprintln!("error: --config <CONFIG> is required for this command");
        eprintln!("status: failed (exit 1): usage");
        return ExitCode::from(1);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(&cli) {
        Ok(()) => {
            eprintln!("status: ok");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("status: failed (exit {code}): {e}");
            ExitCode::from(code as u8)
        }
    }
}
