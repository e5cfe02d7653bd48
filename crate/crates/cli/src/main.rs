use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use forge::pipeline::{run_stage, RunConfig, Stage};

/// Influence-driven data mixture pipeline at desk scale.
#[derive(Parser, Debug)]
#[command(name = "forge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic multi-domain corpus.
    Synth,
    /// Read source corpora and record their statistics.
    Ingest,
    /// Build representative and capability-probing sets.
    Probes,
    /// Train one model per capability and keep its checkpoints.
    Capmodels,
    /// Score representative samples against the probes.
    Influence,
    /// Turn influence into per-source mixture weights.
    Mix,
    /// Leave-one-source-out ablations.
    Loo,
    /// Pretrain on the mixture, then run the filtering loop.
    Coevolve,
    /// RankMe sweep and NLL trajectories.
    Diag,
    /// Every stage from ingest to diag.
    Run,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        match self {
            Command::Synth => vec![Stage::Synth],
            Command::Ingest => vec![Stage::Ingest],
            Command::Probes => vec![Stage::Probes],
            Command::Capmodels => vec![Stage::Capmodels],
            Command::Influence => vec![Stage::Influence],
            Command::Mix => vec![Stage::Mix],
            Command::Loo => vec![Stage::Loo],
            Command::Coevolve => vec![Stage::Coevolve],
            Command::Diag => vec![Stage::Diag],
            Command::Run => Stage::PIPELINE.to_vec(),
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    for stage in cli.command.stages() {
        let manifest = run_stage(&cfg, stage).with_context(|| format!("stage {stage}"))?;
        println!("{stage}: {} outputs", manifest.outputs.len());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<forge::Error>()) {
        Some(forge::Error::MissingArtifact(_)) => 2,
        Some(forge::Error::Config { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
