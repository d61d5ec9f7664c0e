use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cotnav_cli::commands::{self, EvalAgent};
use cotnav_cli::experiment::Split;
use cotnav_cli::RunConfig;
use cotnav_core::Result;

#[derive(Parser)]
#[command(name = "cotnav", version, about = "Self-improving reasoning navigation lab")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "cotnav.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration to --config.
    Init,
    /// Generate worlds and episode splits.
    Worldgen,
    /// Generate reasoning labels, negatives and reflection samples.
    Labelgen,
    /// Train one stage; stage 2 continues from the stage-1 checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Roll out an agent on a split and score it.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// policy | oracle | stop
        #[arg(long, default_value = "policy")]
        agent: String,
        /// Also decode reasoning at every step.
        #[arg(long)]
        reasoning: bool,
    },
    /// Run the five component-ablation rows.
    Ablate {
        /// Seeds to run; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Merge stage reports into one loss-curve CSV.
    ExportCurves,
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    if let Command::Init = cli.command {
        std::fs::write(&cli.config, RunConfig::default().to_toml()?)?;
        return Ok(vec![cli.config]);
    }
    let cfg = RunConfig::load(&cli.config)?;
    match cli.command {
        Command::Init => unreachable!("handled above"),
        Command::Worldgen => commands::worldgen(&cfg),
        Command::Labelgen => commands::labelgen(&cfg),
        Command::Train { stage } => commands::train(&cfg, stage),
        Command::Eval { checkpoint, split, agent, reasoning } => commands::eval(
            &cfg,
            checkpoint.as_deref(),
            Split::parse(&split)?,
            EvalAgent::parse(&agent)?,
            reasoning,
        ),
        Command::Ablate { seeds } => commands::ablate(&cfg, &seeds),
        Command::ExportCurves => commands::export_curves(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = serde_json::json!({ "error": e.code(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
