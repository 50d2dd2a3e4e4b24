use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use tif_cli::config::ExperimentConfig;
use tif_cli::pipeline::{
    cmd_evaluate, cmd_gen_corpus, cmd_identify, cmd_report, cmd_train, cmd_unlearn, TrainRole,
};
use tif_cli::exit_code;
use tif_core::error::Result;

#[derive(Parser)]
#[command(
    name = "tif",
    about = "Targeted information forgetting laboratory",
    version,
    propagate_version = true
)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic author-biography corpus.
    GenCorpus,
    /// Train a model from scratch on the configured splits.
    Train {
        #[arg(long, value_enum)]
        role: Role,
    },
    /// Produce unwanted-word annotations for the forget split.
    Identify,
    /// Run the configured unlearning method from the original model.
    Unlearn,
    /// Evaluate unlearned checkpoints against the full protocol.
    Evaluate {
        /// Glob for checkpoint files (defaults to this config's own).
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Render the trade-off plot and summary table from the run CSV.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Original,
    Retained,
    Reinforce,
}

impl From<Role> for TrainRole {
    fn from(r: Role) -> Self {
        match r {
            Role::Original => TrainRole::Original,
            Role::Retained => TrainRole::Retained,
            Role::Reinforce => TrainRole::Reinforce,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().ok_or_else(|| {
        tif_core::error::Error::Config("/: --config PATH is required".into())
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenCorpus => {
            let path = cmd_gen_corpus(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Train { role } => {
            let path = cmd_train(&cfg, (*role).into())?;
            println!("wrote {}", path.display());
        }
        Command::Identify => {
            let path = cmd_identify(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Unlearn => {
            for path in cmd_unlearn(&cfg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Evaluate { checkpoint } => {
            let (csv, json) = cmd_evaluate(&cfg, checkpoint.as_deref())?;
            println!("wrote {}", csv.display());
            println!("wrote {}", json.display());
        }
        Command::Report => {
            let (svg, md) = cmd_report(&cfg)?;
            println!("wrote {}", svg.display());
            println!("wrote {}", md.display());
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
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
