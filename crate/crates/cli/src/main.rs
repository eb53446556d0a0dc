use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use srlstm_cli::commands;
use srlstm_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "srlstm", version, about = "Pedestrian trajectory prediction with state refinement")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Held-out scene for training, evaluated scene otherwise.
    #[arg(long, global = true)]
    scene: Option<String>,
    /// Ablation preset, 0 (plain LSTM) to 9.
    #[arg(long, global = true)]
    variant: Option<u32>,
    /// Preprocessing preset, 1 to 4.
    #[arg(long, global = true)]
    preproc: Option<u32>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Leave-one-out folds trained in parallel.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    limit_batches: Option<usize>,
    /// Refinement iterations.
    #[arg(long = "L", global = true)]
    iterations: Option<usize>,
    /// Dataset directory (default: $SRLSTM_DATA_ROOT).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, resample and window the scenes into the cache.
    Prepare,
    /// Train a model and write the best-validation checkpoint.
    Train,
    /// Evaluate a checkpoint: report CSV plus per-pedestrian traces.
    Eval {
        /// Replace predictions with the ground truth.
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Write predicted trajectories for a scene.
    Predict {
        #[arg(long)]
        limit_windows: Option<usize>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_grad_bug: Option<String>,
    },
    /// Dump neuron, motion-gate and attention statistics.
    Introspect {
        #[arg(long)]
        limit_windows: Option<usize>,
        /// Entries kept per neuron and gate element.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Leave-one-out evaluation of several variants.
    Ablation {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        variants: Vec<u32>,
    },
    /// Write the synthetic stand-in scenes to a directory.
    Synth {
        dir: PathBuf,
    },
}

fn flags(o: &Opts) -> RunConfig {
    RunConfig {
        test_scene: o.scene.clone(),
        variant: o.variant,
        preproc: o.preproc,
        seed: o.seed,
        jobs: o.jobs,
        out_dir: o.out.clone(),
        epochs: o.epochs,
        limit_batches: o.limit_batches,
        iterations: o.iterations,
        data_root: o.data_root.clone(),
        checkpoint: o.checkpoint.clone(),
        ..RunConfig::default()
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Synth { dir } = &cli.command {
        return commands::synth_data(dir);
    }
    let file = match &cli.opts.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut merged = file.merge(flags(&cli.opts));
    if let Command::Introspect { top_k: Some(k), .. } = &cli.command {
        merged.top_k = Some(*k);
    }
    let cfg = merged.resolve()?;
    match cli.command {
        Command::Prepare => {
            cfg.write_to(&cfg.out_dir)?;
            commands::prepare(&cfg).map(drop)
        }
        Command::Train => commands::train(&cfg).map(drop),
        Command::Eval { oracle } => commands::eval(&cfg, oracle).map(drop),
        Command::Predict { limit_windows } => {
            let path = commands::predict(&cfg, limit_windows)?;
            eprintln!("predictions written to {}", path.display());
            Ok(())
        }
        Command::Gradcheck { inject_grad_bug } => commands::gradcheck(&cfg, inject_grad_bug.as_deref()).map(drop),
        Command::Introspect { limit_windows, .. } => commands::introspect_cmd(&cfg, limit_windows).map(drop),
        Command::Ablation { variants } => commands::ablation(&cfg, &variants).map(drop),
        Command::Synth { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
