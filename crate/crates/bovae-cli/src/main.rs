//! Command-line front end for the bag-of-vectors pipeline: data synthesis,
//! the four training stages, inference, evaluation, sweeps, and plot data.

use anyhow::Result;
use clap::{Parser, Subcommand};

use bovae_cli::config::{ExperimentConfig, Overrides};
use bovae_cli::synth::SyntheticTaskSpec;
use bovae_cli::{plots, stages, sweep, synth};

#[derive(Parser)]
#[command(name = "bovae", version, about = "Bag-of-vectors autoencoder pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/valid/test corpora for the configured task.
    SynthData,
    /// Pretrain the autoencoder on the train split.
    PretrainAe,
    /// Train the latent task head on frozen encodings.
    TrainHead,
    /// Train the latent mapping against the task objective.
    TrainMapping,
    /// Map a split through the trained pipeline and write predictions.
    Infer {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score predictions and append a row to the results table.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the configured sweep and select the best run on validation.
    Sweep,
    /// Emit scatter and loss-curve plot data from recorded results.
    PlotEmit,
}

fn check_split(split: &str) -> Result<()> {
    anyhow::ensure!(
        matches!(split, "train" | "valid" | "test"),
        "unknown split {split:?}; expected train, valid, or test"
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(&cli.overrides)?;
    match cli.command {
        Command::SynthData => {
            let spec = SyntheticTaskSpec::for_task(cfg.task);
            synth::synth_data(
                &spec,
                (cfg.train_size, cfg.val_size, cfg.test_size),
                cfg.seed,
                &cfg.data_dir,
            )?;
            println!(
                "wrote {} corpora ({}/{}/{}) to {}",
                cfg.task,
                cfg.train_size,
                cfg.val_size,
                cfg.test_size,
                cfg.data_dir.display()
            );
        }
        Command::PretrainAe => {
            let outcome = stages::pretrain_ae(&cfg)?;
            println!("{}", outcome.message);
        }
        Command::TrainHead => {
            let outcome = stages::train_head(&cfg)?;
            println!("{}", outcome.message);
        }
        Command::TrainMapping => {
            let outcome = stages::train_mapping(&cfg)?;
            println!("{}", outcome.message);
        }
        Command::Infer { split } => {
            check_split(&split)?;
            let outcome = stages::infer(&cfg, &split)?;
            println!("{}", outcome.message);
        }
        Command::Evaluate { split } => {
            check_split(&split)?;
            let summary = stages::evaluate(&cfg, &split)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Sweep => {
            let report = sweep::sweep(&cfg)?;
            println!(
                "swept {} runs; best {} by {} = {:?}",
                report.runs.len(),
                report.best.run_id,
                report.selection_metric,
                report.best.val
            );
        }
        Command::PlotEmit => {
            let points = plots::emit_scatter(&cfg.results_path(), &cfg.out_dir)?;
            let trails = plots::emit_loss_curves(&cfg.out_dir)?;
            println!("emitted {points} scatter points and {trails} loss trails");
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        // One line, machine-parsable, chain flattened into the message.
        let line = serde_json::json!({ "error": format!("{err:#}") });
        eprintln!("{line}");
        std::process::exit(1);
    }
}
