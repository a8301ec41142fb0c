use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use powerlab::harness::{
    calibrate_waterfill, emit_plot_data, replay_manifest, run_ablation, run_comparison, run_training, ComparisonTable,
    ExperimentConfig,
};
use powerlab::Result;

#[derive(Debug, Parser)]
#[command(name = "powerlab", version, about = "Wireless power-allocation experiments")]
struct Cli {
    /// JSON config with optional `env`, `train`, `waterfill` and `experiment` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides `experiment.output_directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override any config field, e.g. `--set train.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured policies and write the comparison table.
    Compare,
    /// Train one DQN agent per seed and add its row to the comparison table.
    Train,
    /// Train with per-episode exponential ε decay at several rates.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.99, 0.98, 0.95, 0.90])]
        rates: Vec<f64>,
    },
    /// Sweep the water-filling power budget.
    CalibrateWf {
        #[arg(long, value_delimiter = ',', default_values_t = vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])]
        budgets: Vec<f64>,
    },
    /// Write plot-ready CSVs from existing artifacts in the output directory.
    EmitPlots,
    /// Re-run a training run from its manifest into the output directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for assignment in &cli.overrides {
        config.apply_override(assignment)?;
    }
    if let Some(seed) = cli.seed {
        config.experiment.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.experiment.output_directory = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_table(table: &ComparisonTable) {
    print!("{}", table.to_csv());
}

fn run(cli: &Cli) -> Result<()> {
    let config = build_config(cli)?;
    let out = &config.experiment.output_directory;
    match &cli.command {
        Command::Compare => print_table(&run_comparison(&config)?.table),
        Command::Train => {
            let artifacts = run_training(&config)?;
            for r in &artifacts.runs {
                println!(
                    "seed {}: oracle gap {:.4}, action match {:.3}, sum-rate {:.4}",
                    r.seed, r.oracle_gap.relative_gap, r.oracle_gap.action_match_fraction, r.report.throughput
                );
            }
            print_table(&artifacts.table);
        }
        Command::Ablate { rates } => {
            let report = run_ablation(&config, rates)?;
            println!("decay_rate,final_reward_mean,final_reward_std,reward_variance_mean");
            for a in &report.arms {
                println!(
                    "{},{},{},{}",
                    a.decay_rate, a.final_reward_mean, a.final_reward_std, a.reward_variance_mean
                );
            }
        }
        Command::CalibrateWf { budgets } => {
            let report = calibrate_waterfill(&config, budgets)?;
            println!("total_power,sum_rate");
            for p in &report.points {
                println!("{},{}", p.total_power, p.sum_rate);
            }
            println!("closest to {}: {} W", report.reference_sum_rate, report.closest_budget);
        }
        Command::EmitPlots => {
            let files = emit_plot_data(out)?;
            if let Some(path) = &files.training_curves {
                println!("{}", path.display());
            }
            println!("{}", files.per_user.display());
        }
        Command::Replay { manifest } => {
            let run = replay_manifest(manifest, out)?;
            println!("{}", run.metrics.display());
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
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}
