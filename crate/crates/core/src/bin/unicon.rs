use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unicon_core::cli::{cmd_ablate, cmd_generate, cmd_report, cmd_run, CommandOptions, RunError};
use unicon_core::config::{parse_config, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "unicon",
    version,
    about = "Noisy-label training with uniform clean-sample selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the noisy training set and the test set as CSV.
    Generate(Common),
    /// Train once and write metrics, checkpoint and summary.
    Run(Common),
    /// Train the full pipeline and three ablated arms.
    Ablate(Common),
    /// Flatten metrics CSVs under a directory into a long-format report.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write every SSL epoch's selection for both networks.
    #[arg(long)]
    export_selection: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or ablation directory; defaults to the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load(common: &Common) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            cmd_generate(&cfg)?;
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Run(c) => {
            let cfg = load(&c)?;
            let out = cmd_run(
                &cfg,
                &CommandOptions {
                    export_selection: c.export_selection,
                },
            )?;
            println!(
                "{}",
                serde_json::to_string(&out.summary).expect("summary serializes")
            );
        }
        Command::Ablate(c) => {
            let cfg = load(&c)?;
            for arm in cmd_ablate(
                &cfg,
                &CommandOptions {
                    export_selection: c.export_selection,
                },
            )? {
                println!(
                    "{:<15} last_acc {:.4} final_auc {}",
                    arm.arm,
                    arm.output.summary.last_acc,
                    arm.output
                        .summary
                        .final_auc
                        .map_or("-".to_string(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Report(r) => {
            let dir = match (r.out, r.config) {
                (Some(dir), _) => dir,
                (None, Some(path)) => parse_config(&path)?.output_dir,
                (None, None) => ExperimentConfig::default().output_dir,
            };
            let rows = cmd_report(&dir)?;
            println!(
                "wrote {} rows to {}",
                rows,
                dir.join("report.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
