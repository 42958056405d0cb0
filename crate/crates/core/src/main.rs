use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nearsense::harness::{self, ExperimentConfig};
use nearsense::par::Exec;
use nearsense::Error;

/// Fusion-aware near-sensor filtering experiments.
#[derive(Debug, Parser)]
#[command(name = "nearsense", version)]
struct Cli {
    /// TOML experiment config. Built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set generator.rho=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train server, near-sensor, uni-modal and edge models for every seed.
    TrainAll,
    /// Data efficiency vs quality loss curves for both filter families.
    Tradeoff,
    /// Energy breakdown per FoI prevalence and pipeline.
    Energy,
    /// Score-injected vs baseline edge models across size ratios.
    Compact,
    /// Resolve and check the config, then print its hash and TOML.
    ValidateConfig,
}

fn exec_for(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let exec = exec_for(cli.sequential);
    let out = cfg.output_dir.display();
    match cli.command {
        Command::TrainAll => {
            let manifest = harness::cmd_train_all(&cfg, exec)?;
            println!(
                "trained {} seed(s) into {out} (config {})",
                cfg.seeds.len(),
                manifest.config_hash
            );
        }
        Command::Tradeoff => {
            let report = harness::cmd_tradeoff(&cfg, exec)?;
            println!("data_efficiency,quality_loss_fusion_aware,quality_loss_unimodal,ratio");
            for r in &report.summary {
                let show = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:.2},{},{},{}",
                    r.data_efficiency,
                    show(r.quality_loss_fusion_aware),
                    show(r.quality_loss_unimodal),
                    show(r.ratio)
                );
            }
        }
        Command::Energy => {
            let report = harness::cmd_energy(&cfg, exec)?;
            println!("foi_prevalence,pipeline,total_joules,savings_ratio");
            for s in &report.summary {
                println!(
                    "{},{},{:.6},{:.2}",
                    s.foi_prevalence,
                    s.pipeline.name(),
                    s.total,
                    s.savings_ratio
                );
            }
        }
        Command::Compact => {
            let report = harness::cmd_compact(&cfg, exec)?;
            println!("size_ratio,params,f1_with_scores,f1_baseline");
            for r in &report.rows {
                println!(
                    "{},{},{:.4},{:.4}",
                    r.size_ratio, r.params, r.f1_with_scores, r.f1_baseline
                );
            }
        }
        Command::ValidateConfig => {
            println!("# config hash {}", cfg.hash());
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
