//! Experiment driver: training runs, the random-search baseline, parameter
//! sweeps, and the gradient-check release gate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cpmlho_cli::config::{apply_sweep_value, ExperimentConfig};
use cpmlho_cli::outputs::{
    echo_config, validate_csv, write_schedule, write_sensitivity, write_summary, SensitivityRow,
};
use cpmlho_core::gradcheck::{run_standard_suite, STANDARD_TOL};
use cpmlho_core::training::{random_search, train_cpmlho, RunLog, TrainFailure};

#[derive(Parser)]
#[command(name = "cpmlho", about = "Hyperparameter optimization experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with cutting-plane constrained inner steps and mixed-level
    /// outer steps.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Random-search baseline at matched budget.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One run per value of a config key; emits a combined sensitivity
    /// table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which config key to vary.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify every registered operation and the end-to-end hyperparameter
    /// gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Baseline {
            config,
            out,
            trials,
            seed,
        } => cmd_baseline(&config, &out, trials, seed),
        Command::Sweep {
            config,
            out,
            param,
            values,
            seed,
        } => cmd_sweep(&config, &out, &param, &values, seed),
        Command::Gradcheck { seed, out } => cmd_gradcheck(seed, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn prepare(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.experiment.seed = seed;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    echo_config(out, &config.to_toml()?)?;
    Ok(config)
}

fn handle_failure(out: &Path, failure: &TrainFailure) -> Result<()> {
    // Keep whatever schedule exists so diverged runs stay inspectable.
    write_schedule(&out.join("schedule.csv"), &failure.partial)?;
    bail!("training failed: {} (partial schedule retained)", failure.error);
}

fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = prepare(config_path, out, seed)?;
    let spec = config.model_spec();
    let data = config.load_data()?;
    let log: RunLog = match train_cpmlho(
        &config.train_config(),
        &spec,
        &config.lambda_inits(),
        &data,
    ) {
        Ok(log) => log,
        Err(failure) => return handle_failure(out, &failure),
    };
    let schedule = out.join("schedule.csv");
    let summary = out.join("summary.csv");
    write_schedule(&schedule, &log)?;
    write_summary(&summary, &log, None)?;
    validate_csv(&schedule, Some(log.records.len()), 0)?;
    validate_csv(&summary, Some(1), 2)?;
    let report = log.final_report.as_ref().expect("successful run");
    println!(
        "train: val_loss {:.6} val_acc {:.4} test_acc {:.4}",
        report.val_loss, report.val_accuracy, report.test_accuracy
    );
    Ok(())
}

fn cmd_baseline(config_path: &Path, out: &Path, trials: usize, seed: Option<u64>) -> Result<()> {
    let config = prepare(config_path, out, seed)?;
    let spec = config.model_spec();
    let data = config.load_data()?;
    let outcome = match random_search(&config.train_config(), &spec, &data, trials) {
        Ok(o) => o,
        Err(failure) => return handle_failure(out, &failure),
    };
    let schedule = out.join("schedule.csv");
    let summary = out.join("summary.csv");
    write_schedule(&schedule, &outcome.best)?;
    write_summary(
        &summary,
        &outcome.best,
        Some((&outcome.trials, outcome.best_trial)),
    )?;
    validate_csv(&schedule, Some(0), 0)?;
    validate_csv(&summary, Some(trials + 1), 2)?;
    let report = outcome.best.final_report.as_ref().expect("successful run");
    println!(
        "baseline: best trial {} val_loss {:.6} val_acc {:.4} test_acc {:.4}",
        outcome.best_trial, report.val_loss, report.val_accuracy, report.test_accuracy
    );
    Ok(())
}

fn cmd_sweep(
    config_path: &Path,
    out: &Path,
    param: &str,
    values: &[f64],
    seed: Option<u64>,
) -> Result<()> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let base = prepare(config_path, out, seed)?;
    // Validate the key before loading anything heavy.
    {
        let mut probe = base.clone();
        apply_sweep_value(&mut probe, param, values[0])?;
    }
    let data = base.load_data()?;

    // Independent runs over disjoint output subdirectories; results are
    // merged in input order.
    let results: Vec<Result<(RunLog, PathBuf)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .map(|&value| {
                let base = &base;
                let data = &data;
                let run_dir = out.join(format!("{param}_{value}"));
                scope.spawn(move || -> Result<(RunLog, PathBuf)> {
                    let mut config = base.clone();
                    apply_sweep_value(&mut config, param, value)?;
                    fs::create_dir_all(&run_dir)?;
                    echo_config(&run_dir, &config.to_toml()?)?;
                    let spec = config.model_spec();
                    let log = match train_cpmlho(
                        &config.train_config(),
                        &spec,
                        &config.lambda_inits(),
                        data,
                    ) {
                        Ok(log) => log,
                        Err(failure) => {
                            write_schedule(&run_dir.join("schedule.csv"), &failure.partial)?;
                            bail!("sweep value {value} failed: {}", failure.error);
                        }
                    };
                    write_schedule(&run_dir.join("schedule.csv"), &log)?;
                    write_summary(&run_dir.join("summary.csv"), &log, None)?;
                    Ok((log, run_dir))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep thread panicked"))
            .collect()
    });

    let mut rows = Vec::with_capacity(values.len());
    for (value, result) in values.iter().zip(results) {
        let (log, _) = result?;
        rows.push(SensitivityRow {
            param: param.to_string(),
            value: *value,
            log,
        });
    }
    let lambda_names = rows[0].log.lambda_names.clone();
    let sensitivity = out.join("sensitivity.csv");
    write_sensitivity(&sensitivity, &lambda_names, &rows)?;
    validate_csv(&sensitivity, Some(values.len()), 1)?;
    for row in &rows {
        let report = row.log.final_report.as_ref().expect("validated above");
        println!(
            "sweep {param}={}: val_loss {:.6} val_acc {:.4}",
            row.value, report.val_loss, report.val_accuracy
        );
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> Result<()> {
    // Deliberate-corruption hook for exercising the failure path end to end.
    let fault = std::env::var("CPMLHO_GRADCHECK_PERTURB").ok();
    let entries = run_standard_suite(seed, fault.as_deref())
        .map_err(|e| anyhow::anyhow!("gradient suite failed to run: {e}"))?;

    let mut failures = Vec::new();
    let mut report_lines = Vec::new();
    for e in &entries {
        let ok = e.report.passes(STANDARD_TOL);
        let status = if ok { "ok" } else { "FAIL" };
        println!(
            "gradcheck {:<24} max_rel_err {:>12.3e}  {}",
            e.name, e.report.max_rel_err, status
        );
        report_lines.push((e.name, e.report.max_rel_err, status));
        if !ok {
            failures.push(e.name);
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("gradcheck_report.csv"))?;
        w.write_record(["check", "max_rel_err", "status"])?;
        for (name, err, status) in &report_lines {
            w.write_record([name.to_string(), err.to_string(), status.to_string()])?;
        }
        w.flush()?;
    }
    if !failures.is_empty() {
        bail!("gradient checks failed: {}", failures.join(", "));
    }
    println!("gradcheck: all {} checks passed", entries.len());
    Ok(())
}
