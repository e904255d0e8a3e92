//! CSV emission and post-run validation.
//!
//! Schedules carry one row per outer step; numbers are written with Rust's
//! default `f64` formatting (finite decimal literals that round-trip), so
//! identical runs produce byte-identical files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use cpmlho_core::training::{RunLog, TrialRecord};

pub fn write_schedule(path: &Path, log: &RunLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["step".to_string(), "epoch".to_string()];
    header.push("train_loss".into());
    header.push("val_loss".into());
    header.extend(log.lambda_names.iter().cloned());
    header.push("g".into());
    header.push("phi".into());
    w.write_record(&header)?;
    for r in &log.records {
        let mut row = vec![r.step.to_string(), r.epoch.to_string()];
        row.push(r.train_loss.to_string());
        row.push(r.val_loss.to_string());
        row.extend(r.lambdas.iter().map(|v| v.to_string()));
        row.push(r.gap.to_string());
        row.push(r.phi.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(
    path: &Path,
    log: &RunLog,
    trials: Option<(&[TrialRecord], usize)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec![
        "row".to_string(),
        "trial".to_string(),
        "val_loss".to_string(),
        "val_acc".to_string(),
        "test_acc".to_string(),
    ];
    header.extend(log.lambda_names.iter().cloned());
    w.write_record(&header)?;
    if let Some((trials, _)) = trials {
        for t in trials {
            let mut row = vec![
                "trial".to_string(),
                t.trial.to_string(),
                t.val_loss.to_string(),
                t.val_accuracy.to_string(),
                String::new(),
            ];
            row.extend(t.lambdas.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    let report = log
        .final_report
        .as_ref()
        .context("run has no final report")?;
    let label = if let Some((_, best)) = trials {
        vec!["best".to_string(), best.to_string()]
    } else {
        vec!["final".to_string(), String::new()]
    };
    let mut row = label;
    row.push(report.val_loss.to_string());
    row.push(report.val_accuracy.to_string());
    row.push(report.test_accuracy.to_string());
    row.extend(report.lambdas.iter().map(|v| v.to_string()));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

pub struct SensitivityRow {
    pub param: String,
    pub value: f64,
    pub log: RunLog,
}

pub fn write_sensitivity(path: &Path, lambda_names: &[String], rows: &[SensitivityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec![
        "param".to_string(),
        "value".to_string(),
        "val_loss".to_string(),
        "val_acc".to_string(),
        "test_acc".to_string(),
    ];
    header.extend(lambda_names.iter().cloned());
    w.write_record(&header)?;
    for row in rows {
        let report = row
            .log
            .final_report
            .as_ref()
            .context("sweep run has no final report")?;
        let mut rec = vec![
            row.param.clone(),
            row.value.to_string(),
            report.val_loss.to_string(),
            report.val_accuracy.to_string(),
            report.test_accuracy.to_string(),
        ];
        rec.extend(report.lambdas.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Re-parse an emitted CSV under its own schema: header present, fixed
/// column count, numeric cells finite.
pub fn validate_csv(path: &Path, expected_rows: Option<usize>, numeric_from: usize) -> Result<()> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("re-parsing {}", path.display()))?;
    let header_len = r.headers()?.len();
    let mut rows = 0usize;
    for record in r.records() {
        let record = record?;
        if record.len() != header_len {
            bail!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                rows + 1,
                record.len(),
                header_len
            );
        }
        for field in record.iter().skip(numeric_from) {
            if field.is_empty() {
                continue;
            }
            let v: f64 = field
                .parse()
                .with_context(|| format!("{}: non-numeric cell `{field}`", path.display()))?;
            if !v.is_finite() {
                bail!("{}: non-finite cell `{field}`", path.display());
            }
        }
        rows += 1;
    }
    if let Some(want) = expected_rows {
        if rows != want {
            bail!("{}: expected {want} data rows, found {rows}", path.display());
        }
    }
    Ok(())
}

pub fn echo_config(out_dir: &Path, toml_text: &str) -> Result<()> {
    fs::write(out_dir.join("config.toml"), toml_text)
        .with_context(|| format!("writing config echo into {}", out_dir.display()))?;
    Ok(())
}
