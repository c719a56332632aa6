//! Files written into run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use ecrt::metrics::MetricsReport;
use ecrt::pipeline::{CurvePoint, Evaluation, Runner, StageState};
use serde::Serialize;

pub const FAILED: &str = "FAILED";

#[derive(Debug, Default, Serialize)]
pub struct Status {
    pub ok: bool,
    pub command: String,
    pub config_hash: Option<String>,
    pub stages_completed: Vec<usize>,
    pub cells_total: Option<usize>,
    pub cells_failed: Option<usize>,
    pub failures: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct MetricsFile<'a> {
    pub config_hash: &'a str,
    pub variant: ecrt::pipeline::VariantKind,
    pub seed: u64,
    pub epochs: &'a BTreeMap<String, usize>,
    pub minority_classes: Vec<usize>,
    /// Mean F1 over the minority classes.
    pub minority_f1: f64,
    /// Mean of the per-class MMD diagnostics (absent without augmentation).
    pub mmd_mean: Option<f64>,
    pub report: &'a MetricsReport,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn mark_failed(dir: &Path, err: &anyhow::Error) -> Result<()> {
    fs::write(dir.join(FAILED), format!("{err:#}\n")).context("writing FAILED marker")
}

pub fn clear_failed(dir: &Path) -> Result<()> {
    match fs::remove_file(dir.join(FAILED)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "epoch", "split", "loss", "top1"])?;
    for p in curve {
        let split = serde_json::to_value(p.split)?;
        w.write_record([
            p.stage.number().to_string(),
            p.epoch.to_string(),
            split.as_str().unwrap_or_default().to_owned(),
            p.loss.to_string(),
            p.top1.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn minority_f1(report: &MetricsReport, minority: &[usize]) -> f64 {
    minority.iter().map(|&c| report.f1_per_class[c]).sum::<f64>() / minority.len().max(1) as f64
}

pub fn mmd_mean(report: &MetricsReport) -> Option<f64> {
    (!report.mmd.is_empty()).then(|| report.mmd.values().sum::<f64>() / report.mmd.len() as f64)
}

/// `metrics.json`, `per_class_f1.csv` and `sources.csv`.
pub fn write_evaluation(dir: &Path, runner: &Runner, state: &StageState, eval: &Evaluation) -> Result<()> {
    let cfg = runner.config();
    let minority = runner.data().minority_classes();
    let metrics = MetricsFile {
        config_hash: runner.config_hash(),
        variant: cfg.variant,
        seed: cfg.seed,
        epochs: &state.epochs,
        minority_f1: minority_f1(&eval.report, &minority),
        mmd_mean: mmd_mean(&eval.report),
        minority_classes: minority,
        report: &eval.report,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;

    let counts = runner.data().train.counts();
    let mut w = csv::Writer::from_path(dir.join("per_class_f1.csv"))?;
    w.write_record(["class", "frequency", "f1"])?;
    for (c, f1) in eval.report.f1_per_class.iter().enumerate() {
        w.write_record([c.to_string(), counts[c].to_string(), f1.to_string()])?;
    }
    w.flush()?;

    let r = &eval.representation;
    let mut w = csv::Writer::from_path(dir.join("sources.csv"))?;
    let mut header = vec!["row".to_owned(), "label".to_owned()];
    header.extend((0..r.cols()).map(|a| format!("s{a}")));
    w.write_record(&header)?;
    for (i, y) in eval.labels.iter().enumerate() {
        let mut rec = vec![i.to_string(), y.to_string()];
        rec.extend(r.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
