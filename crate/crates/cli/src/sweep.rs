//! Grid runs over one config axis, executed on a bounded worker pool.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use ecrt::pipeline::{DatasetConfig, ExperimentConfig, Runner};
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{clear_failed, mark_failed, minority_f1, mmd_mean, write_curve, write_evaluation, write_json, Status};
use crate::{parse_serde, Overrides};

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Lambda,
    MinoritySize,
    PerClassCount,
    Mode,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values along the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Comma-separated seeds per cell (default: the config seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::MinoritySize => "minority-size",
            Self::PerClassCount => "per-class-count",
            Self::Mode => "mode",
        }
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, mut cfg: ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let count = || value.parse::<usize>().with_context(|| format!("{} value {value:?} is not a count", self.name()));
        match self {
            Self::Lambda => cfg.lambda = value.parse().with_context(|| format!("lambda value {value:?}"))?,
            Self::Mode => cfg.augment.mode = parse_serde(value).map_err(anyhow::Error::msg)?,
            Self::MinoritySize => {
                let n = count()?;
                match &mut cfg.dataset {
                    DatasetConfig::Toy { spec, .. } => {
                        let max = spec.counts.iter().copied().max().unwrap_or(0);
                        if spec.counts.iter().all(|&c| c == max) {
                            bail!("toy counts are balanced; set minority classes below the majority count first");
                        }
                        spec.counts.iter_mut().filter(|c| **c < max).for_each(|c| *c = n);
                    }
                    DatasetConfig::Extreme { spec } => spec.per_class = n,
                    DatasetConfig::Mnist { minority, .. } => *minority = n,
                    DatasetConfig::Dump { .. } => bail!("cannot resize a dumped dataset"),
                }
            }
            Self::PerClassCount => {
                let n = count()?;
                match &mut cfg.dataset {
                    DatasetConfig::Toy { spec, .. } => {
                        let max = spec.counts.iter().copied().max().unwrap_or(0);
                        spec.counts.iter_mut().filter(|c| **c == max).for_each(|c| *c = n);
                    }
                    DatasetConfig::Extreme { spec } => spec.per_class = n,
                    DatasetConfig::Mnist { majority, .. } => *majority = n,
                    DatasetConfig::Dump { .. } => bail!("cannot resize a dumped dataset"),
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CellSummary {
    pub top1: f64,
    pub nll: f64,
    pub macro_f1: f64,
    pub minority_f1: f64,
    pub mmd_mean: Option<f64>,
}

struct Cell {
    value: String,
    seed: u64,
    dir: PathBuf,
}

fn run_cell(base: &ExperimentConfig, axis: Axis, cell: &Cell) -> Result<CellSummary> {
    fs::create_dir_all(&cell.dir)?;
    clear_failed(&cell.dir)?;
    let result = (|| {
        let mut cfg = axis.apply(base.clone(), &cell.value)?;
        cfg.seed = cell.seed;
        write_json(&cell.dir.join("merged_config.json"), &cfg)?;
        let runner = Runner::new(cfg)?;
        let out = runner.run()?;
        write_curve(&cell.dir.join("learning_curve.csv"), &out.curve)?;
        write_evaluation(&cell.dir, &runner, &out.state, &out.evaluation)?;
        let r = &out.evaluation.report;
        Ok(CellSummary {
            top1: r.top1,
            nll: r.nll,
            macro_f1: r.macro_f1,
            minority_f1: minority_f1(r, &runner.data().minority_classes()),
            mmd_mean: mmd_mean(r),
        })
    })();
    if let Err(e) = &result {
        mark_failed(&cell.dir, e)?;
    }
    result
}

/// Mean and standard error (NaN below two samples).
fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn fmt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = args.overrides.resolve()?;
    let seeds = if args.seeds.is_empty() { vec![base.seed] } else { args.seeds.clone() };
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("merged_config.json"), &base)?;
    // Reject bad axis values before any cell starts.
    for v in &args.values {
        args.axis.apply(base.clone(), v)?;
    }
    let cells: Vec<Cell> = args
        .values
        .iter()
        .flat_map(|v| {
            seeds.iter().map(move |&seed| Cell {
                value: v.clone(),
                seed,
                dir: cell_dir(&args.out, args.axis, v, seed),
            })
        })
        .collect();
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<Result<CellSummary>> = pool.install(|| cells.par_iter().map(|c| run_cell(&base, args.axis, c)).collect());

    let mut w = csv::Writer::from_path(args.out.join("cells.csv"))?;
    w.write_record(["value", "seed", "ok", "top1", "nll", "macro_f1", "minority_f1", "mmd_mean", "error"])?;
    for (cell, res) in cells.iter().zip(&results) {
        let (ok, s, err) = match res {
            Ok(s) => ("true", Some(s.clone()), String::new()),
            Err(e) => ("false", None, format!("{e:#}")),
        };
        w.write_record([
            cell.value.clone(),
            cell.seed.to_string(),
            ok.to_owned(),
            fmt(s.as_ref().map(|s| s.top1)),
            fmt(s.as_ref().map(|s| s.nll)),
            fmt(s.as_ref().map(|s| s.macro_f1)),
            fmt(s.as_ref().map(|s| s.minority_f1)),
            fmt(s.as_ref().and_then(|s| s.mmd_mean)),
            err,
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(args.out.join("summary.csv"))?;
    w.write_record(["axis", "value", "metric", "mean", "stderr", "n", "failed"])?;
    type Getter = fn(&CellSummary) -> Option<f64>;
    let metrics: [(&str, Getter); 5] = [
        ("top1", |s| Some(s.top1)),
        ("nll", |s| Some(s.nll)),
        ("macro_f1", |s| Some(s.macro_f1)),
        ("minority_f1", |s| Some(s.minority_f1)),
        ("mmd_mean", |s| s.mmd_mean),
    ];
    for v in &args.values {
        let in_cell: Vec<&Result<CellSummary>> =
            cells.iter().zip(&results).filter(|(c, _)| &c.value == v).map(|(_, r)| r).collect();
        let failed = in_cell.iter().filter(|r| r.is_err()).count();
        for (name, get) in metrics {
            let xs: Vec<f64> = in_cell.iter().filter_map(|r| r.as_ref().ok()).filter_map(get).collect();
            let (mean, se) = if xs.is_empty() { (f64::NAN, f64::NAN) } else { mean_stderr(&xs) };
            w.write_record([
                args.axis.name().to_owned(),
                v.clone(),
                name.to_owned(),
                mean.to_string(),
                se.to_string(),
                xs.len().to_string(),
                failed.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let failures: Vec<String> = cells
        .iter()
        .zip(&results)
        .filter_map(|(c, r)| r.as_ref().err().map(|e| format!("{}={} seed={}: {e:#}", args.axis.name(), c.value, c.seed)))
        .collect();
    let status = Status {
        ok: failures.is_empty(),
        command: "sweep".into(),
        config_hash: Some(base.hash()),
        cells_total: Some(cells.len()),
        cells_failed: Some(failures.len()),
        failures: failures.clone(),
        ..Status::default()
    };
    write_json(&args.out.join("status.json"), &status)?;
    println!("{} of {} cells completed; summary in {}", cells.len() - failures.len(), cells.len(), args.out.join("summary.csv").display());
    if !failures.is_empty() {
        bail!("{} sweep cells failed:\n{}", failures.len(), failures.join("\n"));
    }
    Ok(())
}

fn cell_dir(out: &Path, axis: Axis, value: &str, seed: u64) -> PathBuf {
    let safe: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || "-.+".contains(c) { c } else { '_' }).collect();
    out.join("cells").join(format!("{}={safe}", axis.name())).join(format!("seed={seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecrt::augment::AugmentMode;

    #[test]
    fn axes_modify_the_config() {
        let base = ExperimentConfig::default();
        assert_eq!(Axis::Lambda.apply(base.clone(), "0.01").unwrap().lambda, 0.01);
        assert_eq!(Axis::Mode.apply(base.clone(), "parametric").unwrap().augment.mode, AugmentMode::Parametric);
        assert!(Axis::Mode.apply(base.clone(), "bogus").is_err());
        // The default toy is balanced, so there is no minority to resize.
        assert!(Axis::MinoritySize.apply(base.clone(), "20").is_err());
        let cfg = Axis::PerClassCount.apply(base, "300").unwrap();
        let DatasetConfig::Toy { spec, .. } = &cfg.dataset else { panic!("toy expected") };
        assert_eq!(spec.counts, vec![300; 7]);
        let imbalanced = Axis::MinoritySize
            .apply(
                ExperimentConfig {
                    dataset: DatasetConfig::Toy {
                        spec: spec.clone().with_counts(vec![300, 300, 300, 300, 300, 50, 50]),
                        train_fraction: 0.8,
                        test_per_class: 0,
                    },
                    ..ExperimentConfig::default()
                },
                "10",
            )
            .unwrap();
        let DatasetConfig::Toy { spec, .. } = &imbalanced.dataset else { panic!("toy expected") };
        assert_eq!(spec.counts, vec![300, 300, 300, 300, 300, 10, 10]);
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
        assert!(mean_stderr(&[1.0]).1.is_nan());
    }
}
