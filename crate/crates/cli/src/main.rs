//! `ecrt`: dataset generation, staged runs, sweeps, evaluation and
//! checkpoint inspection.

mod artifacts;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use ecrt::augment::AugmentMode;
use ecrt::data::{dump_dataset, generate_extreme_toy, generate_toy, ExtremeSpec, Mixing, ToySpec};
use ecrt::objectives::ContrastiveKind;
use ecrt::pipeline::{load_checkpoint, save_checkpoint, ExperimentConfig, Runner, Stage, VariantKind};
use serde::de::DeserializeOwned;
use serde_json::json;

use artifacts::{clear_failed, mark_failed, write_curve, write_evaluation, write_json, Status};

#[derive(Parser)]
#[command(name = "ecrt", version, about = "Energy-based causal representation transfer for imbalanced classification")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset and write it as a binary dump.
    GenData(GenDataArgs),
    /// Run pipeline stages for one configuration.
    Run(RunArgs),
    /// Run a grid of configurations across seeds and aggregate the results.
    Sweep(sweep::SweepArgs),
    /// Evaluate a completed checkpoint.
    Eval(EvalArgs),
    /// Print a checkpoint summary as JSON.
    InspectCheckpoint {
        /// Checkpoint directory.
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyMixing {
    Henon,
    None,
}

#[derive(Args)]
#[command(group(ArgGroup::new("kind").required(true).args(["toy", "extreme"])))]
struct GenDataArgs {
    /// Seven-class toy with the given mixing map.
    #[arg(long, value_enum)]
    toy: Option<ToyMixing>,
    /// 1000 tightly clustered classes with a separate validation set.
    #[arg(long)]
    extreme: bool,
    /// Samples per class (default 2000 for the toy, 20 for the extreme toy).
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

/// Config file plus command-line overrides.
#[derive(Args, Clone, Default)]
pub struct Overrides {
    /// JSON experiment config (defaults apply to missing fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// erm | iw | ecrt | ecrt-multi
    #[arg(long, value_parser = parse_serde::<VariantKind>)]
    variant: Option<VariantKind>,
    /// gcl | fdv
    #[arg(long, value_parser = parse_serde::<ContrastiveKind>)]
    objective: Option<ContrastiveKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Augmentation strength.
    #[arg(long)]
    lambda: Option<f64>,
    /// Likelihood regularisation weight.
    #[arg(long)]
    rho: Option<f64>,
    /// nonparametric | parametric | oracle | feature-space
    #[arg(long, value_parser = parse_serde::<AugmentMode>)]
    augment_mode: Option<AugmentMode>,
    /// Epoch budget for every trained stage.
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                ExperimentConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(o) = self.objective {
            cfg.objective = o;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(r) = self.rho {
            cfg.rho = r;
        }
        if let Some(m) = self.augment_mode {
            cfg.augment.mode = m;
        }
        if let Some(e) = self.epochs {
            for t in [&mut cfg.training.pretrain, &mut cfg.training.demix, &mut cfg.training.refine] {
                t.epochs = e;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Stages to run, as a list (`1,2`) or a range (`3-4`); default all.
    #[arg(long)]
    stages: Option<String>,
    /// Checkpoint to resume from; defaults to the previous stage's checkpoint under --out.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory of the final stage.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config used for the run (e.g. its merged_config.json).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.command {
        Command::GenData(args) => gen_data(&args),
        Command::Run(args) => run(&args),
        Command::Sweep(args) => sweep::sweep(&args),
        Command::Eval(args) => eval(&args),
        Command::InspectCheckpoint { dir } => inspect(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    if let Some(mixing) = args.toy {
        let mut spec = ToySpec::seven_class();
        spec.mixing = match mixing {
            ToyMixing::Henon => Mixing::Henon,
            ToyMixing::None => Mixing::None,
        };
        if let Some(n) = args.per_class {
            let classes = spec.classes();
            spec = spec.with_counts(vec![n; classes]);
        }
        let ds = generate_toy(&spec, args.seed)?;
        let stem = args.out.join("toy.train");
        dump_dataset(&ds, &stem)?;
        println!("wrote {} rows to {}", ds.len(), stem.display());
    } else {
        let spec = ExtremeSpec { per_class: args.per_class.unwrap_or(20), ..ExtremeSpec::default() };
        let (train, validation) = generate_extreme_toy(&spec, args.seed)?;
        for (ds, name) in [(&train, "extreme.train"), (&validation, "extreme.validation")] {
            let stem = args.out.join(name);
            dump_dataset(ds, &stem)?;
            println!("wrote {} rows to {}", ds.len(), stem.display());
        }
    }
    Ok(())
}

/// Parse `1,2`, `3-4` or `2` into stages.
fn parse_stages(spec: &str) -> Result<Vec<Stage>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse::<usize>()?, b.trim().parse::<usize>()?),
            None => {
                let n = part.parse::<usize>()?;
                (n, n)
            }
        };
        for n in lo..=hi {
            out.push(Stage::from_number(n)?);
        }
    }
    if out.is_empty() {
        bail!("no stages given");
    }
    if out.windows(2).any(|w| w[1].number() != w[0].number() + 1) {
        bail!("stages must be consecutive, got {spec}");
    }
    Ok(out)
}

fn checkpoint_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join("checkpoints").join(format!("stage{}", stage.number()))
}

fn run(args: &RunArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    clear_failed(&args.out)?;
    let mut status = Status { command: "run".into(), ..Status::default() };
    let result = run_inner(args, &mut status);
    if let Err(e) = &result {
        status.error = Some(format!("{e:#}"));
        mark_failed(&args.out, e)?;
    }
    status.ok = result.is_ok();
    write_json(&args.out.join("status.json"), &status)?;
    result
}

fn run_inner(args: &RunArgs, status: &mut Status) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    write_json(&args.out.join("merged_config.json"), &cfg)?;
    status.config_hash = Some(cfg.hash());
    let runner = Runner::new(cfg)?;
    let stages = match &args.stages {
        Some(s) => parse_stages(s)?,
        None => runner.stages().to_vec(),
    };
    let mut state = match stages[0].previous() {
        None => runner.initial_state(),
        Some(prev) => {
            let dir = args.resume.clone().unwrap_or_else(|| checkpoint_dir(&args.out, prev));
            load_checkpoint(&dir, Some(runner.config_hash()))
                .with_context(|| format!("resuming from {}", dir.display()))?
        }
    };
    let mut curve = Vec::new();
    let mut result = Ok(());
    for &stage in &stages {
        match runner.run_stage(stage, state.clone(), &mut curve) {
            Ok(next) => {
                state = next;
                save_checkpoint(&state, &checkpoint_dir(&args.out, stage))?;
                status.stages_completed.push(stage.number());
            }
            Err(e) => {
                result = Err(anyhow::Error::new(e).context(format!("stage {} ({}) failed", stage.number(), stage.name())));
                break;
            }
        }
    }
    write_curve(&args.out.join("learning_curve.csv"), &curve)?;
    result?;
    if state.stage == runner.stages().last().copied() {
        let evaluation = runner.evaluate(&state)?;
        write_evaluation(&args.out, &runner, &state, &evaluation)?;
        let r = &evaluation.report;
        println!("top1 {:.4}  nll {:.4}  macro-F1 {:.4}", r.top1, r.nll, r.macro_f1);
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let runner = Runner::new(ExperimentConfig::from_json(&text)?)?;
    let state = load_checkpoint(&args.checkpoint, Some(runner.config_hash()))?;
    let evaluation = runner.evaluate(&state)?;
    fs::create_dir_all(&args.out)?;
    write_evaluation(&args.out, &runner, &state, &evaluation)?;
    let r = &evaluation.report;
    println!("top1 {:.4}  nll {:.4}  macro-F1 {:.4}", r.top1, r.nll, r.macro_f1);
    Ok(())
}

fn inspect(dir: &Path) -> Result<()> {
    let state = load_checkpoint(dir, None)?;
    let store = &state.store;
    let params: Vec<_> = store
        .ids()
        .map(|id| {
            let t = store.get(id);
            json!({
                "name": store.name(id),
                "shape": t.shape(),
                "frozen": store.is_frozen(id),
                "l2": t.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        })
        .collect();
    let tensors: Vec<_> = state.tensors.iter().map(|(k, t)| json!({ "name": k, "shape": t.shape() })).collect();
    let optimizers: serde_json::Map<_, _> =
        state.optimizers.iter().map(|(k, o)| (k.clone(), json!({ "step": o.step, "lr": o.config.lr }))).collect();
    let summary = json!({
        "stage": state.stage.map(|s| s.number()),
        "config_hash": state.config_hash,
        "epochs": state.epochs,
        "optimizers": optimizers,
        "params": params,
        "tensors": tensors,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists_and_ranges() {
        assert_eq!(parse_stages("1,2").unwrap(), [Stage::Pretrain, Stage::Demix]);
        assert_eq!(parse_stages("3-4").unwrap(), [Stage::Augment, Stage::Refine]);
        assert_eq!(parse_stages("2").unwrap(), [Stage::Demix]);
        assert!(parse_stages("1,3").is_err());
        assert!(parse_stages("0").is_err());
        assert!(parse_stages("").is_err());
    }
}
