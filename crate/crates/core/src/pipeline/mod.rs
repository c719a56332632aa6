//! The four training stages (pre-training, de-mixing, source augmentation,
//! source-space refinement), the ERM and IW baselines, and checkpoints.
//!
//! Parameters live in one [`ParamStore`] under fixed prefixes. Each stage
//! freezes everything and unfreezes only what it trains, so frozen values
//! enter the tape as constants and cannot move.

mod checkpoint;
mod config;
mod train;
mod unbiased;

use std::borrow::Cow;
use std::path::PathBuf;

use rand::seq::index;

pub use checkpoint::{load_checkpoint, save_checkpoint, StageState};
pub use config::{
    AugmentSettings, DatasetConfig, EncoderConfig, ExperimentConfig, Stage, StageTraining, TrainingConfig,
    VariantKind,
};
pub use train::{CurvePoint, CurveSplit, FitOutcome, GRAD_CLIP};
pub use unbiased::{RiskEstimate, UnbiasednessCheck, UnbiasednessReport};

use crate::augment::{AugmentContext, AugmentMode, AugmentPlan, SourceSet};
use crate::data::{
    apply_step_imbalance, balanced_subset, generate_extreme_toy, generate_toy, generate_toy_split, load_dataset,
    load_mnist_dir, train_val_split, Dataset, ImbalanceSpec, Split, ToySpec,
};
use crate::error::{config, usage, Error, Result};
use crate::flow::{MafFlow, PriorMode, SourcePrior};
use crate::metrics::{class_conditional_decorrelation, classification_metrics, mmd, MetricsReport, MmdConfig};
use crate::nets::{FdvCritic, GclCritic, Mlp, MlpSpec};
use crate::objectives::{
    augmented_refinement_loss, cross_entropy, importance_weights, regularized_demixing_loss, AugmentationTerm,
    ContrastiveKind, Critic,
};
use crate::rng::{derive_seed, label_id, stream, Rng};
use crate::tensor::{ParamStore, Tape, Tensor};
use train::{fit, optimizer, EpochEval};

pub const ENCODER: &str = "encoder";
pub const FEATURE_PREDICTOR: &str = "feat_pred";
pub const FLOW: &str = "flow";
pub const PRIOR: &str = "prior";
pub const CRITIC: &str = "critic";
pub const SOURCE_PREDICTOR: &str = "src_pred";

const SYNTHETIC: &str = "synthetic/";
const TRACE: &str = "trace/decorrelation";
/// Rows per side when estimating MMD diagnostics.
const MMD_ROWS: usize = 200;

/// Train, validation and (optional) test sets of one run.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Dataset,
    /// Rows for the final report; validation is used when absent.
    pub test: Option<Dataset>,
    /// Generator with known ground truth, when there is one.
    pub toy: Option<ToySpec>,
}

impl PreparedData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = cfg.seed;
        match &cfg.dataset {
            DatasetConfig::Toy { spec, train_fraction, test_per_class } => {
                let (train, validation) = train_val_split(&generate_toy(spec, seed)?, *train_fraction, seed)?;
                let test = match *test_per_class {
                    0 => None,
                    n => {
                        let test_spec = spec.clone().with_counts(vec![n; spec.classes()]);
                        Some(generate_toy_split(&test_spec, seed, Split::Test)?)
                    }
                };
                Ok(Self { train, validation, test, toy: Some(spec.clone()) })
            }
            DatasetConfig::Extreme { spec } => {
                let (train, validation) = generate_extreme_toy(spec, seed)?;
                Ok(Self { train, validation, test: None, toy: Some(spec.toy_spec(seed)?) })
            }
            DatasetConfig::Mnist { dir, minority_classes, majority, minority, validation_per_class } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os("ECRT_MNIST_DIR")
                        .map(PathBuf::from)
                        .ok_or_else(|| Error::Config("no MNIST directory: set dataset.dir or ECRT_MNIST_DIR".into()))?,
                };
                let (full_train, full_test) = load_mnist_dir(&dir)?;
                let spec = ImbalanceSpec::step(
                    full_train.classes,
                    minority_classes,
                    *majority,
                    *minority,
                    *validation_per_class,
                )?;
                let train = apply_step_imbalance(&full_train, &spec, seed)?;
                let validation =
                    balanced_subset(&full_test, *validation_per_class, seed)?.with_split(Split::Validation);
                Ok(Self { train, validation, test: None, toy: None })
            }
            DatasetConfig::Dump { train, validation } => {
                Ok(Self { train: load_dataset(train)?, validation: load_dataset(validation)?, test: None, toy: None })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let parts = [Some(&self.train), Some(&self.validation), self.test.as_ref()];
        for ds in parts.into_iter().flatten() {
            ds.validate()?;
            if ds.classes != self.train.classes || ds.dim() != self.train.dim() {
                return config("train, validation and test sets disagree on classes or feature width");
            }
        }
        if self.validation.is_empty() {
            return config("validation set is empty");
        }
        Ok(())
    }

    pub fn eval_set(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.validation)
    }

    /// Classes with the largest training count.
    pub fn majority_classes(&self) -> Vec<usize> {
        let counts = self.train.counts();
        let max = counts.iter().copied().max().unwrap_or(0);
        (0..counts.len()).filter(|&c| counts[c] == max).collect()
    }

    /// Classes below the largest training count; every class when balanced.
    pub fn minority_classes(&self) -> Vec<usize> {
        let counts = self.train.counts();
        let max = counts.iter().copied().max().unwrap_or(0);
        let minority: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] < max).collect();
        if minority.is_empty() {
            (0..counts.len()).collect()
        } else {
            minority
        }
    }
}

/// Network structure; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Option<Mlp>,
    pub feature_predictor: Mlp,
    pub flow: MafFlow,
    pub prior: SourcePrior,
    pub critic: Critic,
    pub source_predictor: Mlp,
}

impl Model {
    /// Build every component, each from its own seeded stream.
    pub fn build(cfg: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<(Self, ParamStore)> {
        let seed = cfg.seed;
        let mut store = ParamStore::new();
        let (encoder, dim) = match &cfg.encoder {
            EncoderConfig::Identity => (None, input_dim),
            EncoderConfig::Mlp { hidden, output } => {
                let spec = MlpSpec::new(input_dim, hidden, *output);
                (Some(Mlp::new(&mut store, ENCODER, &spec, &mut stream(seed, "init.encoder"))?), *output)
            }
        };
        let head = MlpSpec::new(dim, &cfg.predictor_hidden, classes);
        let feature_predictor = Mlp::new(&mut store, FEATURE_PREDICTOR, &head, &mut stream(seed, "init.feat_pred"))?;
        let flow = MafFlow::new(&mut store, FLOW, dim, &cfg.flow, &mut stream(seed, "init.flow"))?;
        let mode = match cfg.variant {
            VariantKind::EcrtMulti => PriorMode::PerClass,
            _ => PriorMode::SharedStandard,
        };
        let prior = SourcePrior::new(&mut store, PRIOR, mode, dim, classes)?;
        let mut rng = stream(seed, "init.critic");
        let critic = match cfg.objective {
            ContrastiveKind::Gcl => Critic::Gcl(GclCritic::new(&mut store, CRITIC, classes, dim, &cfg.critic, &mut rng)?),
            ContrastiveKind::Fdv => Critic::Fdv(FdvCritic::new(&mut store, CRITIC, classes, dim, &cfg.critic, &mut rng)?),
        };
        let source_predictor = Mlp::new(&mut store, SOURCE_PREDICTOR, &head, &mut stream(seed, "init.src_pred"))?;
        Ok((Self { encoder, feature_predictor, flow, prior, critic, source_predictor }, store))
    }

    /// `e(x)`.
    pub fn features(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match &self.encoder {
            Some(e) => e.eval(store, x),
            None => Ok(x.clone()),
        }
    }

    /// `f(e(x))`.
    pub fn sources(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.flow.apply(store, &self.features(store, x)?)?.0)
    }
}

/// Final evaluation of a completed run.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// What the final predictor sees for each evaluation row: sources for
    /// ECRT, features for the baselines and the feature-space mode.
    pub representation: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub evaluation: Evaluation,
    pub curve: Vec<CurvePoint>,
    pub state: StageState,
}

/// Executes the stages of one configured run.
#[derive(Clone, Debug)]
pub struct Runner {
    cfg: ExperimentConfig,
    hash: String,
    data: PreparedData,
    model: Model,
    init: ParamStore,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = PreparedData::load(&cfg)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: ExperimentConfig, data: PreparedData) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let classes = data.train.classes;
        if cfg.majority_only_pretrain && !cfg.variant.is_baseline() && classes <= 2 {
            return config(format!("majority-only pre-training needs more than two classes, got {classes}"));
        }
        let (model, init) = Model::build(&cfg, data.train.dim(), classes)?;
        Ok(Self { hash: cfg.hash(), cfg, data, model, init })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Stages this variant runs, in order.
    pub fn stages(&self) -> &'static [Stage] {
        if self.cfg.variant.is_baseline() {
            &Stage::ALL[..1]
        } else {
            &Stage::ALL
        }
    }

    pub fn initial_state(&self) -> StageState {
        StageState {
            stage: None,
            config_hash: self.hash.clone(),
            store: self.init.clone(),
            optimizers: Default::default(),
            epochs: Default::default(),
            tensors: Default::default(),
        }
    }

    /// Augmentation mode after variant defaults are applied.
    pub fn augment_mode(&self) -> AugmentMode {
        match (self.cfg.variant, self.cfg.augment.mode) {
            (VariantKind::EcrtMulti, AugmentMode::Nonparametric) => AugmentMode::Parametric,
            (_, mode) => mode,
        }
    }

    fn check_state(&self, state: &StageState) -> Result<()> {
        if state.config_hash != self.hash {
            return Err(Error::Integrity(format!(
                "state was produced by config {}, this run uses {}",
                state.config_hash, self.hash
            )));
        }
        let same = state.store.len() == self.init.len()
            && state.store.ids().zip(self.init.ids()).all(|(a, b)| state.store.name(a) == self.init.name(b));
        if !same {
            return Err(Error::Integrity("checkpoint parameters do not match the model layout".into()));
        }
        Ok(())
    }

    /// Run one stage on top of the state left by the previous one.
    pub fn run_stage(&self, stage: Stage, mut state: StageState, curve: &mut Vec<CurvePoint>) -> Result<StageState> {
        if !self.stages().contains(&stage) {
            return config(format!("variant {:?} runs only stage 1", self.cfg.variant));
        }
        self.check_state(&state)?;
        state.require(stage.previous())?;
        let epochs = match stage {
            Stage::Pretrain => self.pretrain(&mut state, curve)?,
            Stage::Demix => self.demix(&mut state, curve)?,
            Stage::Augment => self.augment(&mut state)?,
            Stage::Refine => self.refine(&mut state, curve)?,
        };
        state.store.freeze_all(true);
        state.epochs.insert(stage.name().to_owned(), epochs);
        state.stage = Some(stage);
        log::info!("stage {} ({}) done after {epochs} epochs", stage.number(), stage.name());
        Ok(state)
    }

    /// All stages of the variant followed by evaluation.
    pub fn run(&self) -> Result<RunOutput> {
        let mut curve = Vec::new();
        let mut state = self.initial_state();
        for &stage in self.stages() {
            state = self.run_stage(stage, state, &mut curve)?;
        }
        let evaluation = self.evaluate(&state)?;
        Ok(RunOutput { evaluation, curve, state })
    }

    fn pretrain(&self, state: &mut StageState, curve: &mut Vec<CurvePoint>) -> Result<usize> {
        let cfg = &self.cfg;
        let model = &self.model;
        let baseline = cfg.variant.is_baseline();
        let store = &mut state.store;
        store.freeze_all(true);
        if model.encoder.is_none() && !baseline {
            // Nothing trained here would reach the later stages.
            return Ok(0);
        }
        store.freeze_prefix(ENCODER, false);
        store.freeze_prefix(FEATURE_PREDICTOR, false);
        let (train, val): (Cow<Dataset>, Cow<Dataset>) = if !baseline && cfg.majority_only_pretrain {
            let keep = self.data.majority_classes();
            (Cow::Owned(self.data.train.filter_classes(&keep)), Cow::Owned(self.data.validation.filter_classes(&keep)))
        } else {
            (Cow::Borrowed(&self.data.train), Cow::Borrowed(&self.data.validation))
        };
        let weights = match cfg.variant {
            VariantKind::Iw => Some(importance_weights(&train.counts())?),
            _ => None,
        };
        let logits = |store: &ParamStore, x: &Tensor| model.feature_predictor.eval(store, &model.features(store, x)?);
        let settings = cfg.training.pretrain;
        let mut opt = state.optimizers.remove(Stage::Pretrain.name()).unwrap_or_else(|| optimizer(&settings));
        let out = fit(
            Stage::Pretrain,
            &settings,
            &[ENCODER],
            cfg.seed,
            train.len(),
            store,
            &mut opt,
            curve,
            |tape, store, idx, _| {
                let x = tape.constant(train.features.select_rows(idx));
                let z = match &model.encoder {
                    Some(e) => e.forward(tape, store, x, None)?,
                    None => x,
                };
                let out = model.feature_predictor.forward(tape, store, z, None)?;
                let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                cross_entropy(tape, out, &y, weights.as_deref())
            },
            |store, _| {
                let v = classification_metrics(&logits(store, &val.features)?, &val.labels)?;
                let t = classification_metrics(&logits(store, &train.features)?, &train.labels)?;
                Ok(EpochEval { val_loss: v.nll, val_top1: Some(v.top1), train_top1: Some(t.top1) })
            },
        )?;
        state.optimizers.insert(Stage::Pretrain.name().to_owned(), opt);
        Ok(out.epochs)
    }

    fn demix(&self, state: &mut StageState, curve: &mut Vec<CurvePoint>) -> Result<usize> {
        let cfg = &self.cfg;
        let model = &self.model;
        let store = &mut state.store;
        store.freeze_all(true);
        for prefix in [FLOW, PRIOR, CRITIC] {
            store.freeze_prefix(prefix, false);
        }
        // The encoder is evaluated once in inference mode, so no gradient reaches it.
        let z_train = model.features(store, &self.data.train.features)?;
        let z_val = model.features(store, &self.data.validation.features)?;
        model.flow.standardize_input(store, &z_train)?;
        let labels = &self.data.train.labels;
        let settings = cfg.training.demix;
        let mut opt = state.optimizers.remove(Stage::Demix.name()).unwrap_or_else(|| optimizer(&settings));
        let mut trace = Vec::new();
        let out = fit(
            Stage::Demix,
            &settings,
            &[FLOW],
            cfg.seed,
            labels.len(),
            store,
            &mut opt,
            curve,
            |tape, store, idx, rng| {
                let z = tape.constant(z_train.select_rows(idx));
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                Ok(regularized_demixing_loss(tape, store, cfg.rho, &model.flow, &model.prior, &model.critic, z, &y, rng)?
                    .total)
            },
            |store, epoch| {
                let (s, _) = model.flow.apply(store, &z_train)?;
                trace.push((epoch, class_conditional_decorrelation(&s, labels)?));
                let val_loss = self.demix_validation_loss(store, &z_val)?;
                Ok(EpochEval { val_loss, ..EpochEval::default() })
            },
        )?;
        state.optimizers.insert(Stage::Demix.name().to_owned(), opt);
        let flat: Vec<f64> = trace.iter().flat_map(|&(e, v)| [e as f64, v]).collect();
        state.tensors.insert(TRACE.to_owned(), Tensor::matrix(trace.len(), 2, flat)?);
        Ok(out.epochs)
    }

    /// Regularised de-mixing loss over shuffled validation batches.
    fn demix_validation_loss(&self, store: &ParamStore, z_val: &Tensor) -> Result<f64> {
        let labels = &self.data.validation.labels;
        let mut order: Vec<usize> = (0..labels.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut stream(self.cfg.seed, "demix.validation.order"));
        let mut rng = stream(self.cfg.seed, "demix.validation.steps");
        let (mut total, mut rows) = (0.0, 0usize);
        for batch in order.chunks(self.cfg.training.demix.batch_size).filter(|b| b.len() >= 2) {
            let mut tape = Tape::inference();
            let z = tape.constant(z_val.select_rows(batch));
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let m = &self.model;
            let loss =
                regularized_demixing_loss(&mut tape, store, self.cfg.rho, &m.flow, &m.prior, &m.critic, z, &y, &mut rng)?;
            total += tape.value(loss.total).item() * batch.len() as f64;
            rows += batch.len();
        }
        if rows == 0 {
            return usage("validation set needs at least two rows for the de-mixing loss");
        }
        Ok(total / rows as f64)
    }

    fn augment(&self, state: &mut StageState) -> Result<usize> {
        state.tensors.retain(|k, _| !k.starts_with(SYNTHETIC));
        if self.cfg.lambda == 0.0 {
            return Ok(0);
        }
        let store = &state.store;
        let train = &self.data.train;
        let sources = self.model.sources(store, &train.features)?;
        let settings = &self.cfg.augment;
        let plan = AugmentPlan {
            mode: self.augment_mode(),
            count: settings.count.unwrap_or_else(|| train.counts().into_iter().max().unwrap_or(0)),
            seed: derive_seed(self.cfg.seed, &[label_id("augment")]),
            eps_sigma: settings.eps_sigma,
            without_replacement: settings.without_replacement,
        };
        let by_class = train.class_indices();
        for c in self.data.minority_classes() {
            let set = SourceSet::new(c, sources.select_rows(&by_class[c]), &self.hash);
            let holdout = match plan.mode {
                AugmentMode::Oracle => Some(self.oracle_pool(store, c)?),
                _ => None,
            };
            let ctx = AugmentContext {
                holdout: holdout.as_ref(),
                flow: Some((&self.model.flow, store)),
                prior: (self.cfg.variant == VariantKind::EcrtMulti).then_some((&self.model.prior, store)),
            };
            let synthetic = plan.generate(&set, ctx)?;
            state.tensors.insert(format!("{SYNTHETIC}{c:06}"), synthetic);
        }
        Ok(0)
    }

    /// Sources of fresh ground-truth rows of class `c`.
    fn oracle_pool(&self, store: &ParamStore, c: usize) -> Result<SourceSet> {
        let Some(spec) = &self.data.toy else {
            return config("oracle augmentation needs a generator with known ground truth");
        };
        let mut counts = vec![0; spec.classes()];
        counts[c] = self.cfg.augment.oracle_pool;
        let fresh = generate_toy_split(
            &spec.clone().with_counts(counts),
            derive_seed(self.cfg.seed, &[label_id("oracle")]),
            Split::Test,
        )?;
        Ok(SourceSet::new(c, self.model.sources(store, &fresh.features)?, &self.hash))
    }

    /// Input of the final predictor for raw rows `x`.
    fn representation(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if self.cfg.variant.is_baseline() || self.augment_mode() == AugmentMode::FeatureSpace {
            self.model.features(store, x)
        } else {
            self.model.sources(store, x)
        }
    }

    fn refine(&self, state: &mut StageState, curve: &mut Vec<CurvePoint>) -> Result<usize> {
        let cfg = &self.cfg;
        let model = &self.model;
        let train = &self.data.train;
        let val = &self.data.validation;
        let (synthetic, synthetic_labels) = synthetic_sets(state)?;
        if cfg.lambda > 0.0 && synthetic.rows() == 0 {
            return usage("augmentation strength is positive but stage 3 produced no synthetic sources");
        }
        let store = &mut state.store;
        store.freeze_all(true);
        store.freeze_prefix(SOURCE_PREDICTOR, false);
        let x_train = self.representation(store, &train.features)?;
        let x_val = self.representation(store, &val.features)?;
        let minority = self.data.minority_classes();
        let real_idx: Vec<usize> = (0..train.len()).filter(|&i| minority.contains(&train.labels[i])).collect();
        let real = x_train.select_rows(&real_idx);
        let real_labels: Vec<usize> = real_idx.iter().map(|&i| train.labels[i]).collect();
        let weights = if cfg.weighted_refine { Some(importance_weights(&train.counts())?) } else { None };
        let settings = cfg.training.refine;
        let mut opt = state.optimizers.remove(Stage::Refine.name()).unwrap_or_else(|| optimizer(&settings));
        let pred = &model.source_predictor;
        let out = fit(
            Stage::Refine,
            &settings,
            &[],
            cfg.seed,
            train.len(),
            store,
            &mut opt,
            curve,
            |tape, store, idx, rng| {
                let xb = tape.constant(x_train.select_rows(idx));
                let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                if cfg.lambda == 0.0 {
                    return augmented_refinement_loss(tape, store, 0.0, pred, xb, &y, weights.as_deref(), None);
                }
                let si = sample_rows(rng, synthetic.rows(), settings.batch_size);
                let ri = sample_rows(rng, real.rows(), settings.batch_size);
                let (syn, real_b) = (synthetic.select_rows(&si), real.select_rows(&ri));
                let syn_y: Vec<usize> = si.iter().map(|&i| synthetic_labels[i]).collect();
                let real_y: Vec<usize> = ri.iter().map(|&i| real_labels[i]).collect();
                let aug = AugmentationTerm { real: &real_b, real_labels: &real_y, synthetic: &syn, synthetic_labels: &syn_y };
                augmented_refinement_loss(tape, store, cfg.lambda, pred, xb, &y, weights.as_deref(), Some(aug))
            },
            |store, _| {
                let v = classification_metrics(&pred.eval(store, &x_val)?, &val.labels)?;
                let t = classification_metrics(&pred.eval(store, &x_train)?, &train.labels)?;
                Ok(EpochEval { val_loss: v.nll, val_top1: Some(v.top1), train_top1: Some(t.top1) })
            },
        )?;
        state.optimizers.insert(Stage::Refine.name().to_owned(), opt);
        Ok(out.epochs)
    }

    /// Metrics of the final predictor on the evaluation set.
    pub fn evaluate(&self, state: &StageState) -> Result<Evaluation> {
        self.check_state(state)?;
        let last = *self.stages().last().expect("at least one stage");
        state.require(Some(last))?;
        let store = &state.store;
        let eval = self.data.eval_set();
        let representation = self.representation(store, &eval.features)?;
        let predictor =
            if self.cfg.variant.is_baseline() { &self.model.feature_predictor } else { &self.model.source_predictor };
        let mut report = classification_metrics(&predictor.eval(store, &representation)?, &eval.labels)?;
        if let Some(trace) = state.tensors.get(TRACE) {
            report.decorrelation_trace = (0..trace.rows()).map(|i| (trace.get(i, 0) as usize, trace.get(i, 1))).collect();
        }
        let by_class = eval.class_indices();
        let cfg = MmdConfig { sigma: self.cfg.mmd_sigma };
        for (key, synthetic) in state.tensors.range(SYNTHETIC.to_owned()..) {
            let Some(c) = key.strip_prefix(SYNTHETIC).and_then(|c| c.parse::<usize>().ok()) else { break };
            let real: Vec<usize> = by_class[c].iter().copied().take(MMD_ROWS).collect();
            if real.is_empty() || synthetic.rows() == 0 {
                continue;
            }
            let syn: Vec<usize> = (0..synthetic.rows().min(MMD_ROWS)).collect();
            let value = mmd(&synthetic.select_rows(&syn), &representation.select_rows(&real), cfg)?;
            report.mmd.insert(format!("class_{c}"), value);
        }
        Ok(Evaluation { report, representation, labels: eval.labels.clone() })
    }
}

/// All synthetic rows stored by stage 3 and their labels.
fn synthetic_sets(state: &StageState) -> Result<(Tensor, Vec<usize>)> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for (key, t) in state.tensors.range(SYNTHETIC.to_owned()..) {
        let Some(c) = key.strip_prefix(SYNTHETIC) else { break };
        let c: usize = c.parse().map_err(|_| Error::Integrity(format!("bad synthetic set name {key}")))?;
        labels.extend(std::iter::repeat_n(c, t.rows()));
        parts.push(t);
    }
    if parts.is_empty() {
        return Ok((Tensor::zeros(&[0, 0]), labels));
    }
    Ok((Tensor::vstack(&parts)?, labels))
}

/// `k` distinct row indices, or all of them when `k >= n`.
fn sample_rows(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        (0..n).collect()
    } else {
        index::sample(rng, n, k).into_vec()
    }
}
