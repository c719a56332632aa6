use ecrt::augment::AugmentMode;
use ecrt::data::{Mixing, ToySpec};
use ecrt::flow::FlowSpec;
use ecrt::nets::CriticSpec;
use ecrt::objectives::ContrastiveKind;
use ecrt::pipeline::{
    load_checkpoint, save_checkpoint, CurveSplit, DatasetConfig, EncoderConfig, ExperimentConfig, Runner, Stage,
    StageState, StageTraining, TrainingConfig, VariantKind, ENCODER, FEATURE_PREDICTOR, FLOW, SOURCE_PREDICTOR,
};
use ecrt::rng::{derive_seed, indexed_stream, label_id};
use ecrt::tensor::ParamStore;
use ecrt::Error;

fn small(counts: Vec<usize>, variant: VariantKind, objective: ContrastiveKind) -> ExperimentConfig {
    let stage = StageTraining { epochs: 3, patience: 3, batch_size: 64, lr: 1e-3, warmup_epochs: 0, cosine_decay: false };
    ExperimentConfig {
        dataset: DatasetConfig::Toy {
            spec: ToySpec::seven_class().with_counts(counts),
            train_fraction: 0.8,
            test_per_class: 0,
        },
        variant,
        objective,
        seed: 11,
        encoder: EncoderConfig::Mlp { hidden: vec![8], output: 2 },
        flow: FlowSpec { blocks: 2, hidden: 16, layers: 1 },
        critic: CriticSpec { embed_dim: 4, hidden: vec![8], ..CriticSpec::default() },
        lambda: 0.1,
        training: TrainingConfig { pretrain: stage, demix: stage, refine: stage },
        ..ExperimentConfig::default()
    }
}

fn imbalanced() -> Vec<usize> {
    vec![120, 120, 120, 120, 120, 20, 20]
}

fn prefix_values(store: &ParamStore, prefix: &str) -> Vec<Vec<f64>> {
    store.ids_with_prefix(prefix).map(|id| store.get(id).data().to_vec()).collect()
}

#[test]
fn frozen_components_do_not_move() {
    let runner = Runner::new(small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Fdv)).unwrap();
    let mut curve = Vec::new();
    let s1 = runner.run_stage(Stage::Pretrain, runner.initial_state(), &mut curve).unwrap();
    let s2 = runner.run_stage(Stage::Demix, s1.clone(), &mut curve).unwrap();
    let s3 = runner.run_stage(Stage::Augment, s2.clone(), &mut curve).unwrap();
    let s4 = runner.run_stage(Stage::Refine, s3.clone(), &mut curve).unwrap();

    assert_ne!(prefix_values(&runner.initial_state().store, ENCODER), prefix_values(&s1.store, ENCODER));
    for later in [&s2, &s3, &s4] {
        assert_eq!(prefix_values(&s1.store, ENCODER), prefix_values(&later.store, ENCODER));
        assert_eq!(prefix_values(&s1.store, FEATURE_PREDICTOR), prefix_values(&later.store, FEATURE_PREDICTOR));
    }
    assert_ne!(prefix_values(&s1.store, FLOW), prefix_values(&s2.store, FLOW));
    assert_eq!(prefix_values(&s2.store, FLOW), prefix_values(&s4.store, FLOW));
    assert_eq!(prefix_values(&s1.store, SOURCE_PREDICTOR), prefix_values(&s3.store, SOURCE_PREDICTOR));
    assert_ne!(prefix_values(&s3.store, SOURCE_PREDICTOR), prefix_values(&s4.store, SOURCE_PREDICTOR));
}

#[test]
fn runs_are_bit_reproducible() {
    for objective in [ContrastiveKind::Gcl, ContrastiveKind::Fdv] {
        let cfg = small(imbalanced(), VariantKind::Ecrt, objective);
        let a = Runner::new(cfg.clone()).unwrap().run().unwrap();
        let b = Runner::new(cfg).unwrap().run().unwrap();
        assert_eq!(
            serde_json::to_string(&a.evaluation.report).unwrap(),
            serde_json::to_string(&b.evaluation.report).unwrap()
        );
        assert_eq!(a.state, b.state);
        assert_eq!(a.curve, b.curve);
    }
}

#[test]
fn erm_on_balanced_data_equals_stage_one() {
    let balanced = vec![60; 7];
    let erm = Runner::new(small(balanced.clone(), VariantKind::Erm, ContrastiveKind::Fdv)).unwrap();
    assert_eq!(erm.stages(), &[Stage::Pretrain]);
    let out = erm.run().unwrap();

    let ecrt = Runner::new(small(balanced, VariantKind::Ecrt, ContrastiveKind::Fdv)).unwrap();
    let s1 = ecrt.run_stage(Stage::Pretrain, ecrt.initial_state(), &mut Vec::new()).unwrap();
    for prefix in [ENCODER, FEATURE_PREDICTOR] {
        assert_eq!(prefix_values(&out.state.store, prefix), prefix_values(&s1.store, prefix));
    }
}

#[test]
fn resuming_from_checkpoints_matches_a_full_run() {
    let cfg = small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Gcl);
    let runner = Runner::new(cfg.clone()).unwrap();
    let full = runner.run().unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let mut curve = Vec::new();
    let mut state = runner.initial_state();
    for stage in [Stage::Pretrain, Stage::Demix] {
        state = runner.run_stage(stage, state, &mut curve).unwrap();
    }
    save_checkpoint(&state, tmp.path()).unwrap();

    let resumed_runner = Runner::new(cfg).unwrap();
    let mut state = load_checkpoint(tmp.path(), Some(resumed_runner.config_hash())).unwrap();
    for stage in [Stage::Augment, Stage::Refine] {
        state = resumed_runner.run_stage(stage, state, &mut curve).unwrap();
    }
    assert_eq!(state, full.state);
    let report = resumed_runner.evaluate(&state).unwrap().report;
    assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&full.evaluation.report).unwrap());
}

#[test]
fn stages_must_run_in_order() {
    let runner = Runner::new(small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Fdv)).unwrap();
    let s1 = runner.run_stage(Stage::Pretrain, runner.initial_state(), &mut Vec::new()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&s1, tmp.path()).unwrap();
    let loaded = load_checkpoint(tmp.path(), None).unwrap();
    let err = runner.run_stage(Stage::Augment, loaded, &mut Vec::new()).unwrap_err();
    assert!(matches!(err, Error::StageOrder { .. }), "{err}");
    assert!(matches!(runner.evaluate(&s1), Err(Error::StageOrder { .. })));
}

#[test]
fn state_from_another_config_is_rejected() {
    let a = Runner::new(small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Fdv)).unwrap();
    let mut other = small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Fdv);
    other.rho = 0.5;
    let b = Runner::new(other).unwrap();
    let s1 = a.run_stage(Stage::Pretrain, a.initial_state(), &mut Vec::new()).unwrap();
    assert!(matches!(b.run_stage(Stage::Demix, s1, &mut Vec::new()), Err(Error::Integrity(_))));
}

#[test]
fn baselines_reject_later_stages() {
    let runner = Runner::new(small(imbalanced(), VariantKind::Iw, ContrastiveKind::Fdv)).unwrap();
    let s1 = runner.run_stage(Stage::Pretrain, runner.initial_state(), &mut Vec::new()).unwrap();
    assert!(matches!(runner.run_stage(Stage::Demix, s1, &mut Vec::new()), Err(Error::Config(_))));
}

#[test]
fn majority_only_needs_more_than_two_classes() {
    let mut cfg = small(vec![50, 10], VariantKind::Ecrt, ContrastiveKind::Fdv);
    let spec = ToySpec {
        means: vec![[-2.0, 0.0], [2.0, 0.0]],
        spreads: vec![[0.5, 0.5]; 2],
        counts: vec![50, 10],
        mixing: Mixing::None,
        spread_kind: Default::default(),
    };
    cfg.dataset = DatasetConfig::Toy { spec, train_fraction: 0.8, test_per_class: 0 };
    assert!(matches!(Runner::new(cfg.clone()), Err(Error::Config(_))));
    cfg.majority_only_pretrain = false;
    assert!(Runner::new(cfg).is_ok());
}

#[test]
fn separable_two_class_toy_trains_quickly() {
    let spec = ToySpec {
        means: vec![[-3.0, 0.0], [3.0, 0.0]],
        spreads: vec![[0.5, 0.5]; 2],
        counts: vec![200, 200],
        mixing: Mixing::None,
        spread_kind: Default::default(),
    };
    let cfg = ExperimentConfig {
        dataset: DatasetConfig::Toy { spec, train_fraction: 0.8, test_per_class: 0 },
        variant: VariantKind::Erm,
        training: TrainingConfig {
            pretrain: StageTraining { epochs: 50, patience: 50, batch_size: 32, lr: 1e-2, warmup_epochs: 0, cosine_decay: false },
            ..TrainingConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let out = Runner::new(cfg).unwrap().run().unwrap();
    let best = out
        .curve
        .iter()
        .filter(|p| p.split == CurveSplit::Train && p.epoch <= 50)
        .map(|p| p.loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.1, "best training loss {best}");
    assert!(out.evaluation.report.top1 > 0.98);
}

#[test]
fn zero_lambda_skips_augmentation() {
    let mut cfg = small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Fdv);
    cfg.lambda = 0.0;
    let out = Runner::new(cfg).unwrap().run().unwrap();
    assert!(out.state.tensors.keys().all(|k| !k.starts_with("synthetic/")));
    assert!(out.evaluation.report.mmd.is_empty());
}

#[test]
fn augmentation_covers_minority_classes_at_majority_size() {
    let out = Runner::new(small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Fdv)).unwrap().run().unwrap();
    let keys: Vec<&String> = out.state.tensors.keys().filter(|k| k.starts_with("synthetic/")).collect();
    assert_eq!(keys, ["synthetic/000005", "synthetic/000006"]);
    let majority = out.state.tensors[keys[0]].rows();
    // 120 per majority class, 80% of which land in the training split.
    assert_eq!(majority, 96);
    assert_eq!(out.evaluation.report.mmd.len(), 2);
}

#[test]
fn multi_prior_variant_samples_from_learned_priors() {
    let cfg = small(imbalanced(), VariantKind::EcrtMulti, ContrastiveKind::Fdv);
    let runner = Runner::new(cfg.clone()).unwrap();
    assert_eq!(runner.augment_mode(), AugmentMode::Parametric);
    let mut curve = Vec::new();
    let mut state: StageState = runner.initial_state();
    for stage in [Stage::Pretrain, Stage::Demix, Stage::Augment] {
        state = runner.run_stage(stage, state, &mut curve).unwrap();
    }
    let synthetic = &state.tensors["synthetic/000005"];
    let seed = derive_seed(cfg.seed, &[label_id("augment")]);
    let expected = runner
        .model()
        .prior
        .sample(&state.store, 5, synthetic.rows(), &mut indexed_stream(seed, "augment", 5))
        .unwrap();
    assert_eq!(synthetic, &expected);
}

#[test]
fn feature_space_mode_trains_on_features() {
    let mut cfg = small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Fdv);
    cfg.augment.mode = AugmentMode::FeatureSpace;
    let out = Runner::new(cfg).unwrap().run().unwrap();
    assert!(out.evaluation.report.top1.is_finite());
}

#[test]
fn demix_records_a_decorrelation_trace() {
    let out = Runner::new(small(imbalanced(), VariantKind::Ecrt, ContrastiveKind::Gcl)).unwrap().run().unwrap();
    let trace = &out.evaluation.report.decorrelation_trace;
    assert_eq!(trace.first().map(|t| t.0), Some(0));
    assert!(trace.len() >= 2);
    assert!(trace.iter().all(|t| (0.0..=1.0).contains(&t.1)));
}
