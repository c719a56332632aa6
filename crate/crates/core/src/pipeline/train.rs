//! Minibatch epoch loop with early stopping, shared by the trained stages.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Stage, StageTraining};
use crate::error::{usage, Error, Result};
use crate::rng::{indexed_stream, Rng};
use crate::tensor::{clip_grad_norm, AdamConfig, AdamState, ParamStore, Tape, Var};

/// Global gradient-norm ceiling; keeps early flow updates from blowing up.
pub const GRAD_CLIP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveSplit {
    Train,
    Validation,
}

/// One row of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: Stage,
    pub epoch: usize,
    pub split: CurveSplit,
    pub loss: f64,
    pub top1: Option<f64>,
}

/// What the caller measures after each epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpochEval {
    pub val_loss: f64,
    pub val_top1: Option<f64>,
    pub train_top1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOutcome {
    /// Epochs actually trained.
    pub epochs: usize,
    /// Epoch whose parameters were kept (0: the initial ones).
    pub best_epoch: usize,
    pub best_val: f64,
}

pub(crate) fn optimizer(settings: &StageTraining) -> AdamState {
    AdamState::new(AdamConfig { lr: settings.lr, ..AdamConfig::default() })
}

/// Train the unfrozen parameters of `store` over `n` rows.
///
/// `step` builds the minibatch loss for the given row indices; `eval` is
/// called before training (epoch 0) and after every epoch. The parameters
/// with the lowest validation loss are restored on exit. Parameters under
/// the `held` prefixes stay frozen during the warm-up epochs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit<S, V>(
    stage: Stage,
    settings: &StageTraining,
    held: &[&str],
    seed: u64,
    n: usize,
    store: &mut ParamStore,
    opt: &mut AdamState,
    curve: &mut Vec<CurvePoint>,
    mut step: S,
    mut eval: V,
) -> Result<FitOutcome>
where
    S: FnMut(&mut Tape, &ParamStore, &[usize], &mut Rng) -> Result<Var>,
    V: FnMut(&ParamStore, usize) -> Result<EpochEval>,
{
    if n < 2 {
        return usage(format!("stage {} needs at least two training rows, got {n}", stage.number()));
    }
    let name = stage.name();
    let first = eval(store, 0)?;
    record(curve, stage, 0, None, &first);
    let mut best = FitOutcome { epochs: 0, best_epoch: 0, best_val: first.val_loss };
    let mut best_store = store.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let hold = |store: &mut ParamStore, frozen: bool| held.iter().for_each(|p| store.freeze_prefix(p, frozen));
    if settings.warmup_epochs > 0 {
        hold(store, true);
    }
    for epoch in 1..=settings.epochs {
        if epoch == settings.warmup_epochs + 1 {
            hold(store, false);
        }
        opt.config.lr = settings.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut indexed_stream(seed, &format!("{name}.batches"), epoch as u64));
        let mut rng = indexed_stream(seed, &format!("{name}.steps"), epoch as u64);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(settings.batch_size).filter(|b| b.len() >= 2) {
            let mut tape = Tape::new();
            let loss = step(&mut tape, store, batch, &mut rng)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("stage {} loss became {value} at epoch {epoch}", stage.number())));
            }
            let mut grads = tape.backward(loss)?.params(store);
            clip_grad_norm(&mut grads, GRAD_CLIP);
            opt.step(store, &grads)?;
            total += value;
            batches += 1;
        }
        let ev = eval(store, epoch)?;
        record(curve, stage, epoch, Some(total / batches.max(1) as f64), &ev);
        best.epochs = epoch;
        if ev.val_loss < best.best_val {
            best.best_val = ev.val_loss;
            best.best_epoch = epoch;
            best_store.clone_from(store);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= settings.patience {
                log::debug!("stage {} stopped early at epoch {epoch}", stage.number());
                break;
            }
        }
    }
    *store = best_store;
    hold(store, false);
    Ok(best)
}

fn record(curve: &mut Vec<CurvePoint>, stage: Stage, epoch: usize, train_loss: Option<f64>, ev: &EpochEval) {
    if let Some(loss) = train_loss {
        curve.push(CurvePoint { stage, epoch, split: CurveSplit::Train, loss, top1: ev.train_top1 });
    }
    curve.push(CurvePoint { stage, epoch, split: CurveSplit::Validation, loss: ev.val_loss, top1: ev.val_top1 });
}
