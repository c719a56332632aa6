//! Training objectives: weighted cross-entropy, the two contrastive
//! de-mixing losses, likelihood regularisation and the augmented
//! refinement loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::flow::{MafFlow, SourcePrior};
use crate::nets::{FdvCritic, GclCritic, Mlp};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(bad) => usage(format!("label {bad} out of range for {classes} classes")),
        None => Ok(()),
    }
}

/// Mean of `w[y_i] * -log softmax(logits_i)[y_i]` over rows.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Result<Var> {
    let (n, m) = tape.value(logits).dims();
    if labels.len() != n {
        return usage(format!("{} labels for {n} logit rows", labels.len()));
    }
    check_labels(labels, m)?;
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.pick_cols(lsm, labels)?;
    let picked = match weights {
        None => picked,
        Some(w) => {
            if w.len() != m {
                return config(format!("{} class weights for {m} classes", w.len()));
            }
            let col = Tensor::matrix(n, 1, labels.iter().map(|&y| w[y]).collect())?;
            let wv = tape.constant(col);
            tape.mul(picked, wv)?
        }
    };
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// `w_m = n / (M n_m)`: reweights the empirical class mix to uniform.
pub fn importance_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(m) = counts.iter().position(|&c| c == 0) {
        return config(format!("class {m} has no samples; importance weight undefined"));
    }
    let n: usize = counts.iter().sum();
    let m = counts.len() as f64;
    Ok(counts.iter().map(|&c| n as f64 / (m * c as f64)).collect())
}

/// In-batch label shuffle with no fixed points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GclBatchPlan {
    perm: Vec<usize>,
}

const SHUFFLE_RETRIES: usize = 16;

impl GclBatchPlan {
    pub fn new(n: usize, rng: &mut Rng) -> Result<Self> {
        if n < 2 {
            return usage(format!("contrastive batch of {n} rows has no incongruent pair"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..SHUFFLE_RETRIES {
            perm.shuffle(rng);
            if perm.iter().enumerate().all(|(i, &j)| i != j) {
                return Ok(Self { perm });
            }
        }
        Ok(Self { perm: (0..n).map(|i| (i + 1) % n).collect() })
    }

    /// Row `i` is paired with the label of row `partner(i)`.
    pub fn partners(&self) -> &[usize] {
        &self.perm
    }

    pub fn shuffled_labels(&self, labels: &[usize]) -> Vec<usize> {
        self.perm.iter().map(|&j| labels[j]).collect()
    }
}

/// `mean softplus(-r(y_i, s_i)) + mean softplus(r(y_pi(i), s_i))`.
pub fn gcl_loss(
    tape: &mut Tape,
    store: &ParamStore,
    critic: &GclCritic,
    s: Var,
    labels: &[usize],
    plan: &GclBatchPlan,
) -> Result<Var> {
    let n = tape.value(s).rows();
    if n < 2 {
        return usage("contrastive batch needs at least two rows");
    }
    if plan.partners().len() != n {
        return usage(format!("batch plan covers {} rows, batch has {n}", plan.partners().len()));
    }
    let pos = critic.score(tape, store, labels, s)?;
    let neg = critic.score(tape, store, &plan.shuffled_labels(labels), s)?;
    gcl_from_scores(tape, pos, neg)
}

/// Logistic contrastive loss from congruent and incongruent score columns.
pub fn gcl_from_scores(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    let np = tape.neg(pos);
    let lp = tape.softplus(np);
    let ln = tape.softplus(neg);
    let a = tape.mean(lp);
    let b = tape.mean(ln);
    tape.add(a, b)
}

/// Output of the energy-based objective on one batch.
#[derive(Clone, Copy, Debug)]
pub struct FdvTerms {
    /// `-I_FDV`; its value equals the negated DV estimate.
    pub loss: Var,
    /// DV estimate on the batch (no gradient).
    pub dv: f64,
}

/// Energy-based mutual-information loss over all in-batch negatives.
pub fn fdv_loss(
    tape: &mut Tape,
    store: &ParamStore,
    critic: &FdvCritic,
    s: Var,
    labels: &[usize],
) -> Result<FdvTerms> {
    let n = tape.value(s).rows();
    if n < 2 {
        return usage("contrastive batch needs at least two rows");
    }
    if labels.iter().all(|&y| y == labels[0]) {
        log::warn!("degenerate negatives: every row in the batch has label {}", labels[0]);
    }
    let g = critic.score_matrix(tape, store, labels, s)?;
    fdv_from_matrix(tape, g)
}

/// FDV objective for a critic matrix `G[i][j] = g(y_j, s_i)`.
///
/// The log-partition of the DV bound is linearised around a frozen copy
/// `G^` of the critic: `I = mean_i [DV_i(G^) - u_i / u^_i + 1]` with
/// `u_i = mean_j exp(G_ij - G_ii)`. At `G^ = G` the value is the DV
/// estimate and the gradient is the DV gradient.
pub fn fdv_from_matrix(tape: &mut Tape, g: Var) -> Result<FdvTerms> {
    let (n, m) = tape.value(g).dims();
    if n != m || n < 2 {
        return usage(format!("critic matrix must be square with at least two rows, got {n}x{m}"));
    }
    let frozen = tape.value(g).clone();
    let mut dv_rows = Vec::with_capacity(n);
    let mut shift = Vec::with_capacity(n);
    for i in 0..n {
        let row = frozen.row(i);
        let lse = crate::tensor::log_sum_exp(row);
        dv_rows.push(row[i] - (lse - (n as f64).ln()));
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.push(top - row[i]);
    }
    let dv = dv_rows.iter().sum::<f64>() / n as f64;

    // u_i scaled by exp(-shift_i) for overflow safety; the ratio is unchanged.
    let diag_idx: Vec<usize> = (0..n).collect();
    let diag = tape.pick_cols(g, &diag_idx)?;
    let centred = tape.sub(g, diag)?;
    let shift_v = tape.constant(Tensor::matrix(n, 1, shift)?);
    let stable = tape.sub(centred, shift_v)?;
    let e = tape.exp(stable);
    let sums = tape.sum_cols(e);
    let u = tape.scale(sums, 1.0 / n as f64);
    let u_hat = tape.detach(u);
    let ratio = tape.div(u, u_hat)?;
    let mean_ratio = tape.mean(ratio);
    // loss = -(dv - ratio + 1) = ratio - 1 - dv
    let loss = tape.add_scalar(mean_ratio, -1.0 - dv);
    Ok(FdvTerms { loss, dv })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    Gcl,
    #[default]
    Fdv,
}

/// Either contrastive critic, so the de-mixing stage can switch objectives.
#[derive(Clone, Debug)]
pub enum Critic {
    Gcl(GclCritic),
    Fdv(FdvCritic),
}

impl Critic {
    pub fn kind(&self) -> ContrastiveKind {
        match self {
            Self::Gcl(_) => ContrastiveKind::Gcl,
            Self::Fdv(_) => ContrastiveKind::Fdv,
        }
    }

    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, s: Var, labels: &[usize], rng: &mut Rng) -> Result<Var> {
        match self {
            Self::Gcl(c) => {
                let plan = GclBatchPlan::new(labels.len(), rng)?;
                gcl_loss(tape, store, c, s, labels, &plan)
            }
            Self::Fdv(c) => Ok(fdv_loss(tape, store, c, s, labels)?.loss),
        }
    }
}

/// Pieces of the likelihood-regularised de-mixing objective.
#[derive(Clone, Copy, Debug)]
pub struct DemixLoss {
    pub total: Var,
    pub contrastive: Var,
    /// Negative mean flow log-likelihood.
    pub nll: Var,
}

/// `contrastive(f(z)) + rho * (-mean log p(z))`.
#[allow(clippy::too_many_arguments)]
pub fn regularized_demixing_loss(
    tape: &mut Tape,
    store: &ParamStore,
    rho: f64,
    flow: &MafFlow,
    prior: &SourcePrior,
    critic: &Critic,
    z: Var,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<DemixLoss> {
    if !(rho >= 0.0) {
        return config(format!("likelihood weight must be non-negative, got {rho}"));
    }
    let (s, logdet) = flow.forward(tape, store, z)?;
    let contrastive = critic.loss(tape, store, s, labels, rng)?;
    let lp = prior.log_prob(tape, store, s, Some(labels))?;
    let ll = tape.add(logdet, lp)?;
    let mean_ll = tape.mean(ll);
    let nll = tape.neg(mean_ll);
    let reg = tape.scale(nll, rho);
    let total = tape.add(contrastive, reg)?;
    Ok(DemixLoss { total, contrastive, nll })
}

/// Minority-class sources entering the augmentation correction.
#[derive(Clone, Copy, Debug)]
pub struct AugmentationTerm<'a> {
    pub real: &'a Tensor,
    pub real_labels: &'a [usize],
    pub synthetic: &'a Tensor,
    pub synthetic_labels: &'a [usize],
}

/// `base + lambda * (mean CE on synthetic minority - mean CE on real minority)`.
///
/// `base` is the (optionally weighted) cross-entropy of `predictor` on the
/// batch; the correction terms are unweighted.
#[allow(clippy::too_many_arguments)]
pub fn augmented_refinement_loss(
    tape: &mut Tape,
    store: &ParamStore,
    lambda: f64,
    predictor: &Mlp,
    batch: Var,
    batch_labels: &[usize],
    weights: Option<&[f64]>,
    aug: Option<AugmentationTerm<'_>>,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return config(format!("augmentation strength {lambda} outside [0, 1]"));
    }
    let logits = predictor.forward(tape, store, batch, None)?;
    let base = cross_entropy(tape, logits, batch_labels, weights)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    let Some(aug) = aug.filter(|a| a.synthetic.rows() > 0) else {
        return usage("augmentation strength is positive but the synthetic set is empty");
    };
    if aug.real.rows() == 0 {
        return usage("augmentation correction needs real minority samples");
    }
    let sv = tape.constant(aug.synthetic.clone());
    let sl = predictor.forward(tape, store, sv, None)?;
    let syn = cross_entropy(tape, sl, aug.synthetic_labels, None)?;
    let rv = tape.constant(aug.real.clone());
    let rl = predictor.forward(tape, store, rv, None)?;
    let real = cross_entropy(tape, rl, aug.real_labels, None)?;
    let diff = tape.sub(syn, real)?;
    let corr = tape.scale(diff, lambda);
    tape.add(base, corr)
}
