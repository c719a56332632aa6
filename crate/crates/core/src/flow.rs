//! Masked autoregressive flow `s = f(z)` with exact log-determinant,
//! sequential inverse and Gaussian source priors.
//!
//! Each block maps its (permuted) input `p` to `exp(l(p)) * p + b(p)` where
//! `l` and `b` are MADE networks, so output `k` depends on `p_k` and `p_<k`
//! only. Odd blocks reverse the coordinate order before the transform and
//! restore it afterwards, so every block reads and writes natural order.
//! An elementwise affine layer in front of the blocks standardises the input;
//! it starts as the identity and can be set from data before training.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};
use crate::nets::Made;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Log-scales saturate smoothly at `±LOG_SCALE_BOUND`.
pub const LOG_SCALE_BOUND: f64 = 7.0;

/// Inverse values beyond this magnitude are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub blocks: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self { blocks: 4, hidden: 128, layers: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct MafBlock {
    shift: Made,
    log_scale: Made,
    perm: Vec<usize>,
}

impl MafBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: &[usize],
        reversed: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shift = Made::new(store, &format!("{prefix}.shift"), d, hidden, true, rng)?;
        let log_scale = Made::new(store, &format!("{prefix}.log_scale"), d, hidden, true, rng)?;
        let perm = if reversed { (0..d).rev().collect() } else { (0..d).collect() };
        Ok(Self { shift, log_scale, perm })
    }

    /// Coordinate order read by the MADE networks. A reversal is its own
    /// inverse, so the same index list restores natural order.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn shift_net(&self) -> &Made {
        &self.shift
    }

    pub fn log_scale_net(&self) -> &Made {
        &self.log_scale
    }

    fn clamp(tape: &mut Tape, raw: Var) -> Var {
        let r = tape.scale(raw, 1.0 / LOG_SCALE_BOUND);
        let t = tape.tanh(r);
        tape.scale(t, LOG_SCALE_BOUND)
    }

    /// Returns `(output, logdet)` with logdet shaped `n x 1`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let p = tape.select_cols(x, &self.perm)?;
        let b = self.shift.forward(tape, store, p)?;
        let raw = self.log_scale.forward(tape, store, p)?;
        let ls = Self::clamp(tape, raw);
        let a = tape.exp(ls);
        let ap = tape.mul(a, p)?;
        let y = tape.add(ap, b)?;
        let out = tape.select_cols(y, &self.perm)?;
        Ok((out, tape.sum_cols(ls)))
    }

    fn params_on(&self, store: &ParamStore, p: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::inference();
        let pv = tape.constant(p.clone());
        let b = self.shift.forward(&mut tape, store, pv)?;
        let raw = self.log_scale.forward(&mut tape, store, pv)?;
        let ls = Self::clamp(&mut tape, raw);
        Ok((tape.value(b).clone(), tape.value(ls).clone()))
    }

    /// Sequential inverse: `d` passes, each fixing one more coordinate.
    pub fn inverse(&self, store: &ParamStore, y: &Tensor, block: usize) -> Result<Tensor> {
        let (n, d) = y.dims();
        let q = select_cols(y, &self.perm);
        let mut p = Tensor::zeros(&[n, d]);
        for k in 0..d {
            let (b, ls) = self.params_on(store, &p)?;
            for i in 0..n {
                let v = (q.get(i, k) - b.get(i, k)) * (-ls.get(i, k)).exp();
                if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
                    return Err(Error::Numeric(format!(
                        "flow inverse diverged in block {block}, coordinate {} (row {i})",
                        self.perm[k]
                    )));
                }
                p.set(i, k, v);
            }
        }
        Ok(select_cols(&p, &self.perm))
    }
}

fn select_cols(x: &Tensor, idx: &[usize]) -> Tensor {
    let (n, _) = x.dims();
    let mut data = Vec::with_capacity(n * idx.len());
    for i in 0..n {
        let row = x.row(i);
        data.extend(idx.iter().map(|&c| row[c]));
    }
    Tensor::matrix(n, idx.len(), data).expect("column selection shape")
}

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    let bad: Vec<usize> = (0..x.rows()).filter(|&i| x.row(i).iter().any(|v| !v.is_finite())).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        usage(format!("non-finite {what} in rows {bad:?}"))
    }
}

#[derive(Clone, Debug)]
pub struct MafFlow {
    input_shift: ParamId,
    input_log_scale: ParamId,
    blocks: Vec<MafBlock>,
    dim: usize,
}

impl MafFlow {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, spec: &FlowSpec, rng: &mut Rng) -> Result<Self> {
        if spec.blocks == 0 {
            return config("flow needs at least one block");
        }
        let hidden = vec![spec.hidden; spec.layers];
        let input_shift = store.add(format!("{prefix}.input.shift"), Tensor::zeros(&[1, dim]))?;
        let input_log_scale = store.add(format!("{prefix}.input.log_scale"), Tensor::zeros(&[1, dim]))?;
        let blocks = (0..spec.blocks)
            .map(|t| MafBlock::new(store, &format!("{prefix}.block{t}"), dim, &hidden, t % 2 == 1, rng))
            .collect::<Result<_>>()?;
        Ok(Self { input_shift, input_log_scale, blocks, dim })
    }

    /// Sets the input layer so that `z` has zero mean and unit variance per
    /// coordinate. Constant coordinates keep unit scale.
    pub fn standardize_input(&self, store: &mut ParamStore, z: &Tensor) -> Result<()> {
        let (n, d) = z.dims();
        if d != self.dim || n < 2 {
            return usage(format!("input standardisation needs at least 2 rows of width {}", self.dim));
        }
        check_finite(z, "flow input")?;
        let mut shift = Tensor::zeros(&[1, d]);
        let mut log_scale = Tensor::zeros(&[1, d]);
        for a in 0..d {
            let col = z.column(a);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            shift.set(0, a, mean);
            log_scale.set(0, a, if var > 1e-24 { 0.5 * var.ln() } else { 0.0 });
        }
        *store.get_mut(self.input_shift) = shift;
        *store.get_mut(self.input_log_scale) = log_scale;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[MafBlock] {
        &self.blocks
    }

    /// `s = f(z)` and per-row log|det df/dz|, shaped `n x d` and `n x 1`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let zt = tape.value(z);
        if zt.cols() != self.dim {
            return config(format!("flow expects {} columns, got {}", self.dim, zt.cols()));
        }
        check_finite(zt, "flow input")?;
        let (mut x, mut logdet) = self.input_layer(tape, store, z)?;
        for block in &self.blocks {
            let (y, ld) = block.forward(tape, store, x)?;
            x = y;
            logdet = tape.add(ld, logdet)?;
        }
        Ok((x, logdet))
    }

    /// The affine input layer: `(z - shift) / scale` and its `1 x 1` logdet.
    pub fn input_layer(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let shift = tape.param(store, self.input_shift);
        let log_scale = tape.param(store, self.input_log_scale);
        let centred = tape.sub(z, shift)?;
        let neg = tape.neg(log_scale);
        let inv_scale = tape.exp(neg);
        let x = tape.mul(centred, inv_scale)?;
        let total = tape.sum_cols(log_scale);
        Ok((x, tape.neg(total)))
    }

    /// Forward pass on plain tensors; returns sources and per-row logdet.
    pub fn apply(&self, store: &ParamStore, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::inference();
        let zv = tape.constant(z.clone());
        let (s, ld) = self.forward(&mut tape, store, zv)?;
        Ok((tape.value(s).clone(), tape.value(ld).data().to_vec()))
    }

    /// `z = f^{-1}(s)`, undoing blocks in reverse order.
    pub fn inverse(&self, store: &ParamStore, s: &Tensor) -> Result<Tensor> {
        if s.cols() != self.dim {
            return config(format!("flow expects {} columns, got {}", self.dim, s.cols()));
        }
        check_finite(s, "flow inverse input")?;
        let mut x = s.clone();
        for (t, block) in self.blocks.iter().enumerate().rev() {
            x = block.inverse(store, &x, t)?;
        }
        let (shift, log_scale) = (store.get(self.input_shift), store.get(self.input_log_scale));
        for i in 0..x.rows() {
            for a in 0..self.dim {
                x.set(i, a, x.get(i, a) * log_scale.get(0, a).exp() + shift.get(0, a));
            }
        }
        Ok(x)
    }

    /// Per-row `log p(z) = logdet + log p(f(z))`, shaped `n x 1`.
    pub fn log_likelihood(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prior: &SourcePrior,
        z: Var,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let (s, logdet) = self.forward(tape, store, z)?;
        let lp = prior.log_prob(tape, store, s, labels)?;
        tape.add(logdet, lp)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    #[default]
    SharedStandard,
    PerClass,
}

/// Gaussian source density, either `N(0, I)` or one diagonal Gaussian per class.
#[derive(Clone, Debug)]
pub enum SourcePrior {
    Standard { dim: usize },
    PerClass { dim: usize, classes: usize, mean: ParamId, log_var: ParamId },
}

impl SourcePrior {
    pub fn new(store: &mut ParamStore, prefix: &str, mode: PriorMode, dim: usize, classes: usize) -> Result<Self> {
        Ok(match mode {
            PriorMode::SharedStandard => Self::Standard { dim },
            PriorMode::PerClass => {
                if classes == 0 {
                    return config("per-class prior needs at least one class");
                }
                let mean = store.add(format!("{prefix}.mean"), Tensor::zeros(&[classes, dim]))?;
                let log_var = store.add(format!("{prefix}.log_var"), Tensor::zeros(&[classes, dim]))?;
                Self::PerClass { dim, classes, mean, log_var }
            }
        })
    }

    pub fn mode(&self) -> PriorMode {
        match self {
            Self::Standard { .. } => PriorMode::SharedStandard,
            Self::PerClass { .. } => PriorMode::PerClass,
        }
    }

    /// Per-row log density, shaped `n x 1`.
    pub fn log_prob(&self, tape: &mut Tape, store: &ParamStore, s: Var, labels: Option<&[usize]>) -> Result<Var> {
        let (n, d) = tape.value(s).dims();
        let norm = -0.5 * d as f64 * (2.0 * PI).ln();
        match *self {
            Self::Standard { .. } => {
                let sq = tape.square(s);
                let ss = tape.sum_cols(sq);
                let half = tape.scale(ss, -0.5);
                Ok(tape.add_scalar(half, norm))
            }
            Self::PerClass { classes, mean, log_var, .. } => {
                let Some(labels) = labels else {
                    return usage("per-class prior requires labels");
                };
                if labels.len() != n {
                    return usage(format!("{} labels for {n} rows", labels.len()));
                }
                if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
                    return usage(format!("unknown label id {bad} for per-class prior"));
                }
                let mu_t = tape.param(store, mean);
                let lv_t = tape.param(store, log_var);
                let mu = tape.gather_rows(mu_t, labels)?;
                let lv = tape.gather_rows(lv_t, labels)?;
                let diff = tape.sub(s, mu)?;
                let sq = tape.square(diff);
                let nlv = tape.neg(lv);
                let prec = tape.exp(nlv);
                let maha = tape.mul(sq, prec)?;
                let inner = tape.add(maha, lv)?;
                let ss = tape.sum_cols(inner);
                let half = tape.scale(ss, -0.5);
                Ok(tape.add_scalar(half, norm))
            }
        }
    }

    /// Draw `n` sources from the prior of `class` (ignored for the standard prior).
    pub fn sample(&self, store: &ParamStore, class: usize, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let (dim, mu, sd) = match *self {
            Self::Standard { dim } => (dim, vec![0.0; dim], vec![1.0; dim]),
            Self::PerClass { dim, classes, mean, log_var } => {
                if class >= classes {
                    return usage(format!("unknown label id {class} for per-class prior"));
                }
                let mu = store.get(mean).row(class).to_vec();
                let sd = store.get(log_var).row(class).iter().map(|lv| (0.5 * lv).exp()).collect();
                (dim, mu, sd)
            }
        };
        let data = (0..n * dim)
            .map(|k| {
                let e: f64 = StandardNormal.sample(rng);
                mu[k % dim] + sd[k % dim] * e
            })
            .collect();
        Tensor::matrix(n, dim, data)
    }
}
