//! Network building blocks: MLPs, MADE-masked autoregressive networks and
//! the label-conditional critics used for contrastive de-mixing.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Self::Relu => tape.relu(x),
            Self::Tanh => tape.tanh(x),
            Self::Identity => x,
        }
    }
}

/// Affine layer `x W + b` with an optional fixed binary mask on `W`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    mask: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (weight, bias) = if zero_init {
            (
                store.add(format!("{prefix}.weight"), Tensor::zeros(&[in_dim, out_dim]))?,
                store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, out_dim]))?,
            )
        } else {
            (
                store.add_uniform(format!("{prefix}.weight"), &[in_dim, out_dim], in_dim, rng)?,
                store.add_uniform(format!("{prefix}.bias"), &[1, out_dim], in_dim, rng)?,
            )
        };
        Ok(Self { weight, bias, mask: None, in_dim, out_dim })
    }

    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        if mask.shape() != [self.in_dim, self.out_dim] {
            return config(format!(
                "mask shape {:?} does not match layer {}x{}",
                mask.shape(),
                self.in_dim,
                self.out_dim
            ));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim {
            return config(format!("layer expects width {}, got {cols}", self.in_dim));
        }
        let mut w = tape.param(store, self.weight);
        if let Some(mask) = &self.mask {
            let m = tape.constant(mask.clone());
            w = tape.mul(w, m)?;
        }
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Dropout rate after each hidden activation; 0 disables.
    #[serde(default)]
    pub dropout: f64,
    /// Zero-initialise the output layer.
    #[serde(default)]
    pub zero_last: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
            activation: Activation::Relu,
            dropout: 0.0,
            zero_last: false,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

/// Fully connected network; the output layer has no activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
    dropout: f64,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        Self::build(store, prefix, spec, None, rng)
    }

    /// An MLP whose layer weights are multiplied by fixed masks.
    pub fn masked(
        store: &mut ParamStore,
        prefix: &str,
        spec: &MlpSpec,
        masks: Vec<Tensor>,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(store, prefix, spec, Some(masks), rng)
    }

    fn build(
        store: &mut ParamStore,
        prefix: &str,
        spec: &MlpSpec,
        masks: Option<Vec<Tensor>>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&spec.dropout) {
            return config(format!("dropout rate {} outside [0, 1)", spec.dropout));
        }
        let widths = spec.widths();
        if widths.iter().any(|&w| w == 0) {
            return config(format!("zero-width layer in {widths:?}"));
        }
        let n = widths.len() - 1;
        if masks.as_ref().is_some_and(|m| m.len() != n) {
            return config("one mask per layer required");
        }
        let mut masks = masks.map(|m| m.into_iter());
        let mut layers = Vec::with_capacity(n);
        for (i, pair) in widths.windows(2).enumerate() {
            let zero = spec.zero_last && i == n - 1;
            let mut layer = Linear::new(store, &format!("{prefix}.{i}"), pair[0], pair[1], zero, rng)?;
            if let Some(m) = masks.as_mut().and_then(Iterator::next) {
                layer = layer.with_mask(m)?;
            }
            layers.push(layer);
        }
        Ok(Self { layers, activation: spec.activation, dropout: spec.dropout })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Forward pass. Dropout is active only when an rng is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i == last {
                break;
            }
            h = self.activation.apply(tape, h);
            if self.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let keep = 1.0 - self.dropout;
                    let shape = tape.value(h).shape().to_vec();
                    let n = shape.iter().product();
                    let mask: Vec<f64> = (0..n)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let m = tape.constant(Tensor::new(shape, mask)?);
                    h = tape.mul(h, m)?;
                }
            }
        }
        Ok(h)
    }

    /// Evaluate on a plain tensor without recording gradients.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, xv, None)?;
        Ok(tape.value(out).clone())
    }
}

/// Autoregressive degree assignment for a MADE network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MadeDegrees {
    pub input: Vec<usize>,
    pub hidden: Vec<Vec<usize>>,
    pub output: Vec<usize>,
}

/// Degrees for a `d`-dimensional MADE: inputs and outputs are numbered
/// `1..=d`, hidden units cycle through `1..=max(1, d-1)`.
pub fn made_degrees(d: usize, hidden: &[usize]) -> Result<MadeDegrees> {
    if d == 0 {
        return config("MADE dimension must be at least 1");
    }
    let top = (d - 1).max(1);
    Ok(MadeDegrees {
        input: (1..=d).collect(),
        hidden: hidden.iter().map(|&w| (0..w).map(|k| 1 + k % top).collect()).collect(),
        output: (1..=d).collect(),
    })
}

impl MadeDegrees {
    /// Binary masks in `[in, out]` layout, one per layer.
    ///
    /// Hidden units see inputs of degree `<=` their own; output `k` sees
    /// hidden units of degree strictly below `k`.
    pub fn masks(&self) -> Vec<Tensor> {
        let mut masks = Vec::new();
        let mut prev = &self.input;
        for layer in &self.hidden {
            masks.push(mask_between(prev, layer, |o, i| o >= i));
            prev = layer;
        }
        masks.push(mask_between(prev, &self.output, |o, i| o > i));
        masks
    }
}

fn mask_between(inp: &[usize], out: &[usize], allow: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = Vec::with_capacity(inp.len() * out.len());
    for &i in inp {
        data.extend(out.iter().map(|&o| if allow(o, i) { 1.0 } else { 0.0 }));
    }
    Tensor::matrix(inp.len(), out.len(), data).expect("mask shape")
}

/// Masked autoencoder: output `k` depends only on inputs `< k`.
#[derive(Clone, Debug)]
pub struct Made {
    net: Mlp,
    degrees: MadeDegrees,
}

impl Made {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: &[usize],
        zero_last: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let degrees = made_degrees(d, hidden)?;
        let spec = MlpSpec { zero_last, ..MlpSpec::new(d, hidden, d) };
        let net = Mlp::masked(store, prefix, &spec, degrees.masks(), rng)?;
        Ok(Self { net, degrees })
    }

    pub fn degrees(&self) -> &MadeDegrees {
        &self.degrees
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.net.forward(tape, store, x, None)
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(bad) => usage(format!("unknown label id {bad} (critic knows {classes} classes)")),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    /// Width of the learned label embedding.
    pub embed_dim: usize,
    /// Hidden widths of each per-dimension network.
    pub hidden: Vec<usize>,
    /// FDV only: feed the label embedding into the per-dimension encoders
    /// as well. When false the critic is bilinear in (label, source).
    #[serde(default)]
    pub label_conditioned: bool,
    /// FDV only: initial temperature.
    #[serde(default = "default_tau")]
    pub init_tau: f64,
}

fn default_tau() -> f64 {
    0.1
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self { embed_dim: 16, hidden: vec![64, 64], label_conditioned: false, init_tau: default_tau() }
    }
}

/// Label-conditional additive critic `r(y, s) = sum_a gamma_a(y, s_a)`.
#[derive(Clone, Debug)]
pub struct GclCritic {
    embedding: ParamId,
    gammas: Vec<Mlp>,
    classes: usize,
}

impl GclCritic {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        classes: usize,
        dims: usize,
        spec: &CriticSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        if classes == 0 || dims == 0 {
            return config("critic needs at least one class and one dimension");
        }
        let embedding =
            store.add_uniform(format!("{prefix}.embedding"), &[classes, spec.embed_dim], 1, rng)?;
        let gammas = (0..dims)
            .map(|a| {
                let s = MlpSpec::new(spec.embed_dim + 1, &spec.hidden, 1);
                Mlp::new(store, &format!("{prefix}.gamma{a}"), &s, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { embedding, gammas, classes })
    }

    pub fn dims(&self) -> usize {
        self.gammas.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn gammas(&self) -> &[Mlp] {
        &self.gammas
    }

    /// Contribution `gamma_a(y, s_a)` of coordinate `a`, shape `n x 1`.
    pub fn term(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: usize,
        labels: &[usize],
        s: Var,
    ) -> Result<Var> {
        check_labels(labels, self.classes)?;
        let table = tape.param(store, self.embedding);
        let emb = tape.gather_rows(table, labels)?;
        let coord = tape.slice_cols(s, a, a + 1)?;
        let input = tape.concat_cols(&[emb, coord])?;
        self.gammas[a].forward(tape, store, input, None)
    }

    /// Per-row critic value, shape `n x 1`.
    pub fn score(&self, tape: &mut Tape, store: &ParamStore, labels: &[usize], s: Var) -> Result<Var> {
        let (n, d) = tape.value(s).dims();
        if d != self.dims() {
            return config(format!("critic expects {} source columns, got {d}", self.dims()));
        }
        if labels.len() != n {
            return usage(format!("{} labels for {n} rows", labels.len()));
        }
        let mut total: Option<Var> = None;
        for a in 0..d {
            let t = self.term(tape, store, a, labels, s)?;
            total = Some(match total {
                None => t,
                Some(acc) => tape.add(acc, t)?,
            });
        }
        Ok(total.expect("at least one dimension"))
    }
}

const NORM_EPS: f64 = 1e-12;

/// Energy-based critic `g(y, s) = cos(e_y, sum_a gamma_a(.., s_a)) / tau`.
#[derive(Clone, Debug)]
pub struct FdvCritic {
    embedding: ParamId,
    gammas: Vec<Mlp>,
    log_tau: ParamId,
    classes: usize,
    embed_dim: usize,
    label_conditioned: bool,
}

impl FdvCritic {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        classes: usize,
        dims: usize,
        spec: &CriticSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        if classes == 0 || dims == 0 {
            return config("critic needs at least one class and one dimension");
        }
        if spec.init_tau <= 0.0 {
            return config("temperature must be positive");
        }
        let embedding =
            store.add_uniform(format!("{prefix}.embedding"), &[classes, spec.embed_dim], 1, rng)?;
        let in_width = if spec.label_conditioned { spec.embed_dim + 1 } else { 1 };
        let gammas = (0..dims)
            .map(|a| {
                let s = MlpSpec::new(in_width, &spec.hidden, spec.embed_dim);
                Mlp::new(store, &format!("{prefix}.gamma{a}"), &s, rng)
            })
            .collect::<Result<_>>()?;
        let log_tau = store.add(format!("{prefix}.log_tau"), Tensor::scalar(spec.init_tau.ln()))?;
        Ok(Self {
            embedding,
            gammas,
            log_tau,
            classes,
            embed_dim: spec.embed_dim,
            label_conditioned: spec.label_conditioned,
        })
    }

    pub fn dims(&self) -> usize {
        self.gammas.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn label_conditioned(&self) -> bool {
        self.label_conditioned
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.log_tau
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).item().exp()
    }

    /// Label embeddings for `labels`, shape `n x e`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, labels: &[usize]) -> Result<Var> {
        check_labels(labels, self.classes)?;
        let table = tape.param(store, self.embedding);
        tape.gather_rows(table, labels)
    }

    /// Summed per-dimension encodings, shape `n x e`. `labels` is used only
    /// by label-conditioned critics.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, labels: &[usize], s: Var) -> Result<Var> {
        let (n, d) = tape.value(s).dims();
        if d != self.dims() {
            return config(format!("critic expects {} source columns, got {d}", self.dims()));
        }
        let emb = if self.label_conditioned {
            if labels.len() != n {
                return usage(format!("{} labels for {n} rows", labels.len()));
            }
            Some(self.embed(tape, store, labels)?)
        } else {
            None
        };
        let mut total: Option<Var> = None;
        for a in 0..d {
            let coord = tape.slice_cols(s, a, a + 1)?;
            let input = match emb {
                Some(e) => tape.concat_cols(&[e, coord])?,
                None => coord,
            };
            let t = self.gammas[a].forward(tape, store, input, None)?;
            total = Some(match total {
                None => t,
                Some(acc) => tape.add(acc, t)?,
            });
        }
        Ok(total.expect("at least one dimension"))
    }

    fn inv_tau(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let lt = tape.param(store, self.log_tau);
        let neg = tape.neg(lt);
        tape.exp(neg)
    }

    /// Rows scaled to unit norm; zero rows stay zero.
    fn normalize(tape: &mut Tape, x: Var) -> Result<Var> {
        let sq = tape.square(x);
        let ss = tape.sum_cols(sq);
        if tape.value(ss).data().iter().any(|&v| v < NORM_EPS) {
            log::warn!("degenerate direction: zero-norm vector in cosine similarity, scoring 0");
        }
        let ss = tape.add_scalar(ss, NORM_EPS);
        let norm = tape.sqrt(ss);
        tape.div(x, norm)
    }

    /// Paired critic value `g(y_i, s_i)`, shape `n x 1`.
    pub fn score(&self, tape: &mut Tape, store: &ParamStore, labels: &[usize], s: Var) -> Result<Var> {
        let n = tape.value(s).rows();
        if labels.len() != n {
            return usage(format!("{} labels for {n} rows", labels.len()));
        }
        let emb = self.embed(tape, store, labels)?;
        let enc = self.encode(tape, store, labels, s)?;
        let e = Self::normalize(tape, emb)?;
        let u = Self::normalize(tape, enc)?;
        let prod = tape.mul(e, u)?;
        let cos = tape.sum_cols(prod);
        let it = self.inv_tau(tape, store);
        tape.mul(cos, it)
    }

    /// All-pairs critic matrix with `G[i][j] = g(y_j, s_i)`, shape `n x n`.
    pub fn score_matrix(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        labels: &[usize],
        s: Var,
    ) -> Result<Var> {
        let n = tape.value(s).rows();
        if labels.len() != n {
            return usage(format!("{} labels for {n} rows", labels.len()));
        }
        let it = self.inv_tau(tape, store);
        if !self.label_conditioned {
            let emb = self.embed(tape, store, labels)?;
            let e = Self::normalize(tape, emb)?;
            let enc = self.encode(tape, store, labels, s)?;
            let u = Self::normalize(tape, enc)?;
            let et = tape.transpose(e);
            let cos = tape.matmul(u, et)?;
            return tape.mul(cos, it);
        }
        // Scores depend on the label only, so score each source against the
        // distinct batch labels and spread the columns back out.
        let mut distinct = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let k = distinct.len();
        let column_of: Vec<usize> = labels.iter().map(|y| distinct.binary_search(y).expect("label present")).collect();
        // Row i*k + c pairs source i with label distinct[c].
        let src_idx: Vec<usize> = (0..n * k).map(|r| r / k).collect();
        let lab_idx: Vec<usize> = (0..n * k).map(|r| distinct[r % k]).collect();
        let s_rep = tape.gather_rows(s, &src_idx)?;
        let enc = self.encode(tape, store, &lab_idx, s_rep)?;
        let u = Self::normalize(tape, enc)?;
        let e_rep = self.embed(tape, store, &lab_idx)?;
        let e_rep = Self::normalize(tape, e_rep)?;
        let prod = tape.mul(u, e_rep)?;
        let cos = tape.sum_cols(prod);
        let scaled = tape.mul(cos, it)?;
        let by_label = reshape_column(tape, scaled, n, k)?;
        tape.select_cols(by_label, &column_of)
    }
}

/// Rearrange an `(rows*cols) x 1` column into a `rows x cols` matrix, differentiably.
fn reshape_column(tape: &mut Tape, col: Var, rows: usize, cols: usize) -> Result<Var> {
    let t = tape.transpose(col); // 1 x rows*cols
    let parts = (0..rows)
        .map(|i| tape.slice_cols(t, i * cols, (i + 1) * cols))
        .collect::<Result<Vec<_>>>()?;
    let parts_t: Vec<Var> = parts.into_iter().map(|r| tape.transpose(r)).collect();
    let m = tape.concat_cols(&parts_t)?; // cols x rows
    Ok(tape.transpose(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(3)
    }

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &MlpSpec::new(3, &[5, 4], 2), &mut rng()).unwrap();
        zero_all(&mut store);
        let out = mlp.eval(&store, &Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &MlpSpec::new(1, &[], 1), &mut rng()).unwrap();
        let (w, b) = (mlp.layers()[0].weight, mlp.layers()[0].bias);
        *store.get_mut(w) = Tensor::from_rows(&[[2.0]]).unwrap();
        *store.get_mut(b) = Tensor::from_rows(&[[1.0]]).unwrap();
        let out = mlp.eval(&store, &Tensor::from_rows(&[[3.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn encoder_shape_784_32_32_2() {
        let mut store = ParamStore::new();
        let enc = Mlp::new(&mut store, "enc", &MlpSpec::new(784, &[32, 32], 2), &mut rng()).unwrap();
        let out = enc.eval(&store, &Tensor::zeros(&[1, 784])).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert!(enc.eval(&store, &Tensor::zeros(&[1, 783])).is_err());
    }

    #[test]
    fn dropout_only_in_training() {
        let mut store = ParamStore::new();
        let spec = MlpSpec { dropout: 0.5, ..MlpSpec::new(4, &[64], 3) };
        let mlp = Mlp::new(&mut store, "m", &spec, &mut rng()).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.1, 0.7, 1.0]]).unwrap();
        assert_eq!(mlp.eval(&store, &x).unwrap(), mlp.eval(&store, &x).unwrap());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut r = rng();
        let train = mlp.forward(&mut tape, &store, xv, Some(&mut r)).unwrap();
        assert_ne!(tape.value(train), &mlp.eval(&store, &x).unwrap());
    }

    #[test]
    fn made_degree_edge_cases() {
        assert!(made_degrees(0, &[4]).is_err());
        let d1 = made_degrees(1, &[3]).unwrap();
        let masks = d1.masks();
        assert!(masks[1].data().iter().all(|&m| m == 0.0), "d=1 output must be constant");
        let d2 = made_degrees(2, &[4, 4]).unwrap();
        assert!(d2.hidden.iter().flatten().all(|&h| h == 1));
        // Output 1 sees nothing, output 2 sees input 1 only.
        let mut store = ParamStore::new();
        let made = Made::new(&mut store, "made", 2, &[8, 8], false, &mut rng()).unwrap();
        let j = numeric_jacobian(&made, &store, &[0.3, -0.4]);
        assert_eq!(j[0][0], 0.0);
        assert_eq!(j[0][1], 0.0);
        assert_eq!(j[1][1], 0.0);
        assert!(j[1][0].abs() > 0.0);
    }

    fn numeric_jacobian(made: &Made, store: &ParamStore, x: &[f64]) -> Vec<Vec<f64>> {
        let d = x.len();
        let f = |v: &[f64]| made.net().eval(store, &Tensor::from_rows(&[v]).unwrap()).unwrap().into_data();
        let h = 1e-6;
        let mut j = vec![vec![0.0; d]; d];
        for c in 0..d {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[c] += h;
            m[c] -= h;
            let (fp, fm) = (f(&p), f(&m));
            for r in 0..d {
                j[r][c] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn made_jacobian_is_strictly_triangular() {
        let mut r = rng();
        for d in [3, 5] {
            let mut store = ParamStore::new();
            let made = Made::new(&mut store, "made", d, &[16, 16], false, &mut r).unwrap();
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let j = numeric_jacobian(&made, &store, &x);
            for (k, row) in j.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    if c >= k {
                        assert_eq!(v, 0.0, "output {k} depends on input {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn made_perturbation_of_later_inputs_is_invisible() {
        let mut r = rng();
        let d = 4;
        let mut store = ParamStore::new();
        let made = Made::new(&mut store, "made", d, &[12, 12], false, &mut r).unwrap();
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let base = made.net().eval(&store, &Tensor::from_rows(&[&x]).unwrap()).unwrap();
        for k in 0..d {
            for c in k..d {
                let mut y = x.clone();
                y[c] += 3.7;
                let out = made.net().eval(&store, &Tensor::from_rows(&[&y]).unwrap()).unwrap();
                assert_eq!(out.data()[k], base.data()[k]);
            }
        }
    }

    fn gcl_fixture(dims: usize) -> (ParamStore, GclCritic) {
        let mut store = ParamStore::new();
        let c = GclCritic::new(&mut store, "gcl", 3, dims, &CriticSpec::default(), &mut rng()).unwrap();
        (store, c)
    }

    #[test]
    fn gcl_zero_and_constant_critics() {
        let (mut store, critic) = gcl_fixture(2);
        zero_all(&mut store);
        let mut tape = Tape::inference();
        let s = tape.constant(Tensor::from_rows(&[[0.5, 1.0], [2.0, -1.0]]).unwrap());
        let out = critic.score(&mut tape, &store, &[0, 2], s).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);

        // gamma_1 == 1 and gamma_2 == 2 via output biases.
        for (a, c) in [(0, 1.0), (1, 2.0)] {
            let last = critic.gammas()[a].layers().last().unwrap().bias;
            *store.get_mut(last) = Tensor::from_rows(&[[c]]).unwrap();
        }
        let mut tape = Tape::inference();
        let s = tape.constant(Tensor::from_rows(&[[0.5, 1.0], [2.0, -1.0]]).unwrap());
        let out = critic.score(&mut tape, &store, &[1, 1], s).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 3.0]);
    }

    #[test]
    fn gcl_score_is_sum_of_dimension_networks() {
        let (store, critic) = gcl_fixture(3);
        let mut r = rng();
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let labels = [0, 1, 2, 1, 0];
        let mut tape = Tape::inference();
        let s = tape.constant(Tensor::from_rows(&rows).unwrap());
        let out = critic.score(&mut tape, &store, &labels, s).unwrap();
        let table = store.get(store.id("gcl.embedding").unwrap()).clone();
        for (i, row) in rows.iter().enumerate() {
            // Oracle: evaluate each gamma_a on its own input and add.
            let expected: f64 = (0..3)
                .map(|a| {
                    let mut input = table.row(labels[i]).to_vec();
                    input.push(row[a]);
                    critic.gammas()[a].eval(&store, &Tensor::from_rows(&[input]).unwrap()).unwrap().item()
                })
                .sum();
            assert_relative_eq!(tape.value(out).data()[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn gcl_rejects_unknown_label() {
        let (store, critic) = gcl_fixture(2);
        let mut tape = Tape::inference();
        let s = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(critic.score(&mut tape, &store, &[7], s), Err(crate::Error::Usage(_))));
    }

    fn fdv_fixture(conditioned: bool) -> (ParamStore, FdvCritic) {
        let mut store = ParamStore::new();
        let spec = CriticSpec { embed_dim: 4, hidden: vec![8], label_conditioned: conditioned, init_tau: 0.5 };
        let c = FdvCritic::new(&mut store, "fdv", 3, 2, &spec, &mut rng()).unwrap();
        (store, c)
    }

    /// Force the summed encoder output to a fixed vector via output biases.
    fn pin_encoding(store: &mut ParamStore, critic: &FdvCritic, v: &[f64]) {
        for (a, g) in critic.gammas.iter().enumerate() {
            let last = g.layers().last().unwrap();
            store.get_mut(last.weight).data_mut().iter_mut().for_each(|x| *x = 0.0);
            let bias: Vec<f64> = if a == 0 { v.to_vec() } else { vec![0.0; v.len()] };
            *store.get_mut(last.bias) = Tensor::from_rows(&[bias]).unwrap();
        }
    }

    #[test]
    fn fdv_cosine_cases() {
        let (mut store, critic) = fdv_fixture(false);
        let emb = [1.0, 2.0, -1.0, 0.5];
        let table = store.id("fdv.embedding").unwrap();
        store.get_mut(table).data_mut()[..4].copy_from_slice(&emb);
        let tau = critic.tau(&store);
        let cases: [(Vec<f64>, f64); 3] = [
            (emb.iter().map(|x| 3.0 * x).collect(), 1.0 / tau),
            (vec![2.0, -1.0, 0.0, 0.0], 0.0),
            (emb.iter().map(|x| -0.2 * x).collect(), -1.0 / tau),
        ];
        for (enc, expected) in cases {
            pin_encoding(&mut store, &critic, &enc);
            let mut tape = Tape::inference();
            let s = tape.constant(Tensor::from_rows(&[[0.1, 0.2]]).unwrap());
            let out = critic.score(&mut tape, &store, &[0], s).unwrap();
            assert_relative_eq!(tape.value(out).item(), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn fdv_zero_encoding_scores_zero() {
        let (mut store, critic) = fdv_fixture(false);
        pin_encoding(&mut store, &critic, &[0.0; 4]);
        let mut tape = Tape::inference();
        let s = tape.constant(Tensor::from_rows(&[[0.1, 0.2]]).unwrap());
        let out = critic.score(&mut tape, &store, &[1], s).unwrap();
        assert_eq!(tape.value(out).item(), 0.0);
    }

    #[test]
    fn fdv_matrix_matches_paired_scores() {
        for conditioned in [false, true] {
            let (store, critic) = fdv_fixture(conditioned);
            let mut r = rng();
            let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
            let labels = [0, 2, 1, 2];
            let mut tape = Tape::inference();
            let s = tape.constant(Tensor::from_rows(&rows).unwrap());
            let g = critic.score_matrix(&mut tape, &store, &labels, s).unwrap();
            let g = tape.value(g).clone();
            for i in 0..4 {
                for j in 0..4 {
                    let mut t = Tape::inference();
                    let si = t.constant(Tensor::from_rows(&[&rows[i]]).unwrap());
                    let v = critic.score(&mut t, &store, &[labels[j]], si).unwrap();
                    assert_relative_eq!(g.get(i, j), t.value(v).item(), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn fdv_is_scale_invariant_in_encoding() {
        let (mut store, critic) = fdv_fixture(false);
        let base = [0.3, -1.2, 0.8, 2.0];
        let mut values = Vec::new();
        for k in [1.0, 0.01, 250.0] {
            pin_encoding(&mut store, &critic, &base.map(|x| x * k));
            let mut tape = Tape::inference();
            let s = tape.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
            let out = critic.score(&mut tape, &store, &[2], s).unwrap();
            values.push(tape.value(out).item());
        }
        assert_relative_eq!(values[0], values[1], max_relative = 1e-8);
        assert_relative_eq!(values[0], values[2], max_relative = 1e-8);
    }
}
