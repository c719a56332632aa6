//! Datasets: the Hénon toy models, MNIST IDX ingestion, step imbalance,
//! splits, label binning and a simple binary dump format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::rng::{indexed_stream, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub seed: u64,
    pub spec_hash: String,
    /// Ground-truth sources, when the generator knows them.
    pub sources: Option<Tensor>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            classes,
            split: Split::Train,
            seed: 0,
            spec_hash: String::new(),
            sources: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return config(format!("{} feature rows but {} labels", self.features.rows(), self.labels.len()));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return config(format!("label {bad} out of range for {} classes", self.classes));
        }
        if let Some(s) = &self.sources {
            if s.rows() != self.labels.len() {
                return config("source rows do not match labels");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    /// Row indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.classes];
        self.labels.iter().enumerate().for_each(|(i, &y)| idx[y].push(i));
        idx
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
            seed: self.seed,
            spec_hash: self.spec_hash.clone(),
            sources: self.sources.as_ref().map(|s| s.select_rows(idx)),
        }
    }

    /// Rows whose label is in `keep`, labels unchanged.
    pub fn filter_classes(&self, keep: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("spec serialises");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    #[default]
    Henon,
    None,
}

/// How the toy spread vectors are read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    #[default]
    Std,
    Variance,
}

/// `z1 = 1 - 1.4 s1^2 + s2`, `z2 = 0.3 s1`.
pub fn henon(s: [f64; 2]) -> [f64; 2] {
    [1.0 - 1.4 * s[0] * s[0] + s[1], 0.3 * s[0]]
}

pub fn henon_inverse(z: [f64; 2]) -> [f64; 2] {
    let s1 = z[1] / 0.3;
    [s1, z[0] - 1.0 + 1.4 * s1 * s1]
}

/// Apply the generator's mixing map row-wise.
pub fn mix(sources: &Tensor, mixing: Mixing) -> Tensor {
    match mixing {
        Mixing::None => sources.clone(),
        Mixing::Henon => {
            let mut out = sources.clone();
            for i in 0..sources.rows() {
                let z = henon([sources.get(i, 0), sources.get(i, 1)]);
                out.set(i, 0, z[0]);
                out.set(i, 1, z[1]);
            }
            out
        }
    }
}

/// Exact inverse of [`mix`].
pub fn unmix(features: &Tensor, mixing: Mixing) -> Tensor {
    match mixing {
        Mixing::None => features.clone(),
        Mixing::Henon => {
            let mut out = features.clone();
            for i in 0..features.rows() {
                let s = henon_inverse([features.get(i, 0), features.get(i, 1)]);
                out.set(i, 0, s[0]);
                out.set(i, 1, s[1]);
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub means: Vec<[f64; 2]>,
    pub spreads: Vec<[f64; 2]>,
    /// Samples per class.
    pub counts: Vec<usize>,
    #[serde(default)]
    pub mixing: Mixing,
    #[serde(default)]
    pub spread_kind: SpreadKind,
}

impl ToySpec {
    /// Seven 2-D Gaussian groups, 2000 samples each.
    pub fn seven_class() -> Self {
        Self {
            means: vec![[-0.5, -1.0], [2.0, 1.0], [5.0, 2.0], [1.0, 3.0], [-2.0, 1.0], [-3.5, 4.0], [-4.0, -1.0]],
            spreads: vec![[0.5, 0.5], [3.0, 1.0], [1.0, 2.0], [0.3, 2.0], [1.0, 0.2], [1.0, 1.0], [2.0, 0.3]],
            counts: vec![2000; 7],
            mixing: Mixing::Henon,
            spread_kind: SpreadKind::Std,
        }
    }

    pub fn with_counts(mut self, counts: Vec<usize>) -> Self {
        self.counts = counts;
        self
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.means.len();
        if m == 0 || self.spreads.len() != m || self.counts.len() != m {
            return config("toy spec needs equal-length means, spreads and counts");
        }
        if self.spreads.iter().flatten().any(|&v| !(v > 0.0)) {
            return config("toy spreads must be strictly positive");
        }
        Ok(())
    }

    fn std(&self, class: usize) -> [f64; 2] {
        let s = self.spreads[class];
        match self.spread_kind {
            SpreadKind::Std => s,
            SpreadKind::Variance => [s[0].sqrt(), s[1].sqrt()],
        }
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Draw `counts[m]` sources for each class `m`; classes use independent streams.
    pub fn sample_sources(&self, seed: u64, label: &str) -> Result<(Tensor, Vec<usize>)> {
        self.validate()?;
        let total: usize = self.counts.iter().sum();
        let mut data = Vec::with_capacity(total * 2);
        let mut labels = Vec::with_capacity(total);
        for (m, &n) in self.counts.iter().enumerate() {
            let mut rng = indexed_stream(seed, label, m as u64);
            let mu = self.means[m];
            let sd = self.std(m);
            for _ in 0..n {
                for a in 0..2 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    data.push(mu[a] + sd[a] * e);
                }
                labels.push(m);
            }
        }
        Ok((Tensor::matrix(total, 2, data)?, labels))
    }
}

/// Toy dataset with ground-truth sources retained.
pub fn generate_toy(spec: &ToySpec, seed: u64) -> Result<Dataset> {
    generate_toy_split(spec, seed, Split::Train)
}

/// Same generator with an independent stream per split.
pub fn generate_toy_split(spec: &ToySpec, seed: u64, split: Split) -> Result<Dataset> {
    let label = match split {
        Split::Train => "toy.train",
        Split::Validation => "toy.validation",
        Split::Test => "toy.test",
    };
    let (sources, labels) = spec.sample_sources(seed, label)?;
    let features = mix(&sources, spec.mixing);
    Ok(Dataset {
        features,
        labels,
        classes: spec.classes(),
        split,
        seed,
        spec_hash: spec.hash(),
        sources: Some(sources),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeSpec {
    pub classes: usize,
    pub per_class: usize,
    pub validation_per_class: usize,
    pub std: f64,
    /// Class means are uniform in `(-range, range)^2`.
    pub range: f64,
    #[serde(default)]
    pub mixing: Mixing,
}

impl Default for ExtremeSpec {
    fn default() -> Self {
        Self { classes: 1000, per_class: 20, validation_per_class: 20, std: 0.1, range: 4.0, mixing: Mixing::Henon }
    }
}

impl ExtremeSpec {
    pub fn toy_spec(&self, seed: u64) -> Result<ToySpec> {
        if self.classes == 0 || !(self.std > 0.0) || !(self.range > 0.0) {
            return config("extreme toy needs classes > 0, std > 0 and range > 0");
        }
        let mut rng = stream(seed, "extreme.means");
        let means = (0..self.classes)
            .map(|_| [rng.random_range(-self.range..self.range), rng.random_range(-self.range..self.range)])
            .collect();
        Ok(ToySpec {
            means,
            spreads: vec![[self.std; 2]; self.classes],
            counts: vec![self.per_class; self.classes],
            mixing: self.mixing,
            spread_kind: SpreadKind::Std,
        })
    }
}

/// Train and validation sets sharing the same class means.
pub fn generate_extreme_toy(spec: &ExtremeSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let toy = spec.toy_spec(seed)?;
    let hash = hash_json(spec);
    let mut train = generate_toy_split(&toy, seed, Split::Train)?;
    let val_spec = toy.with_counts(vec![spec.validation_per_class; spec.classes]);
    let mut val = generate_toy_split(&val_spec, seed, Split::Validation)?;
    train.spec_hash.clone_from(&hash);
    val.spec_hash = hash;
    Ok((train, val))
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn ingest<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Ingestion { offset: offset as u64, message: message.into() })
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => ingest(bytes.len(), format!("file truncated while reading header field at byte {offset}")),
    }
}

/// Parse an IDX image file into `n x (rows*cols)` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return ingest(0, format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let p = rows * cols;
    let need = 16 + n * p;
    if bytes.len() < need {
        return ingest(bytes.len(), format!("image data truncated: need {need} bytes, have {}", bytes.len()));
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::matrix(n, p, data)
}

/// Parse an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return ingest(0, format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"));
    }
    let n = read_u32(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return ingest(bytes.len(), format!("label data truncated: need {need} bytes, have {}", bytes.len()));
    }
    let labels: Vec<usize> = bytes[8..need].iter().map(|&b| b as usize).collect();
    if let Some(i) = labels.iter().position(|&y| y > 9) {
        return ingest(8 + i, format!("label {} out of range 0..=9", labels[i]));
    }
    Ok(labels)
}

/// Load an image/label IDX pair, optionally checking the item count.
pub fn load_mnist_idx(images: &Path, labels: &Path, expected: Option<usize>) -> Result<Dataset> {
    let x = parse_idx_images(&fs::read(images)?)?;
    let y = parse_idx_labels(&fs::read(labels)?)?;
    if x.rows() != y.len() {
        return ingest(4, format!("{} images but {} labels", x.rows(), y.len()));
    }
    if let Some(n) = expected {
        if y.len() != n {
            return ingest(4, format!("expected {n} items, found {}", y.len()));
        }
    }
    Dataset::new(x, y, 10)
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path) -> [(PathBuf, PathBuf); 2] {
    [
        (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")),
        (dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")),
    ]
}

/// Train (60000) and test (10000) sets from a directory of IDX files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [(tx, ty), (vx, vy)] = mnist_paths(dir);
    let train = load_mnist_idx(&tx, &ty, Some(60_000))?;
    let test = load_mnist_idx(&vx, &vy, Some(10_000))?.with_split(Split::Test);
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    /// Target training count per class.
    pub counts: Vec<usize>,
    /// Balanced validation count per class.
    pub validation_per_class: usize,
}

impl ImbalanceSpec {
    /// Majority classes at `majority`, listed minority classes at `minority`.
    pub fn step(classes: usize, minority_classes: &[usize], majority: usize, minority: usize, validation_per_class: usize) -> Result<Self> {
        if minority >= majority {
            return config(format!("minority count {minority} must be below majority count {majority}"));
        }
        if let Some(bad) = minority_classes.iter().find(|&&c| c >= classes) {
            return config(format!("minority class {bad} out of range"));
        }
        let counts = (0..classes).map(|c| if minority_classes.contains(&c) { minority } else { majority }).collect();
        Ok(Self { counts, validation_per_class })
    }

    pub fn minority_classes(&self) -> Vec<usize> {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        (0..self.counts.len()).filter(|&c| self.counts[c] < max).collect()
    }
}

/// Subsample each class to `counts[c]` without replacement, preserving order.
pub fn subsample_per_class(ds: &Dataset, counts: &[usize], seed: u64, label: &str) -> Result<Dataset> {
    if counts.len() != ds.classes {
        return config(format!("{} class counts for {} classes", counts.len(), ds.classes));
    }
    let mut keep = Vec::new();
    for (c, mut idx) in ds.class_indices().into_iter().enumerate() {
        if idx.len() < counts[c] {
            return config(format!("class {c} has {} samples, {} requested", idx.len(), counts[c]));
        }
        let mut rng = indexed_stream(seed, label, c as u64);
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..counts[c]]);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Training subset with the step-imbalanced class counts.
pub fn apply_step_imbalance(ds: &Dataset, spec: &ImbalanceSpec, seed: u64) -> Result<Dataset> {
    subsample_per_class(ds, &spec.counts, seed, "imbalance")
}

/// Balanced subset with `per_class` rows of every class.
pub fn balanced_subset(ds: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    subsample_per_class(ds, &vec![per_class; ds.classes], seed, "balanced")
}

/// Stratified random split; returns `(train, validation)` with roughly
/// `train_fraction` of each class in train and at least one row in each
/// part when the class has two or more.
pub fn train_val_split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return config(format!("train fraction {train_fraction} outside [0, 1]"));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, mut idx) in ds.class_indices().into_iter().enumerate() {
        let mut rng = indexed_stream(seed, "split", c as u64);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = (train_fraction * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        train.extend_from_slice(&idx[..k]);
        val.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val).with_split(Split::Validation)))
}

/// Quantile binning into `bins` equal-count, order-preserving bins.
pub fn bin_labels(values: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return config("need at least two bins");
    }
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < bins {
        return config(format!("{} distinct values cannot fill {bins} bins", distinct.len()));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub n: usize,
    pub p: usize,
    pub classes: usize,
    pub counts: Vec<usize>,
    pub seed: u64,
    pub spec_hash: String,
    pub split: Split,
    /// Columns of the source blob; 0 when no sources are stored.
    pub source_dim: usize,
}

fn blob_paths(stem: &Path) -> [PathBuf; 4] {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    [with(".json"), with(".features.f64"), with(".labels.u32"), with(".sources.f64")]
}

fn f64_blob(x: &Tensor) -> Vec<u8> {
    x.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f64_blob(path: &Path, n: usize, p: usize) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() != n * p * 8 {
        return ingest(bytes.len(), format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), n * p * 8));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::matrix(n, p, data)
}

/// Write `stem.json` plus little-endian feature, label and source blobs.
pub fn dump_dataset(ds: &Dataset, stem: &Path) -> Result<()> {
    let [header, feats, labels, sources] = blob_paths(stem);
    let h = DumpHeader {
        n: ds.len(),
        p: ds.dim(),
        classes: ds.classes,
        counts: ds.counts(),
        seed: ds.seed,
        spec_hash: ds.spec_hash.clone(),
        split: ds.split,
        source_dim: ds.sources.as_ref().map_or(0, Tensor::cols),
    };
    fs::write(header, serde_json::to_string_pretty(&h)?)?;
    fs::write(feats, f64_blob(&ds.features))?;
    let lab: Vec<u8> = ds.labels.iter().flat_map(|&y| (y as u32).to_le_bytes()).collect();
    fs::write(labels, lab)?;
    if let Some(s) = &ds.sources {
        fs::write(sources, f64_blob(s))?;
    }
    Ok(())
}

pub fn load_dataset(stem: &Path) -> Result<Dataset> {
    let [header, feats, labels, sources] = blob_paths(stem);
    let h: DumpHeader = serde_json::from_str(&fs::read_to_string(header)?)?;
    let features = read_f64_blob(&feats, h.n, h.p)?;
    let bytes = fs::read(&labels)?;
    if bytes.len() != h.n * 4 {
        return ingest(bytes.len(), format!("label blob holds {} bytes, expected {}", bytes.len(), h.n * 4));
    }
    let labels: Vec<usize> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let sources = if h.source_dim > 0 { Some(read_f64_blob(&sources, h.n, h.source_dim)?) } else { None };
    let ds = Dataset {
        features,
        labels,
        classes: h.classes,
        split: h.split,
        seed: h.seed,
        spec_hash: h.spec_hash,
        sources,
    };
    ds.validate()?;
    if ds.counts() != h.counts {
        return config("class counts in header do not match label blob");
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn henon_examples() {
        assert_eq!(henon([0.0, 0.0]), [1.0, 0.0]);
        let z = henon([1.0, 1.0]);
        assert_relative_eq!(z[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(z[1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn seven_class_spec_matches_table() {
        let spec = ToySpec::seven_class();
        assert_eq!(spec.means[5], [-3.5, 4.0]);
        assert_eq!(spec.spreads[3], [0.3, 2.0]);
        assert_eq!(spec.counts.iter().sum::<usize>(), 14_000);
        let ds = generate_toy(&spec, 7).unwrap();
        assert_eq!(ds.len(), 14_000);
        assert_eq!(ds.counts(), vec![2000; 7]);
    }

    #[test]
    fn toy_sources_are_recovered_by_inverse_map() {
        let ds = generate_toy(&ToySpec::seven_class(), 3).unwrap();
        let s = ds.sources.as_ref().unwrap();
        for i in 0..ds.len() {
            let back = henon_inverse([ds.features.get(i, 0), ds.features.get(i, 1)]);
            let scale = s.row(i).iter().map(|v| v.abs()).fold(1.0, f64::max);
            assert!((back[0] - s.get(i, 0)).abs() <= 1e-12 * scale);
            assert!((back[1] - s.get(i, 1)).abs() <= 1e-12 * scale * scale);
        }
    }

    #[test]
    fn toy_class_moments_follow_spec() {
        let spec = ToySpec::seven_class();
        let ds = generate_toy(&spec.clone().with_counts(vec![20_000; 7]), 5).unwrap();
        let s = ds.sources.unwrap();
        for (m, idx) in ds.labels.chunks(20_000).enumerate() {
            assert!(idx.iter().all(|&y| y == m));
            let rows: Vec<usize> = (m * 20_000..(m + 1) * 20_000).collect();
            let (mean, std) = crate::augment::column_moments(&s.select_rows(&rows));
            for a in 0..2 {
                assert!((mean[a] - spec.means[m][a]).abs() < 0.05 * spec.spreads[m][a].max(1.0));
                assert!((std[a] / spec.spreads[m][a] - 1.0).abs() < 0.03);
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_toy(&ToySpec::seven_class(), 11).unwrap();
        let b = generate_toy(&ToySpec::seven_class(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.features, generate_toy(&ToySpec::seven_class(), 12).unwrap().features);
    }

    #[test]
    fn extreme_toy_layout() {
        let spec = ExtremeSpec { per_class: 5, ..ExtremeSpec::default() };
        let (train, val) = generate_extreme_toy(&spec, 1).unwrap();
        assert_eq!(train.len(), 5000);
        assert_eq!(val.len(), 20_000);
        assert_eq!(val.counts(), vec![20; 1000]);
        let s = train.sources.unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 4.0 + 10.0 * 0.1));
    }

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(LABEL_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn idx_parsing_and_errors() {
        let x = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 9, 0])).unwrap(), vec![3, 9, 0]);

        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Ingestion { offset: 0, .. })));
        let short = idx_images(3, 2, 2, &[0; 5]);
        assert!(matches!(parse_idx_images(&short), Err(Error::Ingestion { offset: 21, .. })));
        assert!(matches!(parse_idx_labels(&idx_labels(&[1, 12])), Err(Error::Ingestion { offset: 9, .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn idx_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (xi, yi) = (dir.path().join("x"), dir.path().join("y"));
        fs::write(&xi, idx_images(2, 1, 1, &[1, 2])).unwrap();
        fs::write(&yi, idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_mnist_idx(&xi, &yi, None), Err(Error::Ingestion { .. })));
        fs::write(&yi, idx_labels(&[1, 2])).unwrap();
        assert_eq!(load_mnist_idx(&xi, &yi, None).unwrap().len(), 2);
        assert!(load_mnist_idx(&xi, &yi, Some(60_000)).is_err());
    }

    #[test]
    fn step_imbalance_hits_exact_counts() {
        let ds = generate_toy(&ToySpec::seven_class().with_counts(vec![300; 7]), 2).unwrap();
        let spec = ImbalanceSpec::step(7, &[2, 5], 250, 20, 0).unwrap();
        let out = apply_step_imbalance(&ds, &spec, 9).unwrap();
        assert_eq!(out.counts(), spec.counts);
        assert_eq!(spec.minority_classes(), vec![2, 5]);
        // Every kept row is an original row, none repeated.
        let originals: Vec<&[f64]> = (0..ds.len()).map(|i| ds.features.row(i)).collect();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..out.len() {
            let pos = originals.iter().position(|r| *r == out.features.row(i)).unwrap();
            assert!(seen.insert(pos));
        }
        let too_many = ImbalanceSpec::step(7, &[0], 400, 10, 0).unwrap();
        assert!(apply_step_imbalance(&ds, &too_many, 9).is_err());
        assert!(ImbalanceSpec::step(7, &[0], 10, 10, 0).is_err());
    }

    #[test]
    fn split_is_stratified_eight_two() {
        let ds = generate_toy(&ToySpec::seven_class().with_counts(vec![100, 50, 5, 2, 100, 100, 100]), 4).unwrap();
        let (tr, va) = train_val_split(&ds, 0.8, 1).unwrap();
        assert_eq!(tr.counts(), vec![80, 40, 4, 1, 80, 80, 80]);
        assert_eq!(va.counts(), vec![20, 10, 1, 1, 20, 20, 20]);
        assert_eq!(va.split, Split::Validation);
    }

    #[test]
    fn binning_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(bin_labels(&v, 2).unwrap(), vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert!(bin_labels(&[1.0, 1.0, 2.0], 3).is_err());
        assert!(bin_labels(&v, 1).is_err());
    }

    proptest! {
        #[test]
        fn bins_are_balanced_and_ordered(values in prop::collection::vec(-1e3f64..1e3, 10..300), bins in 2usize..10) {
            let labels = bin_labels(&values, bins).unwrap();
            let mut counts = vec![0usize; bins];
            labels.iter().for_each(|&b| counts[b] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(labels[i] <= labels[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_toy(&ToySpec::seven_class().with_counts(vec![3; 7]), 8).unwrap();
        let stem = dir.path().join("toy");
        dump_dataset(&ds, &stem).unwrap();
        assert_eq!(load_dataset(&stem).unwrap(), ds);
        let blob = fs::read(dir.path().join("toy.features.f64")).unwrap();
        assert_eq!(&blob[..8], &ds.features.data()[0].to_le_bytes());
        fs::write(dir.path().join("toy.labels.u32"), [0u8; 3]).unwrap();
        assert!(matches!(load_dataset(&stem), Err(Error::Ingestion { .. })));
    }
}
