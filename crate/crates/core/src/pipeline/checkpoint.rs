//! Stage checkpoints: a JSON manifest plus one little-endian f64 blob per
//! tensor, each guarded by its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Stage;
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tensor};

const FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Everything a later stage needs from earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct StageState {
    /// Last completed stage; `None` before stage 1.
    pub stage: Option<Stage>,
    pub config_hash: String,
    pub store: ParamStore,
    /// Optimiser state per stage name.
    pub optimizers: BTreeMap<String, AdamState>,
    /// Epochs run per stage name.
    pub epochs: BTreeMap<String, usize>,
    /// Auxiliary tensors, such as synthetic source sets.
    pub tensors: BTreeMap<String, Tensor>,
}

impl StageState {
    /// Fails unless the last completed stage is `expected`.
    pub fn require(&self, expected: Option<Stage>) -> Result<()> {
        if self.stage == expected {
            Ok(())
        } else {
            Err(Error::StageOrder { expected: stage_name(expected), found: stage_name(self.stage) })
        }
    }
}

fn stage_name(stage: Option<Stage>) -> String {
    match stage {
        Some(s) => format!("{} ({s:?})", s.number()),
        None => "none".to_owned(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Blob {
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    frozen: bool,
    blob: Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Blob>,
    second: BTreeMap<String, Blob>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    stage: Option<Stage>,
    config_hash: String,
    epochs: BTreeMap<String, usize>,
    params: Vec<ParamEntry>,
    optimizers: BTreeMap<String, OptimizerEntry>,
    tensors: BTreeMap<String, Blob>,
}

struct Writer<'a> {
    dir: &'a Path,
    next: usize,
}

impl Writer<'_> {
    fn put(&mut self, shape: &[usize], data: &[f64]) -> Result<Blob> {
        let file = format!("t{:05}.f64", self.next);
        self.next += 1;
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let sha256 = hex::encode(Sha256::digest(&bytes));
        fs::write(self.dir.join(&file), &bytes)?;
        Ok(Blob { shape: shape.to_vec(), file, sha256 })
    }
}

fn read_blob(dir: &Path, blob: &Blob) -> Result<Tensor> {
    let path = dir.join(&blob.file);
    let bytes = fs::read(&path).map_err(|e| Error::Integrity(format!("cannot read {}: {e}", path.display())))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != blob.sha256 {
        return Err(Error::Integrity(format!("{} is corrupted (sha256 {digest}, expected {})", blob.file, blob.sha256)));
    }
    let n: usize = blob.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Integrity(format!("{} holds {} bytes for shape {:?}", blob.file, bytes.len(), blob.shape)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(blob.shape.clone(), data)
}

/// Write `state` into `dir` (created if needed); existing blobs are replaced.
pub fn save_checkpoint(state: &StageState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "f64") {
            fs::remove_file(path)?;
        }
    }
    let mut w = Writer { dir, next: 0 };
    let mut params = Vec::with_capacity(state.store.len());
    for id in state.store.ids() {
        let t = state.store.get(id);
        params.push(ParamEntry {
            name: state.store.name(id).to_owned(),
            frozen: state.store.is_frozen(id),
            blob: w.put(t.shape(), t.data())?,
        });
    }
    let mut optimizers = BTreeMap::new();
    for (stage, opt) in &state.optimizers {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, m) in &opt.first {
            first.insert(name.clone(), w.put(&[m.len()], m)?);
        }
        for (name, v) in &opt.second {
            second.insert(name.clone(), w.put(&[v.len()], v)?);
        }
        optimizers.insert(stage.clone(), OptimizerEntry { config: opt.config, step: opt.step, first, second });
    }
    let mut tensors = BTreeMap::new();
    for (name, t) in &state.tensors {
        tensors.insert(name.clone(), w.put(t.shape(), t.data())?);
    }
    let manifest = Manifest {
        format: FORMAT,
        stage: state.stage,
        config_hash: state.config_hash.clone(),
        epochs: state.epochs.clone(),
        params,
        optimizers,
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read a checkpoint, verifying every blob and, when given, the config hash.
pub fn load_checkpoint(dir: &Path, expected_hash: Option<&str>) -> Result<StageState> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Usage(format!("no checkpoint at {}: {e}", dir.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Integrity(format!("unsupported checkpoint format {}", manifest.format)));
    }
    if let Some(h) = expected_hash {
        if h != manifest.config_hash {
            return Err(Error::Integrity(format!(
                "checkpoint was written with config {}, current config is {h}",
                manifest.config_hash
            )));
        }
    }
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let id = store.add(p.name.clone(), read_blob(dir, &p.blob)?)?;
        store.set_frozen(id, p.frozen);
    }
    let mut optimizers = BTreeMap::new();
    for (stage, o) in &manifest.optimizers {
        let mut state = AdamState::new(o.config);
        state.step = o.step;
        for (name, b) in &o.first {
            state.first.insert(name.clone(), read_blob(dir, b)?.into_data());
        }
        for (name, b) in &o.second {
            state.second.insert(name.clone(), read_blob(dir, b)?.into_data());
        }
        optimizers.insert(stage.clone(), state);
    }
    let mut tensors = BTreeMap::new();
    for (name, b) in &manifest.tensors {
        tensors.insert(name.clone(), read_blob(dir, b)?);
    }
    Ok(StageState {
        stage: manifest.stage,
        config_hash: manifest.config_hash,
        store,
        optimizers,
        epochs: manifest.epochs,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_state() -> StageState {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::from_rows(&[[1.0, -2.5], [0.1, 1e-300]]).unwrap()).unwrap();
        let b = store.add("b.bias", Tensor::vector(vec![f64::MIN_POSITIVE, 3.0])).unwrap();
        store.set_frozen(b, true);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step = 7;
        opt.first.insert("a.weight".into(), vec![0.1, 0.2, 0.3, 0.4]);
        opt.second.insert("a.weight".into(), vec![1e-9, 2e-9, 3e-9, 4e-9]);
        StageState {
            stage: Some(Stage::Demix),
            config_hash: "abc".into(),
            store,
            optimizers: BTreeMap::from([("demix".to_owned(), opt)]),
            epochs: BTreeMap::from([("pretrain".to_owned(), 3), ("demix".to_owned(), 5)]),
            tensors: BTreeMap::from([("synthetic/2".to_owned(), Tensor::from_rows(&[[0.5, 0.25]]).unwrap())]),
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn roundtrip_is_bit_exact_and_stable() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let state = sample_state();
        save_checkpoint(&state, &a).unwrap();
        let loaded = load_checkpoint(&a, Some("abc")).unwrap();
        assert_eq!(loaded, state);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&b));
    }

    #[test]
    fn corruption_and_hash_mismatch_are_integrity_errors() {
        let tmp = tempfile::tempdir().unwrap();
        save_checkpoint(&sample_state(), tmp.path()).unwrap();
        assert!(matches!(load_checkpoint(tmp.path(), Some("other")), Err(Error::Integrity(_))));
        let blob = tmp.path().join("t00000.f64");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[3] ^= 0xff;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_checkpoint(tmp.path(), None), Err(Error::Integrity(_))));
        fs::write(tmp.path().join(MANIFEST), "{not json").unwrap();
        assert!(matches!(load_checkpoint(tmp.path(), None), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_checkpoint_is_usage_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&tmp.path().join("nope"), None), Err(Error::Usage(_))));
    }

    #[test]
    fn stage_order_is_enforced() {
        let mut state = sample_state();
        state.stage = Some(Stage::Pretrain);
        assert!(matches!(state.require(Stage::Augment.previous()), Err(Error::StageOrder { .. })));
        assert!(state.require(Stage::Demix.previous()).is_ok());
    }
}
