//! Named parameter storage, gradient accumulation, and the checkpoint file
//! format (JSON header + flat little-endian f32 payload).

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam first/second moments plus the per-parameter step counter.
#[derive(Debug, Clone)]
pub struct MomentState<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub value: Tensor<T>,
    /// Running statistics and other frozen state are registered with
    /// `trainable = false`; the optimizer skips them.
    pub trainable: bool,
    pub opt: Option<MomentState<T>>,
}

/// All model parameters, keyed by dotted path. Iteration order is the sorted
/// key order, which keeps optimizer sweeps and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(CoreError::invalid("param_store", format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, ParamEntry { value, trainable, opt: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| CoreError::invalid("param_store", format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| CoreError::invalid("param_store", format!("unknown parameter {name}")))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| CoreError::invalid("param_store", format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar elements across trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Convert every tensor to another element type (optimizer state is not
    /// carried over).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry { value: e.value.cast::<U>(), trainable: e.trainable, opt: None },
                    )
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

/// Accumulated gradients keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct GradStore<T: Scalar> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        GradStore { grads: BTreeMap::new() }
    }

    /// Add `grad` into the slot for `name`, enforcing shape agreement with
    /// whatever was accumulated before.
    pub fn accumulate(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        match self.grads.get_mut(name) {
            None => {
                self.grads.insert(name.to_string(), grad);
                Ok(())
            }
            Some(acc) => acc.add_assign(&grad).map_err(|_| {
                CoreError::shape(
                    "grad_store",
                    format!("gradient shape {:?} does not match parameter {name}", grad.shape()),
                )
            }),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 4],
    /// Byte offset into the payload that follows the header.
    offset: u64,
    trainable: bool,
}

/// Layout: `u64 LE header length | header JSON | f32 LE payload`.
fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut records = Vec::new();
    let mut offset = 0u64;
    for (name, entry) in store.iter() {
        records.push(TensorRecord {
            name: name.to_string(),
            shape: entry.value.shape(),
            offset,
            trainable: entry.trainable,
        });
        offset += (entry.value.len() * 4) as u64;
    }
    let header = serde_json::to_vec(&CheckpointHeader { version: CHECKPOINT_VERSION, tensors: records })?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for (_, entry) in store.iter() {
        for &v in entry.value.data() {
            f.write_all(&(v.to_fp() as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)
        .map_err(|_| CoreError::Checkpoint(format!("{}: truncated header length", path.display())))?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)
        .map_err(|_| CoreError::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "{}: version {} unsupported (expected {CHECKPOINT_VERSION})",
            path.display(),
            header.version
        )));
    }

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut store = ParamStore::new();
    for rec in &header.tensors {
        let count: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(CoreError::Checkpoint(format!(
                "{}: tensor {} extends past payload",
                path.display(),
                rec.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(CoreError::Checkpoint(format!(
                    "{}: tensor {} contains non-finite values",
                    path.display(),
                    rec.name
                )));
            }
            data.push(T::from_fp(v as f64));
        }
        store.register(rec.name.clone(), Tensor::from_vec(rec.shape, data)?, rec.trainable)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps: ParamStore<f32> = ParamStore::new();
        ps.register("a.w", Tensor::zeros([1, 1, 2, 2]), true).unwrap();
        assert!(ps.register("a.w", Tensor::zeros([1, 1, 2, 2]), true).is_err());
    }

    #[test]
    fn grad_accumulate_checks_shapes() {
        let mut g: GradStore<f32> = GradStore::new();
        g.accumulate("w", Tensor::filled([1, 1, 1, 2], 1.0)).unwrap();
        g.accumulate("w", Tensor::filled([1, 1, 1, 2], 2.0)).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[3.0, 3.0]);
        assert!(g.accumulate("w", Tensor::zeros([1, 1, 2, 1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut ps: ParamStore<f32> = ParamStore::new();
        ps.register("conv.w", Tensor::randn([4, 3, 3, 3], 0.2, &mut rng), true).unwrap();
        ps.register("bn.running_mean", Tensor::randn([1, 4, 1, 1], 1.0, &mut rng), false).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ps.save(&path).unwrap();
        let loaded: ParamStore<f32> = ParamStore::load(&path).unwrap();

        assert_eq!(loaded.get("conv.w").unwrap(), ps.get("conv.w").unwrap());
        let (_, entry) = loaded.iter().find(|(n, _)| *n == "bn.running_mean").unwrap();
        assert!(!entry.trainable);
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let header = serde_json::to_vec(&CheckpointHeader { version: 99, tensors: vec![] }).unwrap();
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend(header);
        std::fs::write(&path, bytes).unwrap();
        let err = ParamStore::<f32>::load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
