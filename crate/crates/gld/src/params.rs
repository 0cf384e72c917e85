//! Ordered, seeded parameter storage and the safetensors checkpoint container.
//!
//! Candle's own variable map is hash-ordered and its CPU random generator
//! cannot be seeded, so every parameter here is drawn from a ChaCha stream in
//! registration order and kept in a name-sorted list. That ordering is what
//! makes initialization, gradient clipping and checksums reproducible.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{GldError, Result};

pub const FORMAT_VERSION: &str = "1";

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Runs `f` with `name` pushed onto the parameter-name prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    fn register(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let full = self.full_name(name);
        if self.vars.contains_key(&full) {
            return Err(GldError::InvalidArgument(format!("duplicate parameter {full}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(full, var);
        Ok(out)
    }

    /// Gaussian parameter with the given standard deviation.
    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.register(name, data, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, vec![0.0; n], shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, vec![1.0; n], shape)
    }

    /// Gaussian draws from the store's stream that are *not* registered as
    /// parameters (used for fixed buffers).
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Parameters in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over parameter names, shapes and little-endian `f32` values in
    /// name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals: Vec<f32> = var
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }

    /// Copies parameter values from `tensors`; every registered name must be
    /// present with a matching shape.
    pub fn load_from(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| GldError::MissingAsset(format!("parameter {name} in checkpoint")))?;
            if t.dims() != var.dims() {
                return Err(GldError::InvalidArgument(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if tensors.len() != self.vars.len() {
            return Err(GldError::InvalidArgument(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Checkpoint file: parameters as `f32` safetensors plus string metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn get_meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| GldError::MissingAsset(format!("checkpoint metadata key `{key}`")))
    }

    pub fn kind(&self) -> Result<&str> {
        self.get_meta("kind")
    }

    pub fn fingerprint(&self) -> Result<&str> {
        self.get_meta("fingerprint")
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        let found = self.kind()?;
        if found != kind {
            return Err(GldError::format(
                path,
                format!("expected a {kind} checkpoint, found {found}"),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    mut metadata: BTreeMap<String, String>,
) -> Result<String> {
    let fingerprint = store.checksum()?;
    metadata.insert("format_version".into(), FORMAT_VERSION.into());
    metadata.insert("fingerprint".into(), fingerprint.clone());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| GldError::io(parent, e))?;
    }
    let tensors = store.tensors()?;
    let info: HashMap<String, String> = metadata.into_iter().collect();
    safetensors::serialize_to_file(tensors, Some(info), path)
        .map_err(|e| GldError::format(path, e))?;
    Ok(fingerprint)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(GldError::MissingAsset(format!("checkpoint {}", path.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| GldError::io(path, e))?;
    let (_, meta) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| GldError::format(path, e))?;
    let metadata: BTreeMap<String, String> = meta
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    match metadata.get("format_version") {
        Some(v) if v == FORMAT_VERSION => {}
        Some(v) => {
            return Err(GldError::format(path, format!("unsupported checkpoint version {v}")))
        }
        None => return Err(GldError::format(path, "checkpoint has no format_version")),
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Checkpoint { metadata, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let build = |seed| {
            let mut s = ParamStore::new(seed, DType::F32);
            s.scoped("a", |s| s.randn("w", &[3, 4], 0.1)).unwrap();
            s.zeros("b", &[4]).unwrap();
            s
        };
        assert_eq!(build(1).checksum().unwrap(), build(1).checksum().unwrap());
        assert_ne!(build(1).checksum().unwrap(), build(2).checksum().unwrap());
        let names: Vec<_> = build(1).names().map(String::from).collect();
        assert_eq!(names, ["a.w", "b"]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut s = ParamStore::new(3, DType::F32);
        s.randn("w", &[2, 5], 1.0).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "test".into());
        let fp = save_checkpoint(&path, &s, meta).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind().unwrap(), "test");
        assert_eq!(ck.fingerprint().unwrap(), fp);
        let mut fresh = ParamStore::new(99, DType::F32);
        fresh.randn("w", &[2, 5], 1.0).unwrap();
        fresh.load_from(&ck.tensors).unwrap();
        assert_eq!(fresh.checksum().unwrap(), fp);
        assert!(matches!(
            load_checkpoint(&dir.path().join("none")),
            Err(GldError::MissingAsset(_))
        ));
    }
}
