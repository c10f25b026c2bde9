//! Named parameter storage, seeded initialization and the checkpoint codec.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OWSGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters keyed by dotted name. Iteration order (and therefore optimizer
/// order) is the sorted name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

/// Seeded initializer; parameters must be requested in a fixed order.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f32> {
        (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect()
    }

    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<()> {
        assert!(
            !self.vars.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Weight with fan-in scaled uniform init (He-style for the relu nets here).
    pub fn weight(&mut self, init: &mut Init, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        self.insert(name, init.uniform(n, bound), shape)
    }

    pub fn scaled(&mut self, init: &mut Init, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, init.uniform(n, bound), shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .as_tensor()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every parameter out as a flat `f32` vector.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().flatten_all()?.to_vec1::<f32>()?)))
            .collect()
    }

    pub fn set(&self, name: &str, data: Vec<f32>) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let t = Tensor::from_vec(data, var.shape(), &self.device)?;
        var.set(&t)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Parsed checkpoint: the config JSON it was written with, free-form
/// metadata, and the raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

pub fn write_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    meta: &serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    for (name, var) in params.vars() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
        });
        blobs.push(var.as_tensor().flatten_all()?.to_vec1::<f32>()?);
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        meta: meta.clone(),
        tensors,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for blob in blobs {
        for v in blob {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 20 + hlen;
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(&format!("truncated data for `{}`", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
        tensors.insert(entry.name, (entry.shape, data));
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(Checkpoint {
        config: header.config,
        meta: header.meta,
        tensors,
    })
}

/// Loads checkpoint tensors into `params`; names and shapes must match exactly.
pub fn load_into(ckpt: &Checkpoint, params: &ParamStore) -> Result<()> {
    let expected: Vec<&str> = params.names().collect();
    let found: Vec<&str> = ckpt.tensors.keys().map(String::as_str).collect();
    if expected != found {
        let missing: Vec<_> = expected.iter().filter(|n| !ckpt.tensors.contains_key(**n)).collect();
        let extra: Vec<_> = found.iter().filter(|n| !params.contains(n)).collect();
        return Err(Error::Checkpoint(format!(
            "parameter sets differ; missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, (shape, data)) in &ckpt.tensors {
        let want = params.get(name).dims();
        if want != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?} in the checkpoint, model expects {want:?}"
            )));
        }
        params.set(name, data.clone())?;
    }
    Ok(())
}
