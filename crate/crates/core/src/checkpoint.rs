//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `FIACKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` values in header
//! order. Optimizer moments are stored as tensors named `optim/m/<param>` and
//! `optim/v/<param>`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{FlowSourceKind, ModelConfig};
use crate::diffusion_engine::TryOnPipeline;
use crate::error::{FiaError, Result};
use crate::flow_guider::{FlowEstimator, FlowSource};
use crate::latent_codec::LatentCodec;
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"FIACKPT1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    /// Stream index of the next training step.
    pub next_stream: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub config: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

/// Parsed checkpoint: header plus named `f32` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn namespace_names(&self, prefix: &str) -> Vec<&str> {
        self.tensors.keys().filter(|k| k.starts_with(prefix)).map(String::as_str).collect()
    }
}

fn tensor_values(t: &Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
    Ok((t.dims().to_vec(), t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?))
}

/// Captures the full training state of `p`.
pub fn capture(p: &TryOnPipeline) -> Result<Checkpoint> {
    let mut tensors = p.store.snapshot()?;
    if let Some(s) = p.codec.store() {
        tensors.extend(s.snapshot()?);
    }
    if let Some(e) = p.flow.estimator() {
        tensors.extend(e.store().snapshot()?);
    }
    for (name, (m, v)) in p.optimizer.moments() {
        tensors.insert(format!("optim/m/{name}"), tensor_values(m)?);
        tensors.insert(format!("optim/v/{name}"), tensor_values(v)?);
    }
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, (shape, data))| {
            let e = TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += data.len();
            e
        })
        .collect();
    Ok(Checkpoint {
        header: Header {
            config: p.config.clone(),
            config_hash: p.config.config_hash(),
            step: p.step,
            optimizer_step: p.optimizer.step_count(),
            rng: RngState {
                algorithm: "chacha8-step-stream".into(),
                seed: p.config.seed,
                next_stream: p.step,
            },
            tensors: entries,
        },
        tensors,
    })
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ckpt.header)?;
    let total: usize = ckpt.tensors.values().map(|(_, d)| d.len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + 4 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in &ckpt.header.tensors {
        for v in &ckpt.tensors[&e.name].1 {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| FiaError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    if header.config_hash != header.config.config_hash() {
        return Err(bad("config hash does not match the stored config"));
    }
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let lo = e.offset * 4;
        let hi = lo + n * 4;
        if hi > data.len() {
            return Err(bad(&format!("tensor {} runs past the end of the file", e.name)));
        }
        let vals = data[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name.clone(), (e.shape.clone(), vals));
    }
    Ok(Checkpoint { header, tensors })
}

/// Writes the checkpoint of `p` to `path` through a temporary file and a
/// rename, so readers never observe a partial file.
pub fn save(p: &TryOnPipeline, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(&capture(p)?)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| FiaError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

fn fill_store(store: &ParamStore, ckpt: &Checkpoint) -> Result<()> {
    store.load_snapshot(&ckpt.tensors)
}

/// Rebuilds the pipeline, frozen modules and optimizer state included.
pub fn restore(ckpt: &Checkpoint) -> Result<TryOnPipeline> {
    let config = &ckpt.header.config;
    let codec = LatentCodec::for_config(config, config.seed)?;
    if let Some(s) = codec.store() {
        fill_store(s, ckpt)?;
    }
    let flow = match config.flow_source {
        FlowSourceKind::Oracle => FlowSource::Oracle,
        FlowSourceKind::Zero => FlowSource::Zero,
        FlowSourceKind::Learned => {
            let est = FlowEstimator::new(config, config.seed)?;
            fill_store(est.store(), ckpt)?;
            FlowSource::Learned(Box::new(est))
        }
    };
    let mut p = TryOnPipeline::new(config, codec, flow)?;
    fill_store(&p.store, ckpt)?;
    let mut moments = BTreeMap::new();
    for name in p.store.names() {
        let m = ckpt.tensors.get(&format!("optim/m/{name}"));
        let v = ckpt.tensors.get(&format!("optim/v/{name}"));
        if let (Some((sm, m)), Some((sv, v))) = (m, v) {
            moments.insert(
                name.clone(),
                (
                    Tensor::from_vec(m.clone(), sm.as_slice(), &Device::Cpu)?,
                    Tensor::from_vec(v.clone(), sv.as_slice(), &Device::Cpu)?,
                ),
            );
        }
    }
    p.optimizer.restore(ckpt.header.optimizer_step, moments);
    p.step = ckpt.header.step;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic_data::generate_dataset;

    fn pipeline(config: &ModelConfig) -> TryOnPipeline {
        TryOnPipeline::new(config, LatentCodec::for_config(config, 0).unwrap(), FlowSource::Oracle).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let p = pipeline(&ModelConfig::tiny());
        let c = capture(&p).unwrap();
        let back = from_bytes(&to_bytes(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(from_bytes(b"NOTACKPT").is_err());
        let mut bytes = to_bytes(&c).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let config = ModelConfig::tiny();
        let samples = generate_dataset(6, &config, 9).unwrap();
        let mut a = pipeline(&config);
        let data = a.prepare(&samples).unwrap();
        for _ in 0..2 {
            a.training_step(&data).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save(&a, &path).unwrap();
        for _ in 0..2 {
            a.training_step(&data).unwrap();
        }
        let mut b = restore(&load(&path).unwrap()).unwrap();
        assert_eq!(b.step, 2);
        for _ in 0..2 {
            b.training_step(&data).unwrap();
        }
        assert_eq!(to_bytes(&capture(&a).unwrap()).unwrap(), to_bytes(&capture(&b).unwrap()).unwrap());
    }
}
