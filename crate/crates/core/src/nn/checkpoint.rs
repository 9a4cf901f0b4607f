//! `EKCP` checkpoints: magic, `u16` version, `u32` manifest length, a JSON
//! manifest of `(name, shape, offset)` entries plus the model config, then
//! little-endian `f64` payloads. Offsets count bytes from the payload start.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{FeatureNorm, Model, ModelConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EKCP";
const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

/// A model plus auxiliary named tensors (calibrated threshold and the like).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub extras: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            extras: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_extra(&mut self, name: &str, t: Tensor) {
        match self.extras.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.extras.push((name.to_string(), t)),
        }
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        let m = &self.model;
        let vector = |v: &[f64]| Tensor {
            shape: vec![v.len()],
            values: v.to_vec(),
            grad: None,
        };
        let mut out: Vec<(String, Tensor)> = m
            .params
            .names
            .iter()
            .cloned()
            .zip(m.params.tensors.iter().map(|t| Tensor {
                grad: None,
                ..t.clone()
            }))
            .collect();
        out.push(("norm_w.mean".into(), vector(&m.norm_w.mean)));
        out.push(("norm_w.inv_std".into(), vector(&m.norm_w.inv_std)));
        out.push(("norm_u.mean".into(), vector(&m.norm_u.mean)));
        out.push(("norm_u.inv_std".into(), vector(&m.norm_u.inv_std)));
        out.extend(self.extras.iter().cloned());
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named();
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            config: self.model.config.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(10 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &named {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut head = [0u8; 10];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("not an EKCP checkpoint".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mlen = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
        if r.len() < mlen {
            return Err(Error::Format("truncated checkpoint manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..mlen])
            .map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
        let payload = &r[mlen..];

        let mut model = Model::new(manifest.config, 0)?;
        let mut loaded = vec![false; model.params.len()];
        let mut norms: [Option<Vec<f64>>; 4] = Default::default();
        let mut extras = Vec::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "tensor {} runs past the payload",
                    e.name
                )));
            }
            let values: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let norm_slot = [
                "norm_w.mean",
                "norm_w.inv_std",
                "norm_u.mean",
                "norm_u.inv_std",
            ]
            .iter()
            .position(|k| *k == e.name);
            if let Some(i) = model.params.index_of(&e.name) {
                let t = &mut model.params.tensors[i];
                if t.shape != e.shape {
                    return Err(Error::Format(format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        e.name, e.shape, t.shape
                    )));
                }
                t.values = values;
                loaded[i] = true;
            } else if let Some(k) = norm_slot {
                norms[k] = Some(values);
            } else {
                extras.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
            }
        }
        if let Some(i) = loaded.iter().position(|l| !l) {
            return Err(Error::Format(format!(
                "checkpoint lacks tensor {}",
                model.params.names[i]
            )));
        }
        let [wm, ws, um, us] = norms;
        let dims = (model.config.whisper_dim, model.config.ultra_dim);
        model.norm_w = norm_from(wm, ws, dims.0)?;
        model.norm_u = norm_from(um, us, dims.1)?;
        Ok(Self { model, extras })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn norm_from(mean: Option<Vec<f64>>, inv_std: Option<Vec<f64>>, dim: usize) -> Result<FeatureNorm> {
    match (mean, inv_std) {
        (Some(mean), Some(inv_std)) if mean.len() == dim && inv_std.len() == dim => {
            Ok(FeatureNorm { mean, inv_std })
        }
        _ => Err(Error::Format(
            "missing or malformed normalization tensors".into(),
        )),
    }
}
