//! Flat binary container of named float64 tensors.
//!
//! Layout (little-endian): magic, `u32` version, `u64` metadata length and
//! metadata JSON, `u64` tensor count, then per tensor a `u32` name length,
//! the UTF-8 name, a `u32` rank, `u64` dims and the raw `f64` payload.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use perpeft_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

use super::model::{Injection, RecModel, Scope};
use super::RunConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PPEFTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub components: usize,
    pub routing: Vec<usize>,
    pub personal: Option<(Scope, Injection, usize)>,
    pub epoch: usize,
    pub val_hit30: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn take_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(b)
}

impl Checkpoint {
    pub fn from_model(model: &RecModel, epoch: usize, val_hit30: f64) -> Self {
        let personal = model
            .personal
            .as_ref()
            .map(|p| (p.scope, p.injection, p.table.value().rows()));
        Self {
            meta: CheckpointMeta {
                config: model.config.clone(),
                components: model.n_components(),
                routing: model.routing.clone(),
                personal,
                epoch,
                val_hit30,
            },
            tensors: model
                .params()
                .into_iter()
                .map(|p| (p.name().to_string(), p.value().clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        if &take::<8>(&mut r)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(take(&mut r)?) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(&take_vec(&mut r, meta_len)?)?;
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = String::from_utf8(take_vec(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(take(&mut r)?) as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(take(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take_vec(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model. The tensor set must match the model's exactly.
    pub fn restore(&self, ds: &Dataset, encoder: Arc<EncoderModel>) -> Result<RecModel> {
        let m = &self.meta;
        let mut model = RecModel::new(&m.config, encoder, ds)?;
        let groups = m.routing.iter().copied().max().map_or(1, |x| x + 1);
        if m.components > 1 {
            model.split_into_groups(m.routing.clone(), m.components)?;
        } else {
            model.set_routing(m.routing.clone(), groups)?;
        }
        if let Some((scope, injection, count)) = m.personal {
            model.add_personal(scope, injection, count);
        }
        let mut stored: HashMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in model.params_mut() {
            let t = stored
                .remove(p.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name())))?;
            if t.shape() != p.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    p.value().shape()
                )));
            }
            p.set_value(t.clone());
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }
}
