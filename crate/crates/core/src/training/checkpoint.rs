//! Binary checkpoints: the magic `VCNMT1`, a version byte, a little-endian
//! `u32` record count, then records of
//! `u32 name length | name | u8 rank | u32 dims… | f32 data…`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{ParamGroup, ParamStore, Tensor};

use super::optim::Adam;

const MAGIC: &[u8; 6] = b"VCNMT1";
const VERSION: u8 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_STEPS: &str = "adam.steps";
const ADAM_HYPER: &str = "adam.hyper";
const GLOBAL_STEP: &str = "train.step";

/// Named tensors as stored on disk, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, adam: Option<&Adam>, step: u64) -> Self {
        let p = model.params();
        let mut tensors: Vec<(String, Tensor)> =
            p.ids().map(|id| (p.name(id).to_string(), p.get(id).clone())).collect();
        if let Some(a) = adam {
            for id in p.ids() {
                tensors.push((format!("{ADAM_M}{}", p.name(id)), a.m[id.index()].clone()));
            }
            for id in p.ids() {
                tensors.push((format!("{ADAM_V}{}", p.name(id)), a.v[id.index()].clone()));
            }
            // Step counts stay exact in f32 up to 2^24.
            let steps = a.steps.iter().map(|&s| s as f32).collect();
            tensors.push((ADAM_STEPS.into(), Tensor::vector(steps)));
            tensors.push((ADAM_HYPER.into(), Tensor::vector(vec![a.beta1, a.beta2, a.eps])));
        }
        tensors.push((GLOBAL_STEP.into(), Tensor::vector(vec![step as f32])));
        Checkpoint { tensors }
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn step(&self) -> u64 {
        self.get(GLOBAL_STEP).map_or(0, |t| t.data()[0] as u64)
    }

    pub fn param_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if !name.starts_with("adam.") && !name.starts_with("train.") {
                store.add(name.clone(), t.clone(), ParamGroup::Base);
            }
        }
        store
    }

    /// Rebuilds a model for `config`; every tensor must match in shape.
    pub fn model(&self, config: ModelConfig) -> Result<Model> {
        Model::from_params(config, &self.param_store())
    }

    /// Optimizer state aligned with `model`'s parameters, if saved.
    pub fn adam(&self, model: &Model) -> Result<Option<Adam>> {
        let (Some(steps), Some(hyper)) = (self.get(ADAM_STEPS), self.get(ADAM_HYPER)) else {
            return Ok(None);
        };
        let p = model.params();
        let h = hyper.data();
        let mut adam = Adam::new(p, h[0], h[1], h[2]);
        if steps.numel() != p.len() {
            return Err(Error::Format("optimizer step count does not match parameters".into()));
        }
        for id in p.ids() {
            let name = p.name(id);
            for (prefix, slot) in [(ADAM_M, &mut adam.m), (ADAM_V, &mut adam.v)] {
                let t = self
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Format(format!("missing {prefix}{name}")))?;
                if t.shape() != p.get(id).shape() {
                    return Err(Error::Compatibility {
                        name: format!("{prefix}{name}"),
                        expected: p.get(id).shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                slot[id.index()] = t.clone();
            }
            adam.steps[id.index()] = steps.data()[id.index()] as u64;
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Checkpoint { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: Option<&Adam>, step: u64) -> Result<()> {
    let bytes = Checkpoint::from_model(model, adam, step).to_bytes();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
