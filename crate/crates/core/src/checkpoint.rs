//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DPMT" | u32 version | u32 stage | u64 step | u64 seed
//! u32 len | model config (key=value text)
//! u64 optimizer step
//! tensor table: parameters
//! tensor table: optimizer moments ("m.<name>", "v.<name>")
//!
//! tensor table := u32 count, then per tensor:
//!   u32 name len | name bytes | u32 rank | u32 extent * rank | f32 * numel
//! ```
//!
//! Tables are written in name order, so equal checkpoints serialize to equal
//! bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use bginpaint_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Stage};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"DPMT";
pub const VERSION: u32 = 1;

/// Adaptive-moment state for the parameters trained in `stage`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Optimizer steps completed in `stage`.
    pub step: u64,
    /// Seed of the run; per-step randomness derives from `(seed, stage, step)`,
    /// so this pair is the complete RNG state.
    pub seed: u64,
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model::from_parts(self.config.clone(), self.params.clone(), self.stage)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.stage.as_u32().to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let cfg = self.config.to_kv();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        write_table(&mut out, self.params.iter());
        // "m." sorts before "v.", so the chain is already in name order.
        let moments: Vec<_> = self
            .optimizer
            .m
            .iter()
            .map(|(k, t)| (format!("m.{k}"), t))
            .chain(self.optimizer.v.iter().map(|(k, t)| (format!("v.{k}"), t)))
            .collect();
        write_table(&mut out, moments.iter().map(|(k, t)| (k, *t)));
        out
    }

    /// Parses and validates a checkpoint. `path` is only used in messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(path, format!("bad magic {magic:?}, expected \"DPMT\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version} (this build reads {VERSION})"),
            ));
        }
        let stage = Stage::from_u32(r.u32("stage")?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let cfg_len = r.u32("config length")? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len, "model config")?)
            .map_err(|_| Error::format(path, "model config is not UTF-8"))?;
        let config = ModelConfig::from_kv(cfg_text).map_err(|e| Error::format(path, e.to_string()))?;
        let opt_step = r.u64("optimizer step")?;
        let params = r.table("parameter")?;
        let moments = r.table("optimizer")?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes after the optimizer table", bytes.len() - r.pos),
            ));
        }

        let expected = Model::skeleton(&config, stage)?;
        validate_shapes(&params, &expected, path)?;
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, t) in moments.iter() {
            let (kind, pname) = name
                .split_once('.')
                .ok_or_else(|| Error::format(path, format!("bad moment name {name}")))?;
            let p = params
                .get(pname)
                .map_err(|_| Error::format(path, format!("moment for unknown parameter {pname}")))?;
            if p.shape() != t.shape() {
                return Err(Error::format(
                    path,
                    format!("moment {name} has shape {:?}, parameter has {:?}", t.shape(), p.shape()),
                ));
            }
            match kind {
                "m" => m.insert(pname, t.clone()),
                "v" => v.insert(pname, t.clone()),
                _ => return Err(Error::format(path, format!("bad moment name {name}"))),
            }
        }
        Ok(Self {
            stage,
            step,
            seed,
            config,
            params,
            optimizer: OptimizerState { step: opt_step, m, v },
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_table<'a>(out: &mut Vec<u8>, items: impl Iterator<Item = (&'a String, &'a Tensor<f32>)>) {
    let items: Vec<_> = items.collect();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn validate_shapes(params: &ParamStore<f32>, expected: &ParamStore<f32>, path: &Path) -> Result<()> {
    for (name, t) in expected.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::format(path, format!("missing tensor {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::format(
                path,
                format!("tensor {name} has shape {:?}, expected {:?}", got.shape(), t.shape()),
            ));
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
        return Err(Error::format(path, format!("unexpected tensor {extra}")));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let need = self.pos.checked_add(n).unwrap_or(usize::MAX);
        if need > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated while reading {what}: expected at least {need} bytes, file has {}",
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..need];
        self.pos = need;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn table(&mut self, what: &str) -> Result<ParamStore<f32>> {
        let count = self.u32(&format!("{what} table size"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = self.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(self.take(len, "tensor name")?)
                .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = self.u32(&format!("rank of {name}"))? as usize;
            if rank > 8 {
                return Err(Error::format(self.path, format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32(&format!("extents of {name}"))? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(self.path, format!("tensor {name} is too large")))?;
            let raw = self.take(numel, &format!("values of {name}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if store.contains(&name) {
                return Err(Error::format(self.path, format!("duplicate tensor {name}")));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}
