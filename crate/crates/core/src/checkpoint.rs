//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "GLEANCKPT" | version | meta_len | meta (UTF-8 "key=value\n" lines)
//! count | count x { name_len | name | rank | dims[rank] | f32 values }
//! ```
//!
//! Tensors are written in name order, so equal states give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{GleanError, Result};
use crate::model::{GleanModel, DISC_PREFIX, GEN_PREFIX};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 9] = b"GLEANCKPT";
pub const VERSION: u32 = 1;

const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";
const STATE_KEYS: [&str; 5] = ["epoch", "step", "gen_opt.step", "disc_opt.step", "manifest_hash"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GleanError::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| GleanError::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(GleanError::CorruptCheckpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(GleanError::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let meta_text = r.string("metadata")?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GleanError::CorruptCheckpoint(format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(GleanError::CorruptCheckpoint(format!("`{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel.and_then(|n| n.checked_mul(4)).filter(|&b| b <= r.remaining());
            let bytes = bytes.ok_or_else(|| {
                GleanError::CorruptCheckpoint(format!("truncated while reading values of `{name}`"))
            })?;
            let data = r
                .take(bytes, "values")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| GleanError::CorruptCheckpoint(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(GleanError::CorruptCheckpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(GleanError::CorruptCheckpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            version,
            meta,
            tensors,
        })
    }

    /// Writes via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| GleanError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| GleanError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| GleanError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Model parameters (`gen.` and `disc.` records).
    pub fn model_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(GEN_PREFIX) || n.starts_with(DISC_PREFIX))
    }

    pub fn param_count(&self) -> usize {
        self.model_tensors().map(|(_, t)| t.numel()).sum()
    }

    fn meta_num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .ok_or_else(|| GleanError::CorruptCheckpoint(format!("metadata lacks `{key}`")))?
            .parse()
            .map_err(|_| GleanError::CorruptCheckpoint(format!("metadata `{key}` is malformed")))
    }

    /// Settings recorded in the metadata, on top of the defaults.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in &self.meta {
            if !STATE_KEYS.contains(&k.as_str()) {
                cfg.set(k, v)
                    .map_err(|e| GleanError::CorruptCheckpoint(e.to_string()))?;
            }
        }
        Ok(cfg)
    }

    pub fn from_state(state: &TrainState, cfg: &RunConfig, manifest_hash: &str) -> Self {
        let mut meta: BTreeMap<String, String> = cfg
            .settings()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        meta.insert("epoch".into(), state.epoch.to_string());
        meta.insert("step".into(), state.step.to_string());
        meta.insert("gen_opt.step".into(), state.gen_opt.step.to_string());
        meta.insert("disc_opt.step".into(), state.disc_opt.step.to_string());
        meta.insert("manifest_hash".into(), manifest_hash.to_string());

        let mut tensors: BTreeMap<String, Tensor> = state
            .model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        for opt in [&state.gen_opt, &state.disc_opt] {
            for (n, t) in &opt.m {
                tensors.insert(format!("{OPTIM_M}{n}"), t.clone());
            }
            for (n, t) in &opt.v {
                tensors.insert(format!("{OPTIM_V}{n}"), t.clone());
            }
        }
        Checkpoint {
            version: VERSION,
            meta,
            tensors,
        }
    }

    pub fn model(&self) -> Result<GleanModel> {
        let cfg = self.run_config()?;
        let params: ParamStore = self
            .model_tensors()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let model = GleanModel {
            generator: cfg.generator.build()?,
            discriminator: cfg.discriminator.clone(),
            params,
        };
        model
            .validate()
            .map_err(|e| GleanError::CorruptCheckpoint(format!("parameters do not match config: {e}")))?;
        Ok(model)
    }

    /// Full training state; optimizer moments default to zero when absent.
    pub fn train_state(&self) -> Result<TrainState> {
        let model = self.model()?;
        let mut state = TrainState::new(model);
        state.epoch = self.meta_num("epoch")?;
        state.step = self.meta_num("step")?;
        let has_moments = self.tensors.keys().any(|k| k.starts_with(OPTIM_M));
        if has_moments {
            for (opt, key) in [(&mut state.gen_opt, "gen_opt.step"), (&mut state.disc_opt, "disc_opt.step")] {
                opt.step = self.meta_num(key)?;
                for (prefix, moments) in [(OPTIM_M, &mut opt.m), (OPTIM_V, &mut opt.v)] {
                    for (name, t) in moments.iter_mut() {
                        let stored = self.tensors.get(&format!("{prefix}{name}")).ok_or_else(|| {
                            GleanError::CorruptCheckpoint(format!("missing optimizer moment for `{name}`"))
                        })?;
                        if stored.shape() != t.shape() {
                            return Err(GleanError::CorruptCheckpoint(format!(
                                "optimizer moment for `{name}` has the wrong shape"
                            )));
                        }
                        *t = stored.clone();
                    }
                }
            }
        }
        Ok(state)
    }

    pub fn manifest_hash(&self) -> Option<&str> {
        self.meta.get("manifest_hash").map(String::as_str)
    }
}

/// Writes a model-only checkpoint (fresh optimizer, epoch 0).
pub fn save_model(path: &Path, model: &GleanModel, cfg: &RunConfig) -> Result<()> {
    Checkpoint::from_state(&TrainState::new(model.clone()), cfg, "").save(path)
}
