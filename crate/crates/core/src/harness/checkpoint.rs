//! Binary parameter container: magic `KGN1`, a format version, the seed, the
//! config snapshot and length-prefixed little-endian tensor entries.

use std::fs;
use std::path::Path;

use crate::autodiff::{DType, Tensor};
use crate::error::{Error, Result};
use crate::model::ReportModel;
use crate::nn::ParamStore;

use super::config::TrainConfig;
use super::train::build_model;

pub const MAGIC: &[u8; 4] = b"KGN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    /// `key = value` lines: the run config plus vocabulary and graph fingerprints.
    pub config_text: String,
    pub entries: Vec<CheckpointEntry>,
}

fn fnv(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn snapshot(model: &ReportModel<f32>, cfg: &TrainConfig) -> String {
    let mut text = cfg.to_text();
    text.push_str(&format!("vocab_size = {}\n", model.tokenizer.vocab_size()));
    text.push_str(&format!("tokenizer_fingerprint = {:016x}\n", model.tokenizer.fingerprint()));
    text.push_str(&format!("graph_fingerprint = {:016x}\n", fnv(&model.graph.adjacency_string())));
    text
}

const META_KEYS: [&str; 3] = ["vocab_size", "tokenizer_fingerprint", "graph_fingerprint"];

impl Checkpoint {
    pub fn from_model(model: &ReportModel<f32>, cfg: &TrainConfig) -> Self {
        Self {
            version: FORMAT_VERSION,
            seed: cfg.seed,
            config_text: snapshot(model, cfg),
            entries: model
                .params
                .iter()
                .map(|(name, t)| CheckpointEntry {
                    name: name.to_string(),
                    dtype: DType::F32,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let seed = r.u64()?;
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
            if dtype != DType::F32 {
                return Err(Error::Checkpoint(format!("{name}: only f32 entries are stored")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(CheckpointEntry { name, dtype, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            seed,
            config_text,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Run config stored in the snapshot.
    pub fn config(&self) -> Result<TrainConfig> {
        let kept: String = self
            .config_text
            .lines()
            .filter(|l| !META_KEYS.iter().any(|k| l.split('=').next().map(str::trim) == Some(*k)))
            .map(|l| format!("{l}\n"))
            .collect();
        TrainConfig::from_text(&kept)
    }

    fn meta(&self, key: &str) -> Option<&str> {
        self.config_text.lines().find_map(|l| {
            let (k, v) = l.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }

    /// Rebuilds the model and copies every stored tensor into it.
    pub fn restore(&self) -> Result<(TrainConfig, ReportModel<f32>)> {
        let cfg = self.config()?;
        let mut model = build_model(&cfg)?;
        let expected = snapshot(&model, &cfg);
        for key in META_KEYS {
            let want = expected.lines().find_map(|l| l.strip_prefix(&format!("{key} = ")));
            if self.meta(key) != want {
                return Err(Error::Checkpoint(format!(
                    "{key} mismatch: checkpoint has {:?}, this build has {want:?}",
                    self.meta(key)
                )));
            }
        }
        load_params(&mut model.params, &self.entries)?;
        Ok((cfg, model))
    }
}

fn load_params(store: &mut ParamStore<f32>, entries: &[CheckpointEntry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} entries for a model with {} parameters",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        store
            .set(&e.name, Tensor::new(e.shape.clone(), e.data.clone())?)
            .map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
