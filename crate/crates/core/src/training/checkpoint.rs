//! Binary checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//! `"DPSC"`, version, config block, source vocabulary block, target
//! vocabulary block, then records `[name length, name, rank, dims..., f32
//! payload]` until end of file. Blocks are a byte length followed by UTF-8
//! text: `key=value` lines for the config, one token per line for the
//! vocabularies. Optimizer moments are stored as records named
//! `adam.m.<param>` and `adam.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2Seq};
use crate::tensor::Tensor;

use super::optim::{Adam, AdamConfig};

pub const MAGIC: &[u8; 4] = b"DPSC";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Training metadata (epoch, validation loss, ...).
    pub meta: BTreeMap<String, String>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Seq2Seq<f32>,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        optimizer: Option<&Adam<f32>>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("valid")))
            .collect();
        let mut meta = BTreeMap::new();
        if let Some(adam) = optimizer {
            meta.insert("adam_step".to_string(), adam.step.to_string());
            meta.insert("adam_beta1".to_string(), format!("{:?}", adam.config.beta1));
            meta.insert("adam_beta2".to_string(), format!("{:?}", adam.config.beta2));
            meta.insert("adam_eps".to_string(), format!("{:?}", adam.config.eps));
            for (i, (n, t)) in model.params().iter().enumerate() {
                let shape = t.shape();
                tensors.push((format!("{ADAM_M}{n}"), Tensor::new(shape, adam.m[i].clone()).expect("valid")));
                tensors.push((format!("{ADAM_V}{n}"), Tensor::new(shape, adam.v[i].clone()).expect("valid")));
            }
        }
        Self {
            config: model.config().clone(),
            meta,
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn model(&self) -> Result<Seq2Seq<f32>> {
        let mut model = Seq2Seq::new(self.config.clone(), 0)?;
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            model.params_mut().assign(&name, t.shape(), t.data().to_vec())?;
        }
        let expected = model.params().len();
        let stored = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(ADAM_M) && !n.starts_with(ADAM_V))
            .count();
        if stored != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {stored} parameters, model expects {expected}"
            )));
        }
        Ok(model)
    }

    /// Optimizer state for `model`, if it was saved.
    pub fn optimizer(&self, model: &Seq2Seq<f32>) -> Result<Option<Adam<f32>>> {
        let Some(step) = self.meta.get("adam_step") else {
            return Ok(None);
        };
        let num = |k: &str, default: f64| -> Result<f64> {
            self.meta.get(k).map_or(Ok(default), |v| {
                v.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}`")))
            })
        };
        let defaults = AdamConfig::default();
        let mut adam = Adam::new(
            model.params(),
            AdamConfig {
                beta1: num("adam_beta1", defaults.beta1)?,
                beta2: num("adam_beta2", defaults.beta2)?,
                eps: num("adam_eps", defaults.eps)?,
            },
        );
        adam.step = step.parse().map_err(|_| Error::Checkpoint("bad `adam_step`".into()))?;
        for (i, (n, t)) in model.params().iter().enumerate() {
            for (prefix, slot) in [(ADAM_M, &mut adam.m[i]), (ADAM_V, &mut adam.v[i])] {
                let s = self
                    .tensor(&format!("{prefix}{n}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{n}`")))?;
                if s.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state for `{n}` has the wrong shape")));
                }
                slot.copy_from_slice(s.data());
            }
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let mut cfg = String::new();
        for (k, v) in self.config.to_pairs() {
            cfg.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            cfg.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        put_block(&mut out, cfg.as_bytes());
        put_block(&mut out, self.src_vocab.to_text().as_bytes());
        put_block(&mut out, self.tgt_vocab.to_text().as_bytes());
        for (name, t) in &self.tensors {
            put_block(&mut out, name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let cfg_text = r.text()?;
        let mut config = ModelConfig::default();
        let mut meta = BTreeMap::new();
        for line in cfg_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            match k.strip_prefix(META_PREFIX) {
                Some(mk) => {
                    meta.insert(mk.to_string(), v.to_string());
                }
                None => config.set(k, v).map_err(|e| Error::Checkpoint(e.to_string()))?,
            }
        }
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let src_vocab = Vocabulary::from_text(&r.text()?)?;
        let tgt_vocab = Vocabulary::from_text(&r.text()?)?;
        if src_vocab.len() != config.src_vocab || tgt_vocab.len() != config.tgt_vocab {
            return Err(Error::Checkpoint("vocabulary sizes disagree with the config".into()));
        }
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name = r.text()?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("record `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("record `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self {
            config,
            meta,
            src_vocab,
            tgt_vocab,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 block".into()))
    }
}
