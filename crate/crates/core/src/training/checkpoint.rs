//! Checkpoint file layout (little endian):
//!
//! ```text
//! "SSTC" | u32 version
//! u32 entry count, then per entry:
//!     u32 name length | name | u8 dtype | u32 rank | u64 dims[rank] | u64 offset | u64 byte length
//! u64 blob length | blob
//! u32 CRC32 of everything before it
//! ```
//!
//! dtype is 0 for raw bytes, 1 for f32, 2 for f64. Parameters live under
//! `param.<name>`, optimizer moments under `adam.m.<name>` / `adam.v.<name>`,
//! and configs and vocabulary as byte entries under `meta.*`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::store::{open_frame, Reader, Writer};
use crate::text::Vocabulary;

const MAGIC: &[u8; 4] = b"SSTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Storage width for floating-point tensors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    /// Lossless; required for bit-identical resumption.
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    Bytes = 0,
    F32 = 1,
    F64 = 2,
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Entry {
    fn floats(name: String, shape: &[usize], data: &[f64], precision: Precision) -> Self {
        let (dtype, bytes) = match precision {
            Precision::F64 => (Dtype::F64, data.iter().flat_map(|x| x.to_le_bytes()).collect()),
            Precision::F32 => (Dtype::F32, data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()),
        };
        Entry {
            name,
            dtype,
            shape: shape.to_vec(),
            bytes,
        }
    }

    fn raw(name: &str, bytes: Vec<u8>) -> Self {
        Entry {
            name: name.to_string(),
            dtype: Dtype::Bytes,
            shape: vec![bytes.len()],
            bytes,
        }
    }

    fn to_f64(&self) -> Result<Vec<f64>> {
        match self.dtype {
            Dtype::F64 => Ok(self
                .bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()),
            Dtype::F32 => Ok(self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()),
            Dtype::Bytes => Err(Error::Incompatible(format!("`{}` is not a float tensor", self.name))),
        }
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    /// Optimizer steps taken when saved.
    pub step: u64,
    pub precision: Precision,
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    adam: AdamHyper,
    /// SHA-256 prefix of the file bytes.
    pub hash: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AdamHyper {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    opt: &AdamW,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    precision: Precision,
) -> Result<()> {
    let params = model.parameters();
    if opt.m.len() != params.len() {
        return Err(Error::Incompatible("optimizer does not match the model".into()));
    }
    let json = |v: &dyn erased::Json| v.to_json().into_bytes();
    let hyper = AdamHyper {
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        weight_decay: opt.weight_decay,
        step: opt.step,
    };
    let mut entries = vec![
        Entry::raw("meta.model_config", json(&model.config)),
        Entry::raw("meta.train_config", json(cfg)),
        Entry::raw("meta.adam", json(&hyper)),
        Entry::raw("meta.vocab", vocab.to_text().into_bytes()),
    ];
    for (i, p) in params.iter().enumerate() {
        let shape = p.tensor.shape();
        entries.push(Entry::floats(format!("param.{}", p.name), shape, &p.tensor.data(), precision));
        entries.push(Entry::floats(format!("adam.m.{}", p.name), shape, &opt.m[i], precision));
        entries.push(Entry::floats(format!("adam.v.{}", p.name), shape, &opt.v[i], precision));
    }

    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(entries.len() as u32);
    let mut offset = 0u64;
    for e in &entries {
        w.str(&e.name);
        w.u8(e.dtype as u8);
        w.u32(e.shape.len() as u32);
        for &d in &e.shape {
            w.u64(d as u64);
        }
        w.u64(offset);
        w.u64(e.bytes.len() as u64);
        offset += e.bytes.len() as u64;
    }
    w.u64(offset);
    for e in &entries {
        w.0.extend_from_slice(&e.bytes);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    std::fs::write(path, &w.0)?;
    Ok(())
}

// serde_json without pulling generics through the entry list
mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).expect("config serializes")
        }
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let body = open_frame(bytes, MAGIC, CHECKPOINT_VERSION)?;
    let mut r = Reader::new(body);
    let n = r.u32("entry count")? as usize;
    let mut manifest = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = r.string("entry name")?;
        let dtype = match r.u8("dtype")? {
            0 => Dtype::Bytes,
            1 => Dtype::F32,
            2 => Dtype::F64,
            other => return Err(Error::Version(format!("unknown dtype {other} for `{name}`"))),
        };
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")? as usize;
        let len = r.u64("length")? as usize;
        manifest.push((name, dtype, shape, offset, len));
    }
    let blob_len = r.u64("blob length")? as usize;
    let blob = r.take(blob_len, "tensor data")?;
    let mut entries = Vec::with_capacity(manifest.len());
    for (name, dtype, shape, offset, len) in manifest {
        let bytes = offset
            .checked_add(len)
            .and_then(|end| blob.get(offset..end))
            .ok_or(Error::Truncated("tensor data"))?;
        let width = match dtype {
            Dtype::Bytes => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        if shape.iter().product::<usize>() * width != len {
            return Err(Error::Shape(format!("entry `{name}`: shape {shape:?} does not match {len} bytes")));
        }
        entries.push(Entry {
            name,
            dtype,
            shape,
            bytes: bytes.to_vec(),
        });
    }

    let meta = |key: &str| -> Result<&[u8]> {
        entries
            .iter()
            .find(|e| e.name == key)
            .map(|e| e.bytes.as_slice())
            .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks `{key}`")))
    };
    let parse = |key: &str| -> Result<serde_json::Value> {
        serde_json::from_slice(meta(key)?).map_err(|e| Error::Incompatible(format!("{key}: {e}")))
    };
    let bad = |key: &str, e: serde_json::Error| Error::Incompatible(format!("{key}: {e}"));
    let model_config: ModelConfig =
        serde_json::from_value(parse("meta.model_config")?).map_err(|e| bad("model config", e))?;
    let train_config: TrainConfig =
        serde_json::from_value(parse("meta.train_config")?).map_err(|e| bad("train config", e))?;
    let adam: AdamHyper = serde_json::from_value(parse("meta.adam")?).map_err(|e| bad("optimizer", e))?;
    let vocab_text = std::str::from_utf8(meta("meta.vocab")?)
        .map_err(|_| Error::Incompatible("vocabulary is not utf-8".into()))?;
    let vocab = Vocabulary::from_text(vocab_text)?;

    let mut params = Vec::new();
    let mut moments = Vec::new();
    let mut precision = Precision::F64;
    for e in &entries {
        let Some(name) = e.name.strip_prefix("param.") else { continue };
        if e.dtype == Dtype::F32 {
            precision = Precision::F32;
        }
        let find = |prefix: &str| {
            entries
                .iter()
                .find(|x| x.name == format!("{prefix}{name}"))
                .ok_or_else(|| Error::Incompatible(format!("missing optimizer state for `{name}`")))
                .and_then(Entry::to_f64)
        };
        moments.push((find("adam.m.")?, find("adam.v.")?));
        params.push((name.to_string(), e.shape.clone(), e.to_f64()?));
    }
    let digest = Sha256::digest(bytes);
    Ok(Checkpoint {
        model_config,
        train_config,
        vocab,
        step: adam.step,
        precision,
        params,
        moments,
        adam,
        hash: digest[..8].iter().map(|b| format!("{b:02x}")).collect(),
    })
}

impl Checkpoint {
    /// Fresh model with the stored weights.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.model_config.clone(), 0)?;
        self.load_into(&model)?;
        Ok(model)
    }

    /// Copies stored weights into `model`, which must have the same layout.
    pub fn load_into(&self, model: &Model) -> Result<()> {
        let params = model.parameters();
        if params.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, (name, shape, _)) in params.iter().zip(&self.params) {
            if &p.name != name {
                return Err(Error::Incompatible(format!("expected tensor `{}`, found `{name}`", p.name)));
            }
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: checkpoint {shape:?}, model {:?}",
                    p.tensor.shape()
                )));
            }
        }
        for (p, (_, _, data)) in params.iter().zip(&self.params) {
            p.tensor.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    pub fn optimizer(&self, model: &Model) -> Result<AdamW> {
        let params = model.parameters();
        let mut opt = AdamW::new(&params, self.adam.weight_decay);
        opt.beta1 = self.adam.beta1;
        opt.beta2 = self.adam.beta2;
        opt.eps = self.adam.eps;
        opt.step = self.adam.step;
        if self.moments.len() != params.len() {
            return Err(Error::Incompatible("optimizer state does not match the model".into()));
        }
        for (i, (m, v)) in self.moments.iter().enumerate() {
            opt.m[i] = m.clone();
            opt.v[i] = v.clone();
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Model, AdamW, Vocabulary) {
        let vocab = Vocabulary::build(["alpha beta gamma delta", "beta gamma"], 1).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_anchors: 4,
            ppr_width: 3,
            max_len: 8,
            ..ModelConfig::desk(vocab.len())
        };
        let model = Model::new(cfg, 3).unwrap();
        let mut opt = AdamW::new(&model.parameters(), 0.001);
        opt.m[0][0] = 0.25;
        opt.step = 7;
        (model, opt, vocab)
    }

    #[test]
    fn round_trip_is_exact_in_f64() {
        let (model, opt, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sstc");
        save_checkpoint(&path, &model, &opt, &TrainConfig::default(), &vocab, Precision::F64).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let back = ck.model().unwrap();
        for (a, b) in model.parameters().iter().zip(back.parameters()) {
            assert_eq!(a.tensor.to_vec(), b.tensor.to_vec());
        }
        assert_eq!(ck.optimizer(&back).unwrap(), opt);
        assert_eq!(ck.vocab, vocab);
        assert_eq!(ck.step, 7);
        assert_eq!(ck.train_config, TrainConfig::default());
    }

    #[test]
    fn f32_storage_rounds() {
        let (model, opt, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sstc");
        save_checkpoint(&path, &model, &opt, &TrainConfig::default(), &vocab, Precision::F32).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.precision, Precision::F32);
        let back = ck.model().unwrap();
        for (a, b) in model.parameters().iter().zip(back.parameters()) {
            for (x, y) in a.tensor.to_vec().iter().zip(b.tensor.to_vec()) {
                assert_eq!(*x as f32 as f64, y);
            }
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let (model, opt, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sstc");
        save_checkpoint(&path, &model, &opt, &TrainConfig::default(), &vocab, Precision::F64).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(read_checkpoint(cut), Err(Error::Checksum { .. })));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(read_checkpoint(&flipped), Err(Error::Checksum { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(read_checkpoint(&ver), Err(Error::Version(_))));
    }

    #[test]
    fn width_mismatch_names_the_tensor() {
        let (model, opt, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sstc");
        save_checkpoint(&path, &model, &opt, &TrainConfig::default(), &vocab, Precision::F64).unwrap();
        let other = Model::new(
            ModelConfig {
                d_model: 12,
                ..model.config.clone()
            },
            0,
        )
        .unwrap();
        let err = load_checkpoint(&path).unwrap().load_into(&other).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("lm.token_embedding"), "{err}");
    }
}
