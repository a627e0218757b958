//! Teacher (text encoder, GCN, fusion, MLM head) and student (structure-aware
//! MLP with a memory bank).

mod gcn;
mod lm;
mod student;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gcn::GcnStack;
pub use lm::{LmEncoder, LmOutput};
pub use student::{MemoryBank, MemoryOutput, StructureAwareMlp};

use crate::error::{Error, Result};
use crate::ppr::DEFAULT_FEATURE_WIDTH;
use crate::rng::{self, purpose, StreamRng};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// `h . a / sqrt(d)`
    Dot,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub gcn_layers: usize,
    pub ppr_width: usize,
    pub mlp_layers: usize,
    pub n_anchors: usize,
    pub dropout: f64,
    pub similarity: Similarity,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            max_len: 64,
            gcn_layers: 3,
            ppr_width: DEFAULT_FEATURE_WIDTH,
            mlp_layers: 3,
            n_anchors: 256,
            dropout: 0.2,
            similarity: Similarity::Dot,
        }
    }

    /// The large-scale setting (768-wide, 128 PPR features).
    pub fn large_scale(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 768,
            n_blocks: 12,
            n_heads: 12,
            max_len: 512,
            ppr_width: 128,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size <= crate::text::N_RESERVED {
            return bad(format!("vocabulary of {} has no content tokens", self.vocab_size));
        }
        if self.max_len < 2 {
            return bad("max_len must leave room for [CLS] and [SEP]".into());
        }
        if self.mlp_layers == 0 || self.n_anchors == 0 {
            return bad("student needs at least one layer and one anchor".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Linear {
            weight: uniform_param(&format!("{name}.weight"), &[d_in, d_out], bound, rng),
            bias: Parameter::new(format!("{name}.bias"), &[d_out], vec![0.0; d_out]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.tensor)?.add(&self.bias.tensor)
    }

    fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }
}

pub(crate) fn uniform_param(name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Parameter {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Parameter::new(name, shape, data).unwrap()
}

/// Dropout helper: identity when `rng` is `None` (evaluation).
pub(crate) fn maybe_dropout(x: Tensor, p: f64, rng: Option<&mut StreamRng>) -> Result<Tensor> {
    match rng {
        Some(r) => x.dropout(p, r, true),
        None => Ok(x),
    }
}

/// `[E_v | H_cls_v]` per token row, then a linear map `2d -> d`.
#[derive(Debug, Clone)]
pub struct FusionHead {
    pub linear: Linear,
}

impl FusionHead {
    /// `tokens` is the packed token matrix; `owner[t]` is the row of `h_cls`
    /// that token `t` belongs to.
    pub fn forward(&self, tokens: &Tensor, h_cls: &Tensor, owner: &[usize]) -> Result<Tensor> {
        if tokens.cols() != h_cls.cols() {
            return Err(Error::Shape(format!(
                "fuse: token width {:?} vs node width {:?}",
                tokens.shape(),
                h_cls.shape()
            )));
        }
        let broadcast = h_cls.gather_rows(owner)?;
        self.linear.forward(&Tensor::concat(&[tokens, &broadcast], 1)?)
    }
}

/// `d -> d` gelu `-> |V|` logits.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlmHead {
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(h)?.gelu())
    }
}

/// Every trainable piece of the co-distillation model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub lm: LmEncoder,
    pub gcn: GcnStack,
    pub fusion: FusionHead,
    pub mlm: MlmHead,
    pub student: StructureAwareMlp,
    pub memory: MemoryBank,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[purpose::INIT]);
        let d = config.d_model;
        let lm = LmEncoder::new(&config, &mut r);
        let gcn = GcnStack::new(d, config.gcn_layers, config.dropout, &mut r);
        let fusion = FusionHead {
            linear: Linear::new("fusion", 2 * d, d, &mut r),
        };
        let mlm = MlmHead {
            hidden: Linear::new("mlm.hidden", d, d, &mut r),
            out: Linear::new("mlm.out", d, config.vocab_size, &mut r),
        };
        let student = StructureAwareMlp::new(d, config.ppr_width, config.mlp_layers, config.dropout, &mut r);
        let memory = MemoryBank::new(d, config.n_anchors, config.similarity, &mut r);
        Ok(Model {
            config,
            lm,
            gcn,
            fusion,
            mlm,
            student,
            memory,
        })
    }

    /// All parameters in a fixed order; names are unique.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.lm.parameters();
        out.extend(self.gcn.parameters());
        out.extend(self.fusion.linear.params());
        out.extend(self.mlm.hidden.params());
        out.extend(self.mlm.out.params());
        out.extend(self.student.parameters());
        out.push(&self.memory.anchors);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }
}
