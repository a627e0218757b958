use rand::Rng;

use super::{uniform_param, Linear, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Parameter, Tensor};
use crate::text::MaskedBatch;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Norm {
    gain: Parameter,
    bias: Parameter,
}

impl Norm {
    fn new(name: &str, d: usize) -> Self {
        Norm {
            gain: Parameter::new(format!("{name}.gain"), &[d], vec![1.0; d]).unwrap(),
            bias: Parameter::new(format!("{name}.bias"), &[d], vec![0.0; d]).unwrap(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain.tensor, &self.bias.tensor, LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new(i: usize, d: usize, rng: &mut impl Rng) -> Self {
        let n = |s: &str| format!("lm.block{i}.{s}");
        Block {
            ln1: Norm::new(&n("ln1"), d),
            q: Linear::new(&n("q"), d, d, rng),
            k: Linear::new(&n("k"), d, d, rng),
            v: Linear::new(&n("v"), d, d, rng),
            o: Linear::new(&n("o"), d, d, rng),
            ln2: Norm::new(&n("ln2"), d),
            ff1: Linear::new(&n("ff1"), d, 4 * d, rng),
            ff2: Linear::new(&n("ff2"), 4 * d, d, rng),
        }
    }

    fn qkv(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let h = self.ln1.forward(x)?;
        Ok((self.q.forward(&h)?, self.k.forward(&h)?, self.v.forward(&h)?))
    }

    fn forward(&self, x: &Tensor, layout: &AttentionLayout) -> Result<Tensor> {
        let (q, k, v) = self.qkv(x)?;
        let x = x.add(&self.o.forward(&Tensor::attention(&q, &k, &v, layout)?)?)?;
        let h = self.ff1.forward(&self.ln2.forward(&x)?)?.gelu();
        x.add(&self.ff2.forward(&h)?)
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.ln1.gain, &self.ln1.bias];
        for l in [&self.q, &self.k, &self.v, &self.o] {
            out.extend(l.params());
        }
        out.extend([&self.ln2.gain, &self.ln2.bias]);
        out.extend(self.ff1.params());
        out.extend(self.ff2.params());
        out
    }
}

/// Pre-norm transformer encoder over packed (unpadded) sequences.
#[derive(Debug, Clone)]
pub struct LmEncoder {
    pub d_model: usize,
    pub n_heads: usize,
    pub max_len: usize,
    token_embedding: Parameter,
    position_embedding: Parameter,
    blocks: Vec<Block>,
    final_norm: Norm,
}

/// Encoder output. Token rows of all sequences are stored back to back:
/// sequence `b` owns rows `offsets[b]..offsets[b + 1]`.
#[derive(Debug, Clone)]
pub struct LmOutput {
    pub tokens: Tensor,
    pub offsets: Vec<usize>,
    /// Row 0 of every sequence, `batch x d`.
    pub cls: Tensor,
}

impl LmOutput {
    /// Sequence index of every token row.
    pub fn owners(&self) -> Vec<usize> {
        self.offsets
            .windows(2)
            .enumerate()
            .flat_map(|(b, w)| std::iter::repeat(b).take(w[1] - w[0]))
            .collect()
    }

    /// Rows of sequence `b`.
    pub fn sequence(&self, b: usize) -> Result<Tensor> {
        self.tokens.slice_rows(self.offsets[b], self.offsets[b + 1])
    }
}

/// Attention weights of one (block, sequence, head).
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub block: usize,
    pub sequence: usize,
    pub head: usize,
    pub weights: Vec<Vec<f64>>,
}

impl LmEncoder {
    pub(crate) fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let bound = (3.0 / d as f64).sqrt();
        LmEncoder {
            d_model: d,
            n_heads: cfg.n_heads,
            max_len: cfg.max_len,
            token_embedding: uniform_param("lm.token_embedding", &[cfg.vocab_size, d], bound, rng),
            position_embedding: uniform_param("lm.position_embedding", &[cfg.max_len, d], bound, rng),
            blocks: (0..cfg.n_blocks).map(|i| Block::new(i, d, rng)).collect(),
            final_norm: Norm::new("lm.final_norm", d),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.tensor.rows()
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.final_norm.gain, &self.final_norm.bias]);
        out
    }

    fn embed(&self, rows: &[&[u32]]) -> Result<(Tensor, AttentionLayout)> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot encode an empty batch"));
        }
        let vocab = self.vocab_size();
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = vec![0];
        for row in rows {
            if row.len() > self.max_len {
                return Err(Error::invalid(format!(
                    "sequence of {} tokens exceeds the positional table ({})",
                    row.len(),
                    self.max_len
                )));
            }
            if row.is_empty() {
                return Err(Error::invalid("empty token sequence"));
            }
            if let Some(&bad) = row.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab}")));
            }
            ids.extend(row.iter().map(|&t| t as usize));
            positions.extend(0..row.len());
            offsets.push(ids.len());
        }
        let x = self
            .token_embedding
            .tensor
            .embedding_lookup(&ids)?
            .add(&self.position_embedding.tensor.embedding_lookup(&positions)?)?;
        Ok((
            x,
            AttentionLayout {
                offsets,
                n_heads: self.n_heads,
            },
        ))
    }

    /// Encodes the sequences of a padded batch; pad positions are dropped
    /// before any computation.
    pub fn encode(&self, batch: &MaskedBatch) -> Result<LmOutput> {
        let rows: Vec<&[u32]> = (0..batch.batch_size()).map(|b| batch.row(b)).collect();
        self.encode_rows(&rows)
    }

    pub fn encode_rows(&self, rows: &[&[u32]]) -> Result<LmOutput> {
        let (mut x, layout) = self.embed(rows)?;
        for block in &self.blocks {
            x = block.forward(&x, &layout)?;
        }
        let tokens = self.final_norm.forward(&x)?;
        let starts = &layout.offsets[..layout.offsets.len() - 1];
        let cls = tokens.gather_rows(starts)?;
        Ok(LmOutput {
            tokens,
            offsets: layout.offsets,
            cls,
        })
    }

    /// Attention weights of every block for a batch (no gradient recorded).
    pub fn attention_maps(&self, batch: &MaskedBatch) -> Result<Vec<AttentionMap>> {
        crate::tensor::no_grad(|| {
            let rows: Vec<&[u32]> = (0..batch.batch_size()).map(|b| batch.row(b)).collect();
            let (mut x, layout) = self.embed(&rows)?;
            let mut maps = Vec::new();
            for (bi, block) in self.blocks.iter().enumerate() {
                let (q, k, _) = block.qkv(&x)?;
                let probs = crate::tensor::attention_probs(&q, &k, &layout)?;
                let mut off = 0;
                for (s, w) in layout.offsets.windows(2).enumerate() {
                    let len = w[1] - w[0];
                    for head in 0..self.n_heads {
                        let weights = probs[off..off + len * len]
                            .chunks(len)
                            .map(<[f64]>::to_vec)
                            .collect();
                        off += len * len;
                        maps.push(AttentionMap {
                            block: bi,
                            sequence: s,
                            head,
                            weights,
                        });
                    }
                }
                x = block.forward(&x, &layout)?;
            }
            Ok(maps)
        })
    }
}
