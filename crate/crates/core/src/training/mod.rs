//! The three-term co-distillation objective and the loop that optimizes it.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Precision, CHECKPOINT_VERSION};
pub use optim::{warmup_lr, AdamW};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::ppr::{PprTable, DEFAULT_ALPHA};
use crate::rng::{self, purpose, StreamRng};
use crate::sampler::{sample_node_subgraph, DEFAULT_BUDGETS};
use crate::store::{Csr, TextAttributedGraph};
use crate::tensor::{Adjacency, Tensor};
use crate::text::{apply_mask, pad_batch, MaskedBatch, TokenSequence, Vocabulary};

/// Switches that remove one ingredient each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_mask_loss: bool,
    pub no_st_loss: bool,
    pub no_me_loss: bool,
    /// Teacher skips the GCN: `H_cls = E_cls`.
    pub no_gnn: bool,
    /// Student receives all-zero PPR features.
    pub no_ppr: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mask: f64,
    pub st: f64,
    pub me: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask: 1.0,
            st: 1.0,
            me: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    /// Anchor nodes per step; each brings its context subgraph.
    pub batch_size: usize,
    pub budgets: Vec<usize>,
    pub mask_rate: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub alpha: f64,
    pub ppr_epsilon: f64,
    /// Detach the teacher operand of the alignment loss.
    pub stop_grad_teacher: bool,
    pub ablation: Ablation,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 500,
            batch_size: 32,
            budgets: DEFAULT_BUDGETS.to_vec(),
            mask_rate: 0.5,
            lr: 1e-3,
            weight_decay: 0.001,
            warmup_frac: 0.1,
            alpha: DEFAULT_ALPHA,
            ppr_epsilon: 1e-4,
            stop_grad_teacher: true,
            ablation: Ablation::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Large-scale settings (batch 1024, lr 2e-5).
    pub fn large_scale() -> Self {
        TrainConfig {
            batch_size: 1024,
            lr: 2e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.budgets.is_empty() {
            return bad("batch_size and budgets must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1]", self.mask_rate));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(self.lr >= 0.0 && self.ppr_epsilon > 0.0 && (0.0..=1.0).contains(&self.warmup_frac)) {
            return bad("lr, ppr_epsilon or warmup_frac out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mask: f64,
    pub l_st: f64,
    pub l_me: f64,
    pub total: f64,
}

/// Row indices (into the packed token matrix) and original ids of every
/// masked position, in batch order.
pub fn masked_positions(batch: &MaskedBatch) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut packed = 0;
    for b in 0..batch.batch_size() {
        let o = b * batch.max_len;
        for i in 0..batch.lengths[b] {
            if batch.mask_indicator[o + i] {
                rows.push(packed + i);
                targets.push(batch.targets[o + i].expect("masked position has a target") as usize);
            }
        }
        packed += batch.lengths[b];
    }
    (rows, targets)
}

/// Masked-token loss from logits over all packed token rows: the summed NLL
/// of each node's masked positions, averaged over nodes.
pub fn loss_mask(logits: &Tensor, batch: &MaskedBatch) -> Result<Tensor> {
    let (rows, targets) = masked_positions(batch);
    let total: usize = batch.lengths.iter().sum();
    if logits.rows() != total {
        return Err(Error::Shape(format!(
            "loss_mask: logits {:?} for {total} packed tokens",
            logits.shape()
        )));
    }
    loss_mask_rows(&logits.gather_rows(&rows)?, &targets, batch.batch_size())
}

fn loss_mask_rows(masked_logits: &Tensor, targets: &[usize], n_nodes: usize) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::invalid("no masked position in the batch"));
    }
    Ok(masked_logits.nll_rows(targets)?.sum().scale(1.0 / n_nodes as f64))
}

/// `1 - mean_v cos(teacher_v, student_v)`.
pub fn loss_st(teacher: &Tensor, student: &Tensor, stop_gradient_teacher: bool) -> Result<Tensor> {
    let t = if stop_gradient_teacher {
        teacher.detach()
    } else {
        teacher.clone()
    };
    Ok(t.cosine_rows(student)?.mean().scale(-1.0).add_scalar(1.0))
}

/// `mean_v ||recon_v - student_v||^2`.
pub fn loss_me(reconstruction: &Tensor, student: &Tensor) -> Result<Tensor> {
    reconstruction.mse(student)
}

/// Everything one step consumes.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Global node of every row.
    pub node_ids: Vec<usize>,
    pub masked: MaskedBatch,
    /// Block-diagonal over the batch's subgraphs.
    pub adjacency: Csr,
    /// Row-major `rows x ppr_width`.
    pub ppr: Vec<f64>,
    pub ppr_width: usize,
}

impl TrainBatch {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn ppr_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.n_nodes(), self.ppr_width], self.ppr.clone()).expect("ppr block shape")
    }
}

/// Differentiable results of one forward pass. Disabled terms are `None`.
pub struct ForwardPass {
    pub l_mask: Option<Tensor>,
    pub l_st: Option<Tensor>,
    pub l_me: Option<Tensor>,
    pub total: Tensor,
    /// Intermediate values in evaluation order, for diagnostics.
    pub trace: Vec<(&'static str, Tensor)>,
}

impl ForwardPass {
    pub fn breakdown(&self) -> LossBreakdown {
        let v = |t: &Option<Tensor>| t.as_ref().map_or(0.0, Tensor::item);
        LossBreakdown {
            l_mask: v(&self.l_mask),
            l_st: v(&self.l_st),
            l_me: v(&self.l_me),
            total: self.total.item(),
        }
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.trace.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| *n)
    }
}

/// Teacher and student forward over one batch. `dropout` is `None` in
/// evaluation mode.
pub fn forward(model: &Model, batch: &TrainBatch, cfg: &TrainConfig, mut dropout: Option<&mut StreamRng>) -> Result<ForwardPass> {
    let ab = cfg.ablation;
    let mut trace = Vec::new();
    let lm = model.lm.encode(&batch.masked)?;
    trace.push(("lm.tokens", lm.tokens.clone()));
    let e_cls = lm.cls.clone();

    let need_teacher = !ab.no_mask_loss || !ab.no_st_loss;
    let h_cls = if need_teacher && !ab.no_gnn {
        let adj = Adjacency::gcn_normalized(&batch.adjacency);
        let h = model.gcn.forward(&adj, &e_cls, dropout.as_deref_mut())?;
        trace.push(("teacher.h_cls", h.clone()));
        h
    } else {
        e_cls.clone()
    };

    let l_mask = if ab.no_mask_loss {
        None
    } else {
        let (rows, targets) = masked_positions(&batch.masked);
        let owners = lm.owners();
        let row_owner: Vec<usize> = rows.iter().map(|&r| owners[r]).collect();
        let fused = model.fusion.forward(&lm.tokens.gather_rows(&rows)?, &h_cls, &row_owner)?;
        trace.push(("teacher.h_v", fused.clone()));
        let logits = model.mlm.forward(&fused)?;
        trace.push(("teacher.logits", logits.clone()));
        Some(loss_mask_rows(&logits, &targets, batch.n_nodes())?)
    };

    let need_student = !ab.no_st_loss || !ab.no_me_loss;
    let (l_st, l_me) = if need_student {
        let ppr = if ab.no_ppr {
            Tensor::zeros(&[batch.n_nodes(), batch.ppr_width])
        } else {
            batch.ppr_tensor()
        };
        let student = model.student.forward(&e_cls, &ppr, dropout.as_deref_mut())?;
        trace.push(("student.h_cls", student.clone()));
        let l_st = if ab.no_st_loss {
            None
        } else {
            Some(loss_st(&h_cls, &student, cfg.stop_grad_teacher)?)
        };
        let l_me = if ab.no_me_loss {
            None
        } else {
            let mem = model.memory.forward(&student)?;
            trace.push(("memory.scores", mem.scores.clone()));
            trace.push(("memory.reconstruction", mem.reconstruction.clone()));
            Some(loss_me(&mem.reconstruction, &student)?)
        };
        (l_st, l_me)
    } else {
        (None, None)
    };

    let terms = [
        (l_mask.as_ref(), cfg.weights.mask, "loss.mask"),
        (l_st.as_ref(), cfg.weights.st, "loss.st"),
        (l_me.as_ref(), cfg.weights.me, "loss.me"),
    ];
    let mut total: Option<Tensor> = None;
    for (term, w, name) in terms {
        let Some(t) = term else { continue };
        trace.push((name, t.clone()));
        let t = if w == 1.0 { t.clone() } else { t.scale(w) };
        total = Some(match total {
            None => t,
            Some(acc) => acc.add(&t)?,
        });
    }
    let total = total.unwrap_or_else(|| Tensor::scalar(0.0));
    Ok(ForwardPass {
        l_mask,
        l_st,
        l_me,
        total,
        trace,
    })
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_mask,l_st,l_me,total,lr";

impl LossRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{}", self.step, l.l_mask, l.l_st, l.l_me, l.total, self.lr)
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Owns model, optimizer and the per-graph caches of a pretraining run.
pub struct Trainer<'g> {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub vocab: Arc<Vocabulary>,
    graph: &'g TextAttributedGraph,
    tokens: Vec<TokenSequence>,
    ppr: PprTable,
    pool: Vec<usize>,
    step: u64,
}

impl<'g> Trainer<'g> {
    /// Anchors are drawn from the training split when the graph has one.
    pub fn new(graph: &'g TextAttributedGraph, vocab: Arc<Vocabulary>, model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model_cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary {} differs from tokenizer vocabulary {}",
                model_cfg.vocab_size,
                vocab.len()
            )));
        }
        let model = Model::new(model_cfg, cfg.seed)?;
        let opt = AdamW::new(&model.parameters(), cfg.weight_decay);
        Self::assemble(graph, vocab, model, opt, cfg, 0)
    }

    /// Continues a run from a checkpoint taken on the same graph.
    pub fn resume(graph: &'g TextAttributedGraph, ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let opt = ckpt.optimizer(&model)?;
        let step = opt.step;
        Self::assemble(graph, Arc::new(ckpt.vocab.clone()), model, opt, ckpt.train_config.clone(), step)
    }

    fn assemble(
        graph: &'g TextAttributedGraph,
        vocab: Arc<Vocabulary>,
        model: Model,
        opt: AdamW,
        cfg: TrainConfig,
        step: u64,
    ) -> Result<Self> {
        if graph.n_nodes() == 0 {
            return Err(Error::invalid("cannot train on an empty graph"));
        }
        let max_len = model.config.max_len;
        let tokens = graph.node_texts().iter().map(|t| vocab.tokenize(t, max_len)).collect();
        let ppr = PprTable::compute(graph, cfg.alpha, cfg.ppr_epsilon)?;
        let pool = match graph.split() {
            Some(s) if !s.train.is_empty() => s.train.clone(),
            _ => (0..graph.n_nodes()).collect(),
        };
        Ok(Trainer {
            model,
            opt,
            cfg,
            vocab,
            graph,
            tokens,
            ppr,
            pool,
            step,
        })
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ppr_table(&self) -> &PprTable {
        &self.ppr
    }

    /// Batch of step `step` (1-based). A pure function of the seed and step.
    pub fn batch(&self, step: u64) -> Result<TrainBatch> {
        let cfg = &self.cfg;
        let width = self.model.config.ppr_width;
        let k = cfg.batch_size.min(self.pool.len());
        let mut pick_rng = rng::stream(cfg.seed, &[purpose::BATCH, step]);
        let anchors: Vec<usize> = index::sample(&mut pick_rng, self.pool.len(), k)
            .into_iter()
            .map(|i| self.pool[i])
            .collect();
        let (graph, table) = (self.graph, &self.ppr);
        let subgraphs = anchors
            .par_iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut r = rng::stream(cfg.seed, &[purpose::SAMPLE, step, i as u64]);
                let mut sg = sample_node_subgraph(graph, v, table.get(v), &cfg.budgets, &mut r)?;
                if cfg.ablation.no_ppr {
                    sg.zero_ppr_features(width);
                } else {
                    sg.attach_ppr_features(table, width);
                }
                Ok(sg)
            })
            .collect::<Result<Vec<_>>>()?;
        let node_ids: Vec<usize> = subgraphs.iter().flat_map(|s| s.local_to_global.iter().copied()).collect();
        let masked = node_ids
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let mut r = rng::stream(cfg.seed, &[purpose::MASK, step, j as u64]);
                apply_mask(&self.tokens[v], cfg.mask_rate, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<&Csr> = subgraphs.iter().map(|s| &s.adjacency).collect();
        let ppr = subgraphs
            .iter()
            .flat_map(|s| s.ppr_features.iter().flat_map(|f| f.0.iter().copied()))
            .collect();
        Ok(TrainBatch {
            node_ids,
            masked: pad_batch(&masked)?,
            adjacency: Csr::block_diagonal(&parts),
            ppr,
            ppr_width: width,
        })
    }

    /// One optimization step.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let step = self.step + 1;
        let batch = self.batch(step)?;
        let params = self.model.parameters();
        params.iter().for_each(|p| p.tensor.zero_grad());
        let mut dropout = rng::stream(self.cfg.seed, &[purpose::DROPOUT, step]);
        let pass = forward(&self.model, &batch, &self.cfg, Some(&mut dropout))?;
        if let Some(name) = pass.first_non_finite() {
            return Err(Error::NonFinite {
                step,
                tensor: name.to_string(),
            });
        }
        let lr = warmup_lr(step, self.cfg.steps, self.cfg.lr, self.cfg.warmup_frac);
        // with every term disabled there is nothing to optimize
        if pass.total.requires_grad() {
            pass.total.backward()?;
            self.opt.step(&params, lr)?;
            if let Some(p) = params.iter().find(|p| !p.tensor.all_finite()) {
                return Err(Error::NonFinite {
                    step,
                    tensor: p.name.clone(),
                });
            }
        }
        self.step = step;
        Ok(LossRecord {
            step,
            losses: pass.breakdown(),
            lr,
        })
    }

    /// Runs until `cfg.steps` steps are complete.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.step < self.cfg.steps {
            let rec = self.train_step()?;
            on_step(&rec);
            out.push(rec);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, precision: Precision) -> Result<()> {
        save_checkpoint(path, &self.model, &self.opt, &self.cfg, &self.vocab, precision)
    }
}
