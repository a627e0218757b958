//! Student-only inference, linear probes, and metrics.

mod metrics;
mod probe;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{accuracy, mean_std, rmse, roc_auc};
pub use probe::{
    edge_probe_dataset, evaluate, node_probe_dataset, probe_train, run_probe, EdgeMode, Metric, MetricReport, ProbeModel,
    ProbeOptions, Targets,
};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::ppr::{ppr_features, push_ppr, PprFeatures};
use crate::sampler::k_hop_nodes;
use crate::store::{Csr, TextAttributedGraph};
use crate::tensor::{no_grad, Adjacency, Tensor};
use crate::text::Vocabulary;
use crate::training::{Checkpoint, TrainConfig};

/// Row-major embeddings keyed by external id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub ids: Vec<i64>,
    pub dim: usize,
    pub data: Vec<f64>,
    pub checkpoint_hash: Option<String>,
    pub graph_hash: Option<String>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<i64>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if ids.len() * dim != data.len() {
            return Err(Error::Shape(format!(
                "{} values for {} rows of width {dim}",
                data.len(),
                ids.len()
            )));
        }
        Ok(EmbeddingMatrix {
            ids,
            dim,
            data,
            checkpoint_hash: None,
            graph_hash: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: i64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn row_of(&self, id: i64) -> Result<&[f64]> {
        self.position(id)
            .map(|i| self.row(i))
            .ok_or_else(|| Error::invalid(format!("no embedding for id {id}")))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `id,e0,...,e{d-1}` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for j in 0..self.dim {
            let _ = write!(out, ",e{j}");
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            let _ = write!(out, "{id}");
            for v in self.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(src: &str) -> Result<Self> {
        let mut lines = src.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty embeddings file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"id") {
            return Err(Error::Parse {
                line: 1,
                message: "header must start with `id`".into(),
            });
        }
        let dim = cols.len() - 1;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: String| Error::Parse { line: i + 1, message: m };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(err(format!("expected {} fields, found {}", dim + 1, fields.len())));
            }
            ids.push(fields[0].parse().map_err(|e| err(format!("id: {e}")))?);
            for f in &fields[1..] {
                data.push(f.parse::<f64>().map_err(|e| err(format!("value `{f}`: {e}")))?);
            }
        }
        Self::new(ids, dim, data)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// How PPR features are produced at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub alpha: f64,
    pub ppr_epsilon: f64,
    /// Radius of the exhaustive neighborhood the features are read from.
    pub hops: usize,
    pub no_ppr: bool,
    /// Nodes encoded per forward pass.
    pub chunk: usize,
}

impl InferenceOptions {
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        InferenceOptions {
            alpha: cfg.alpha,
            ppr_epsilon: cfg.ppr_epsilon,
            hops: cfg.budgets.len(),
            no_ppr: cfg.ablation.no_ppr,
            chunk: 512,
        }
    }
}

/// PPR features of each node over its full `hops`-neighborhood.
pub fn inference_ppr_features(
    csr: &Csr,
    nodes: &[usize],
    width: usize,
    opts: &InferenceOptions,
) -> Result<Vec<PprFeatures>> {
    if opts.no_ppr {
        return Ok(vec![PprFeatures::zeros(width); nodes.len()]);
    }
    nodes
        .par_iter()
        .map(|&v| {
            let pi = push_ppr(csr, v, opts.alpha, opts.ppr_epsilon)?;
            Ok(ppr_features(&pi, &k_hop_nodes(csr, v, opts.hops), width))
        })
        .collect()
}

fn check_compatible(model: &Model, vocab: &Vocabulary) -> Result<()> {
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Incompatible(format!(
            "model expects {} tokens, vocabulary has {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn check_nodes(g: &TextAttributedGraph, nodes: &[usize]) -> Result<()> {
    nodes.iter().try_for_each(|&v| g.check_node(v))
}

/// `[CLS]` rows of the unmasked texts of `nodes`, `|nodes| x d`.
fn cls_rows(model: &Model, vocab: &Vocabulary, g: &TextAttributedGraph, nodes: &[usize], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(nodes.len() * model.config.d_model);
    for part in nodes.chunks(chunk.max(1)) {
        let seqs: Vec<_> = part
            .iter()
            .map(|&v| vocab.tokenize(g.node_text(v), model.config.max_len))
            .collect();
        let rows: Vec<&[u32]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
        out.extend(model.lm.encode_rows(&rows)?.cls.to_vec());
    }
    Ok(out)
}

fn student_rows(model: &Model, cls: Vec<f64>, feats: &[PprFeatures]) -> Result<Tensor> {
    let n = feats.len();
    let width = model.config.ppr_width;
    let ppr = feats.iter().flat_map(|f| f.0.iter().copied()).collect();
    let e = Tensor::from_vec(&[n, model.config.d_model], cls)?;
    model.student.forward(&e, &Tensor::from_vec(&[n, width], ppr)?, None)
}

/// Student-only embeddings: text encoder on raw text, `[CLS]` plus PPR
/// features through the MLP. No adjacency-dependent op is executed.
pub fn embed_anchors(
    model: &Model,
    vocab: &Vocabulary,
    g: &TextAttributedGraph,
    anchors: &[usize],
    opts: &InferenceOptions,
) -> Result<EmbeddingMatrix> {
    check_compatible(model, vocab)?;
    check_nodes(g, anchors)?;
    let feats = inference_ppr_features(g.csr(), anchors, model.config.ppr_width, opts)?;
    let data = no_grad(|| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(anchors.len() * model.config.d_model);
        let step = opts.chunk.max(1);
        for (part, f) in anchors.chunks(step).zip(feats.chunks(step)) {
            let cls = cls_rows(model, vocab, g, part, step)?;
            out.extend(student_rows(model, cls, f)?.to_vec());
        }
        Ok(out)
    })?;
    let ids = anchors.iter().map(|&v| g.original_ids()[v]).collect();
    let mut e = EmbeddingMatrix::new(ids, model.config.d_model, data)?;
    e.graph_hash = Some(g.content_hash());
    if !e.all_finite() {
        return Err(Error::NonFinite {
            step: 0,
            tensor: "embeddings".into(),
        });
    }
    Ok(e)
}

/// [`embed_anchors`] with everything taken from a checkpoint.
pub fn embed_with_checkpoint(ckpt: &Checkpoint, g: &TextAttributedGraph, anchors: &[usize]) -> Result<EmbeddingMatrix> {
    let model = ckpt.model()?;
    let opts = InferenceOptions::from_train_config(&ckpt.train_config);
    let mut e = embed_anchors(&model, &ckpt.vocab, g, anchors, &opts)?;
    e.checkpoint_hash = Some(ckpt.hash.clone());
    Ok(e)
}

/// Mean cosine between the teacher's graph-enhanced `[CLS]` vectors (GCN over
/// the whole graph, unmasked text) and the student's outputs at `nodes`.
pub fn teacher_student_cosine(
    model: &Model,
    vocab: &Vocabulary,
    g: &TextAttributedGraph,
    nodes: &[usize],
    opts: &InferenceOptions,
    use_gnn: bool,
) -> Result<f64> {
    check_compatible(model, vocab)?;
    check_nodes(g, nodes)?;
    if nodes.is_empty() {
        return Err(Error::invalid("no nodes to compare"));
    }
    let all: Vec<usize> = (0..g.n_nodes()).collect();
    let feats = inference_ppr_features(g.csr(), nodes, model.config.ppr_width, opts)?;
    no_grad(|| {
        let d = model.config.d_model;
        let cls = Tensor::from_vec(&[g.n_nodes(), d], cls_rows(model, vocab, g, &all, opts.chunk)?)?;
        let teacher = if use_gnn {
            model.gcn.forward(&Adjacency::gcn_normalized(&g.csr().symmetrize()), &cls, None)?
        } else {
            cls.clone()
        };
        let picked = cls.gather_rows(nodes)?.to_vec();
        let student = student_rows(model, picked, &feats)?;
        Ok(teacher.gather_rows(nodes)?.cosine_rows(&student)?.mean().item())
    })
}

/// Mean of the rows: the pooled representation of a whole graph.
pub fn graph_embedding(e: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if e.is_empty() {
        return Err(Error::invalid("cannot pool an empty graph"));
    }
    let mut out = vec![0.0; e.dim];
    for i in 0..e.len() {
        out.iter_mut().zip(e.row(i)).for_each(|(o, x)| *o += x);
    }
    let n = e.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Composition of two node embeddings into one edge feature.
pub fn edge_embedding(e: &EmbeddingMatrix, u: i64, v: i64, mode: EdgeMode) -> Result<Vec<f64>> {
    let (a, b) = (e.row_of(u)?, e.row_of(v)?);
    Ok(match mode {
        EdgeMode::Hadamard => a.iter().zip(b).map(|(x, y)| x * y).collect(),
        EdgeMode::Concat => a.iter().chain(b).copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::store::{make_synthetic_tag, SyntheticSpec};
    use crate::tensor::{record_ops, OpKind};

    fn setup() -> (Model, Vocabulary, TextAttributedGraph) {
        let g = make_synthetic_tag(&SyntheticSpec::new(30, 2, 0.3, 0.02), 1).unwrap();
        let vocab = Vocabulary::build(g.node_texts().iter().map(String::as_str), 1).unwrap();
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_anchors: 8,
            ppr_width: 4,
            ..ModelConfig::desk(vocab.len())
        };
        (Model::new(cfg, 0).unwrap(), vocab, g)
    }

    fn opts() -> InferenceOptions {
        InferenceOptions::from_train_config(&TrainConfig::default())
    }

    #[test]
    fn embedding_is_deterministic_and_adjacency_free() {
        let (m, vocab, g) = setup();
        let nodes: Vec<usize> = (0..g.n_nodes()).collect();
        let (a, ops) = record_ops(|| embed_anchors(&m, &vocab, &g, &nodes, &opts()).unwrap());
        assert!(!ops.contains(&OpKind::CsrMatMul));
        assert!(ops.contains(&OpKind::Attention));
        let b = embed_anchors(&m, &vocab, &g, &nodes, &opts()).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.len(), a.dim), (30, 16));
    }

    #[test]
    fn subset_is_row_subset() {
        let (m, vocab, g) = setup();
        let all: Vec<usize> = (0..g.n_nodes()).collect();
        let full = embed_anchors(&m, &vocab, &g, &all, &opts()).unwrap();
        let sub = embed_anchors(&m, &vocab, &g, &[7, 2, 19], &opts()).unwrap();
        for (i, &v) in [7usize, 2, 19].iter().enumerate() {
            assert_eq!(sub.row(i), full.row(v));
        }
    }

    #[test]
    fn identical_text_and_structure_give_identical_rows() {
        let (m, _, _) = setup();
        let g = TextAttributedGraph::new(
            vec!["a b c".into(), "a b c".into(), "hub".into()],
            &[(0, 2), (1, 2)],
            false,
        )
        .unwrap();
        let vocab2 = Vocabulary::build(["a b c hub"], 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab2.len(),
            ..m.config.clone()
        };
        let m2 = Model::new(cfg, 0).unwrap();
        let e = embed_anchors(&m2, &vocab2, &g, &[0, 1], &opts()).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert!(matches!(
            embed_anchors(&m, &vocab2, &g, &[0], &opts()),
            Err(Error::Incompatible(_))
        ));
        assert!(embed_anchors(&m2, &vocab2, &g, &[3], &opts()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let e = EmbeddingMatrix::new(vec![10, -3], 2, vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0]).unwrap();
        let csv = e.to_csv();
        assert!(csv.starts_with("id,e0,e1\n10,"));
        assert_eq!(EmbeddingMatrix::from_csv(&csv).unwrap(), e);
        assert!(EmbeddingMatrix::from_csv("id,e0\n1,2,3\n").is_err());
    }

    #[test]
    fn pooling() {
        let one = EmbeddingMatrix::new(vec![0], 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(graph_embedding(&one).unwrap(), vec![1.0, 2.0, 3.0]);
        let two = EmbeddingMatrix::new(vec![0, 1], 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(graph_embedding(&two).unwrap(), vec![1.0, 2.0, 3.0]);
        let e = EmbeddingMatrix::new(vec![0, 1, 2], 2, vec![0.5, 1.0, 2.0, -1.0, 0.25, 4.0]).unwrap();
        let shuffled = EmbeddingMatrix::new(vec![2, 0, 1], 2, vec![0.25, 4.0, 0.5, 1.0, 2.0, -1.0]).unwrap();
        assert_eq!(graph_embedding(&e).unwrap(), graph_embedding(&shuffled).unwrap());
        assert!(graph_embedding(&EmbeddingMatrix::new(vec![], 2, vec![]).unwrap()).is_err());
    }

    #[test]
    fn edge_compositions() {
        let e = EmbeddingMatrix::new(vec![1, 2], 2, vec![2.0, -3.0, 0.5, 4.0]).unwrap();
        assert_eq!(edge_embedding(&e, 1, 1, EdgeMode::Hadamard).unwrap(), vec![4.0, 9.0]);
        assert_eq!(
            edge_embedding(&e, 1, 2, EdgeMode::Hadamard).unwrap(),
            edge_embedding(&e, 2, 1, EdgeMode::Hadamard).unwrap()
        );
        assert_eq!(edge_embedding(&e, 1, 2, EdgeMode::Concat).unwrap().len(), 4);
        assert!(edge_embedding(&e, 1, 9, EdgeMode::Concat).is_err());
    }
}
