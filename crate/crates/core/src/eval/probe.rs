use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, rmse, roc_auc};
use super::{edge_embedding, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::models::Linear;
use crate::rng::{self, purpose};
use crate::store::{DatasetSplit, Label, SplitLevel, TextAttributedGraph};
use crate::tensor::{Parameter, Tensor};
use crate::training::AdamW;

/// Probe targets aligned with the rows of an [`EmbeddingMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Real(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn n_outputs(&self) -> usize {
        match self {
            Targets::Classes(c) => c.iter().max().map_or(0, |m| m + 1),
            Targets::Real(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    RocAuc,
    Rmse,
}

impl Metric {
    fn check(self, targets: &Targets) -> Result<()> {
        match (self, targets) {
            (Metric::Accuracy, Targets::Classes(_)) | (Metric::Rmse, Targets::Real(_)) => Ok(()),
            (Metric::RocAuc, Targets::Classes(_)) if targets.n_outputs() <= 2 => Ok(()),
            (Metric::RocAuc, Targets::Classes(_)) => Err(Error::invalid("roc_auc needs a binary task")),
            (m, Targets::Classes(_)) => Err(Error::invalid(format!("{m} does not apply to classification"))),
            (m, Targets::Real(_)) => Err(Error::invalid(format!("{m} does not apply to regression"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::RocAuc => "roc_auc",
            Metric::Rmse => "rmse",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "roc_auc" | "roc-auc" => Ok(Metric::RocAuc),
            "rmse" => Ok(Metric::Rmse),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    #[default]
    Hadamard,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the training loss changes by less than this fraction.
    pub tolerance: f64,
    pub weight_decay: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            lr: 1e-2,
            max_steps: 500,
            tolerance: 1e-6,
            weight_decay: 0.0,
        }
    }
}

/// A linear map on standardized frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub dim: usize,
    pub n_outputs: usize,
    pub classification: bool,
    /// Row-major `dim x n_outputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub steps: usize,
    pub final_loss: f64,
}

impl ProbeModel {
    /// Raw outputs (logits or the regression value) for one feature row.
    pub fn outputs(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, &v) in x.iter().enumerate() {
            let z = (v - self.mean[j]) / self.scale[j];
            for (c, o) in out.iter_mut().enumerate() {
                *o += z * self.weight[j * self.n_outputs + c];
            }
        }
        out
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        let o = self.outputs(x);
        (0..o.len()).fold(0, |best, c| if o[c] > o[best] { c } else { best })
    }

    /// Score for ranking metrics: the positive-class logit margin.
    pub fn positive_score(&self, x: &[f64]) -> f64 {
        let o = self.outputs(x);
        if o.len() < 2 {
            return o[0];
        }
        o[1] - o[0]
    }
}

fn rows_of(e: &EmbeddingMatrix, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| e.row(r).iter().copied()).collect()
}

/// Full-batch AdamW on the frozen features of `train` rows.
pub fn probe_train(
    e: &EmbeddingMatrix,
    targets: &Targets,
    train: &[usize],
    seed: u64,
    opts: &ProbeOptions,
) -> Result<ProbeModel> {
    if targets.len() != e.len() {
        return Err(Error::invalid(format!("{} targets for {} embeddings", targets.len(), e.len())));
    }
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    if let Some(&r) = train.iter().find(|&&r| r >= e.len()) {
        return Err(Error::invalid(format!("training row {r} out of range")));
    }
    let d = e.dim;
    let n = train.len();
    let (classification, n_out) = match targets {
        Targets::Classes(c) => {
            let seen: HashSet<usize> = train.iter().map(|&r| c[r]).collect();
            if seen.len() < 2 {
                return Err(Error::invalid("training split holds a single class"));
            }
            (true, targets.n_outputs())
        }
        Targets::Real(_) => (false, 1),
    };

    let raw = rows_of(e, train);
    let mut mean = vec![0.0; d];
    for row in raw.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
    }
    let mut scale = vec![0.0; d];
    for row in raw.chunks(d) {
        scale.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m) * (x - m) / n as f64);
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let z: Vec<f64> = raw
        .chunks(d)
        .flat_map(|row| (0..d).map(|j| (row[j] - mean[j]) / scale[j]).collect::<Vec<_>>())
        .collect();
    let x = Tensor::from_vec(&[n, d], z)?;

    let mut r = rng::stream(seed, &[purpose::PROBE]);
    let layer = Linear::new("probe", d, n_out, &mut r);
    let params: Vec<&Parameter> = vec![&layer.weight, &layer.bias];
    let mut opt = AdamW::new(&params, opts.weight_decay);
    let loss_fn = || -> Result<Tensor> {
        let out = layer.forward(&x)?;
        match targets {
            Targets::Classes(c) => {
                let t: Vec<usize> = train.iter().map(|&r| c[r]).collect();
                out.cross_entropy_from_logits(&t)
            }
            Targets::Real(v) => {
                let t = Tensor::from_vec(&[n, 1], train.iter().map(|&r| v[r]).collect())?;
                out.mse(&t)
            }
        }
    };
    let mut prev = f64::INFINITY;
    let mut steps = 0;
    let mut last = f64::NAN;
    for _ in 0..opts.max_steps {
        params.iter().for_each(|p| p.tensor.zero_grad());
        let loss = loss_fn()?;
        last = loss.item();
        if !last.is_finite() {
            return Err(Error::NonFinite {
                step: steps as u64,
                tensor: "probe loss".into(),
            });
        }
        if prev.is_finite() && (prev - last).abs() <= opts.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        prev = last;
        loss.backward()?;
        opt.step(&params, opts.lr)?;
        steps += 1;
    }
    Ok(ProbeModel {
        dim: d,
        n_outputs: n_out,
        classification,
        weight: layer.weight.tensor.to_vec(),
        bias: layer.bias.tensor.to_vec(),
        mean,
        scale,
        steps,
        final_loss: last,
    })
}

/// Metric of a trained probe on `rows`.
pub fn evaluate(probe: &ProbeModel, e: &EmbeddingMatrix, targets: &Targets, rows: &[usize], metric: Metric) -> Result<f64> {
    metric.check(targets)?;
    match (metric, targets) {
        (Metric::Accuracy, Targets::Classes(c)) => {
            let preds: Vec<usize> = rows.iter().map(|&r| probe.predict_class(e.row(r))).collect();
            let labels: Vec<usize> = rows.iter().map(|&r| c[r]).collect();
            accuracy(&preds, &labels)
        }
        (Metric::RocAuc, Targets::Classes(c)) => {
            let scores: Vec<f64> = rows.iter().map(|&r| probe.positive_score(e.row(r))).collect();
            let labels: Vec<bool> = rows.iter().map(|&r| c[r] == 1).collect();
            roc_auc(&scores, &labels)
        }
        (Metric::Rmse, Targets::Real(v)) => {
            let preds: Vec<f64> = rows.iter().map(|&r| probe.outputs(e.row(r))[0]).collect();
            let t: Vec<f64> = rows.iter().map(|&r| v[r]).collect();
            rmse(&preds, &t)
        }
        _ => unreachable!("checked above"),
    }
}

/// One line of the metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric: Metric,
    pub value: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Trains one probe per seed on `split.train` and scores `split.test`.
pub fn run_probe(
    task: &str,
    e: &EmbeddingMatrix,
    targets: &Targets,
    split: &DatasetSplit,
    metric: Metric,
    seeds: &[u64],
    opts: &ProbeOptions,
) -> Result<Vec<MetricReport>> {
    metric.check(targets)?;
    seeds
        .iter()
        .map(|&seed| {
            let probe = probe_train(e, targets, &split.train, seed, opts)?;
            Ok(MetricReport {
                task: task.to_string(),
                metric,
                value: evaluate(&probe, e, targets, &split.test, metric)?,
                n_train: split.train.len(),
                n_val: split.val.len(),
                n_test: split.test.len(),
                seed,
            })
        })
        .collect()
}

/// Node labels aligned with the rows of `e`, and the graph's node split
/// restricted to embedded nodes (a seeded 60/20/20 split when the graph has
/// none). Class ids are renumbered densely in increasing order.
pub fn node_probe_dataset(e: &EmbeddingMatrix, g: &TextAttributedGraph, seed: u64) -> Result<(Targets, DatasetSplit)> {
    let labels = g
        .node_labels()
        .ok_or_else(|| Error::invalid("graph carries no node labels"))?;
    let nodes = e
        .ids
        .iter()
        .map(|&id| {
            g.dense_id(id)
                .ok_or_else(|| Error::invalid(format!("embedded id {id} is not a node of the graph")))
        })
        .collect::<Result<Vec<_>>>()?;
    let row_labels = nodes
        .iter()
        .map(|&v| labels[v].ok_or_else(|| Error::invalid(format!("node {} has no label", g.original_ids()[v]))))
        .collect::<Result<Vec<Label>>>()?;
    let targets = if row_labels.iter().all(|l| l.as_class().is_some()) {
        let mut classes: Vec<i64> = row_labels.iter().filter_map(Label::as_class).collect();
        classes.sort_unstable();
        classes.dedup();
        Targets::Classes(
            row_labels
                .iter()
                .map(|l| classes.binary_search(&l.as_class().unwrap()).unwrap())
                .collect(),
        )
    } else {
        Targets::Real(row_labels.iter().map(Label::as_real).collect())
    };
    let split = match g.split() {
        Some(s) if s.level == SplitLevel::Node => {
            let mut row_of = vec![None; g.n_nodes()];
            for (row, &v) in nodes.iter().enumerate() {
                row_of[v] = Some(row);
            }
            let map = |part: &[usize]| part.iter().filter_map(|&v| row_of[v]).collect();
            DatasetSplit::new(SplitLevel::Node, map(&s.train), map(&s.val), map(&s.test), e.len())?
        }
        _ => DatasetSplit::random(SplitLevel::Node, e.len(), 0.6, 0.2, seed)?,
    };
    Ok((targets, split))
}

/// Binary edge-existence task: every undirected edge as a positive and as
/// many uniformly drawn non-adjacent pairs as negatives, composed with
/// `mode`, split 60/20/20.
pub fn edge_probe_dataset(
    e: &EmbeddingMatrix,
    g: &TextAttributedGraph,
    mode: EdgeMode,
    seed: u64,
) -> Result<(EmbeddingMatrix, Targets, DatasetSplit)> {
    let csr = g.csr();
    let n = g.n_nodes();
    let positives: Vec<(usize, usize)> = csr.arcs().filter(|(u, v)| u < v).collect();
    if positives.is_empty() {
        return Err(Error::invalid("graph has no edges to probe"));
    }
    let max_neg = n * (n - 1) / 2 - positives.len();
    if max_neg < positives.len() {
        return Err(Error::invalid("graph too dense for 1:1 negative sampling"));
    }
    let mut r = rng::stream(seed, &[purpose::NEGATIVES]);
    let mut chosen = HashSet::new();
    let mut negatives = Vec::with_capacity(positives.len());
    while negatives.len() < positives.len() {
        let (a, b) = (r.gen_range(0..n), r.gen_range(0..n));
        let (u, v) = (a.min(b), a.max(b));
        if u == v || csr.has_edge(u, v) || !chosen.insert((u, v)) {
            continue;
        }
        negatives.push((u, v));
    }
    let ids = g.original_ids();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (pairs, label) in [(&positives, 1), (&negatives, 0)] {
        for &(u, v) in pairs {
            data.extend(edge_embedding(e, ids[u], ids[v], mode)?);
            labels.push(label);
        }
    }
    let rows = labels.len();
    let dim = data.len() / rows;
    let features = EmbeddingMatrix::new((0..rows as i64).collect(), dim, data)?;
    let split = DatasetSplit::random(SplitLevel::Edge, rows, 0.6, 0.2, seed)?;
    Ok((features, Targets::Classes(labels), split))
}
