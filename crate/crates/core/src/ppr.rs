//! Personalized PageRank.
//!
//! The walk matrix is the row-stochastic `W = D^{-1}(A + I)`: every node gets
//! a self-loop, so isolated and dangling nodes are well defined. The PPR
//! vector of seed `s` is the column solution
//!
//! ```text
//! pi = alpha * (I - (1 - alpha) W^T)^{-1} e_s
//! ```
//!
//! i.e. the stationary distribution of a walk that follows `W` and restarts
//! at `s` with probability `alpha`. Note the transpose: `W` itself is row
//! stochastic, so `W^T` maps distributions to distributions.

use std::collections::{HashMap, HashSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Csr, TextAttributedGraph};

pub const DEFAULT_ALPHA: f64 = 0.15;
/// Desk-scale feature width; the large-scale setting uses 128.
pub const DEFAULT_FEATURE_WIDTH: usize = 16;
pub const DENSE_SOLVE_LIMIT: usize = 2000;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    Ok(())
}

/// Sparse PPR scores of one seed, sorted by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PprVector {
    pub seed: usize,
    pub alpha: f64,
    pub scores: Vec<(usize, f64)>,
}

impl PprVector {
    pub fn get(&self, node: usize) -> f64 {
        self.scores
            .binary_search_by_key(&node, |e| e.0)
            .map(|i| self.scores[i].1)
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().map(|e| e.1).sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut d = vec![0.0; n];
        for &(v, s) in &self.scores {
            d[v] = s;
        }
        d
    }

    /// Highest `k` scores, descending; ties broken by node id.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut s = self.scores.clone();
        s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        s.truncate(k);
        s
    }

    fn from_dense(seed: usize, alpha: f64, dense: &[f64]) -> Self {
        PprVector {
            seed,
            alpha,
            scores: dense
                .iter()
                .enumerate()
                .filter(|(_, &s)| s != 0.0)
                .map(|(i, &s)| (i, s))
                .collect(),
        }
    }
}

/// Row-stochastic `D^{-1}(A + I)` over a CSR adjacency.
#[derive(Debug, Clone)]
pub struct WalkMatrix<'a> {
    csr: &'a Csr,
}

impl<'a> WalkMatrix<'a> {
    pub fn new(csr: &'a Csr) -> Self {
        WalkMatrix { csr }
    }

    /// Degree including the self-loop.
    pub fn degree(&self, u: usize) -> usize {
        self.csr.degree(u) + 1
    }

    pub fn weight(&self, u: usize, v: usize) -> f64 {
        if u == v || self.csr.has_edge(u, v) {
            1.0 / self.degree(u) as f64
        } else {
            0.0
        }
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.csr.n_nodes();
        let mut m = vec![vec![0.0; n]; n];
        for (u, row) in m.iter_mut().enumerate() {
            let w = 1.0 / self.degree(u) as f64;
            row[u] = w;
            for &v in self.csr.neighbors(u) {
                row[v] = w;
            }
        }
        m
    }
}

/// Dense Gaussian elimination with partial pivoting; solves `m x = b` in place.
fn solve_dense(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        b.swap(col, piv);
        let d = m[col][col];
        for row in col + 1..n {
            let f = m[row][col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / m[row][row];
    }
    x
}

/// Reference PPR by a dense linear solve. Only for graphs up to
/// [`DENSE_SOLVE_LIMIT`] nodes.
pub fn exact_ppr(csr: &Csr, seed: usize, alpha: f64) -> Result<PprVector> {
    check_alpha(alpha)?;
    let n = csr.n_nodes();
    if n == 0 {
        return Err(Error::invalid("graph has no nodes"));
    }
    if n > DENSE_SOLVE_LIMIT {
        return Err(Error::TooLarge {
            n_nodes: n,
            limit: DENSE_SOLVE_LIMIT,
        });
    }
    if seed >= n {
        return Err(Error::NodeOutOfRange { node: seed, n_nodes: n });
    }
    let w = WalkMatrix::new(csr).dense();
    // system matrix I - (1 - alpha) W^T
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = -(1.0 - alpha) * w[j][i];
        }
        m[i][i] += 1.0;
    }
    let mut rhs = vec![0.0; n];
    rhs[seed] = alpha;
    let mut x = solve_dense(m, rhs);
    for v in &mut x {
        if *v < 0.0 {
            // round-off around structural zeros
            *v = 0.0;
        }
    }
    Ok(PprVector::from_dense(seed, alpha, &x))
}

/// Power iteration on `pi <- alpha e_s + (1 - alpha) W^T pi`, kept as an
/// independent cross-check of the other two routes.
pub fn power_iteration_ppr(csr: &Csr, seed: usize, alpha: f64, iters: usize) -> Result<PprVector> {
    check_alpha(alpha)?;
    let n = csr.n_nodes();
    if seed >= n {
        return Err(Error::NodeOutOfRange { node: seed, n_nodes: n });
    }
    let walk = WalkMatrix::new(csr);
    let mut pi = vec![0.0; n];
    pi[seed] = 1.0;
    for _ in 0..iters {
        let mut next = vec![0.0; n];
        next[seed] = alpha;
        for u in 0..n {
            let share = (1.0 - alpha) * pi[u] / walk.degree(u) as f64;
            next[u] += share;
            for &v in csr.neighbors(u) {
                next[v] += share;
            }
        }
        pi = next;
    }
    Ok(PprVector::from_dense(seed, alpha, &pi))
}

/// Diagnostics of a forward-push run.
#[derive(Debug, Clone, Default)]
pub struct PushStats {
    pub pushes: usize,
    pub residual_mass: f64,
    pub max_residual_ratio: f64,
}

/// Forward push (estimate/residual pair). Terminates once every residual
/// satisfies `r[u] < epsilon * deg(u)`, where `deg` counts the self-loop.
/// The estimate is L1-normalized; if no push fired the result is `e_seed`.
pub fn push_ppr(csr: &Csr, seed: usize, alpha: f64, epsilon: f64) -> Result<PprVector> {
    push_ppr_with_stats(csr, seed, alpha, epsilon).map(|(p, _)| p)
}

pub fn push_ppr_with_stats(
    csr: &Csr,
    seed: usize,
    alpha: f64,
    epsilon: f64,
) -> Result<(PprVector, PushStats)> {
    check_alpha(alpha)?;
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = csr.n_nodes();
    if seed >= n {
        return Err(Error::NodeOutOfRange { node: seed, n_nodes: n });
    }
    let deg = |u: usize| (csr.degree(u) + 1) as f64;
    let mut estimate: HashMap<usize, f64> = HashMap::new();
    let mut residual: HashMap<usize, f64> = HashMap::new();
    residual.insert(seed, 1.0);
    let mut queue = VecDeque::from([seed]);
    let mut queued: HashSet<usize> = HashSet::from([seed]);
    let mut stats = PushStats::default();

    while let Some(u) = queue.pop_front() {
        queued.remove(&u);
        let r = residual.get(&u).copied().unwrap_or(0.0);
        let du = deg(u);
        if r < epsilon * du {
            continue;
        }
        stats.pushes += 1;
        *estimate.entry(u).or_default() += alpha * r;
        let share = (1.0 - alpha) * r / du;
        residual.insert(u, share);
        if share >= epsilon * du && !queued.contains(&u) {
            queue.push_back(u);
            queued.insert(u);
        }
        for &v in csr.neighbors(u) {
            let rv = residual.entry(v).or_default();
            *rv += share;
            if *rv >= epsilon * deg(v) && !queued.contains(&v) {
                queue.push_back(v);
                queued.insert(v);
            }
        }
    }

    let mut residual: Vec<(usize, f64)> = residual.into_iter().collect();
    residual.sort_unstable_by_key(|e| e.0);
    stats.residual_mass = residual.iter().map(|e| e.1).sum();
    stats.max_residual_ratio = residual
        .iter()
        .map(|&(u, r)| r / deg(u))
        .fold(0.0, f64::max);
    let mut scores: Vec<(usize, f64)> = estimate.into_iter().filter(|e| e.1 > 0.0).collect();
    scores.sort_unstable_by_key(|e| e.0);
    let total: f64 = scores.iter().map(|e| e.1).sum();
    if total > 0.0 {
        for e in &mut scores {
            e.1 /= total;
        }
    } else {
        scores = vec![(seed, 1.0)];
    }
    Ok((
        PprVector {
            seed,
            alpha,
            scores,
        },
        stats,
    ))
}

/// Fixed-width structural feature: the seed's PPR scores over the other
/// members of its context subgraph, sorted descending and zero padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PprFeatures(pub Vec<f64>);

impl PprFeatures {
    pub fn zeros(width: usize) -> Self {
        PprFeatures(vec![0.0; width])
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }
}

pub fn ppr_features(pi: &PprVector, subgraph_nodes: &[usize], width: usize) -> PprFeatures {
    let mut nodes: Vec<usize> = subgraph_nodes
        .iter()
        .copied()
        .filter(|&v| v != pi.seed)
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    let mut vals: Vec<f64> = nodes
        .iter()
        .map(|&v| pi.get(v))
        .filter(|&s| s > 0.0)
        .collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals.resize(width, 0.0);
    PprFeatures(vals)
}

/// Push-based PPR vectors for every node of a graph, computed in parallel.
#[derive(Debug, Clone)]
pub struct PprTable {
    pub alpha: f64,
    pub epsilon: f64,
    vectors: Vec<PprVector>,
}

impl PprTable {
    pub fn compute(g: &TextAttributedGraph, alpha: f64, epsilon: f64) -> Result<Self> {
        Self::compute_csr(g.csr(), alpha, epsilon)
    }

    pub fn compute_csr(csr: &Csr, alpha: f64, epsilon: f64) -> Result<Self> {
        let vectors = (0..csr.n_nodes())
            .into_par_iter()
            .map(|s| push_ppr(csr, s, alpha, epsilon))
            .collect::<Result<Vec<_>>>()?;
        Ok(PprTable {
            alpha,
            epsilon,
            vectors,
        })
    }

    pub fn get(&self, seed: usize) -> &PprVector {
        &self.vectors[seed]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}
