//! Unified task sampling: every node, edge or graph task becomes a set of
//! anchor nodes inside a context subgraph.
//!
//! Node tasks draw, hop by hop, up to `budgets[k]` nodes from the exact-distance
//! ring `N_k(v)` without replacement, with selection weights proportional to
//! the anchor's PPR scores. Draws use Efraimidis–Spirakis keys
//! `ln(U_u) / w_u` where `U_u` is a pure function of the stream key and the
//! candidate id, so results do not depend on candidate enumeration order.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppr::{ppr_features, PprFeatures, PprTable, PprVector};
use crate::rng::{mix64, unit_open};
use crate::store::{Csr, TextAttributedGraph};

/// Floor applied to zero PPR weights so every candidate stays drawable.
pub const WEIGHT_FLOOR: f64 = 1e-12;
pub const DEFAULT_BUDGETS: [usize; 2] = [10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Edge,
    Graph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSubgraph {
    pub task_kind: TaskKind,
    /// Local indices of the task's target nodes.
    pub anchors: Vec<usize>,
    /// Global node id of every local node; anchors and earlier hops first.
    pub local_to_global: Vec<usize>,
    /// Induced adjacency over the local nodes.
    pub adjacency: Csr,
    /// One entry per local node once [`ContextSubgraph::attach_ppr_features`]
    /// has run; empty before.
    pub ppr_features: Vec<PprFeatures>,
}

impl ContextSubgraph {
    pub fn n_nodes(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn local_index(&self, global: usize) -> Option<usize> {
        self.local_to_global.iter().position(|&g| g == global)
    }

    /// Fills per-node PPR features: node `w`'s scores restricted to the other
    /// members of this subgraph.
    pub fn attach_ppr_features(&mut self, table: &PprTable, width: usize) {
        self.ppr_features = self
            .local_to_global
            .iter()
            .map(|&g| ppr_features(table.get(g), &self.local_to_global, width))
            .collect();
    }

    pub fn zero_ppr_features(&mut self, width: usize) {
        self.ppr_features = vec![PprFeatures::zeros(width); self.n_nodes()];
    }
}

fn validate_budgets(budgets: &[usize]) -> Result<()> {
    if budgets.is_empty() {
        return Err(Error::invalid("at least one hop budget is required"));
    }
    Ok(())
}

/// Weighted sampling without replacement; returns indices into `weights` in
/// draw order (largest key first).
pub fn weighted_sample(weights: &[f64], ids: &[usize], k: usize, stream_key: u64) -> Vec<usize> {
    debug_assert_eq!(weights.len(), ids.len());
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .zip(ids)
        .enumerate()
        .map(|(i, (&w, &id))| {
            let u = unit_open(stream_key ^ mix64(id as u64 + 1));
            (u.ln() / w.max(WEIGHT_FLOOR), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(ids[a.1].cmp(&ids[b.1])));
    keyed.truncate(k);
    keyed.into_iter().map(|e| e.1).collect()
}

/// PPR-weighted K-hop context subgraph of `v`.
pub fn sample_node_subgraph(
    g: &TextAttributedGraph,
    v: usize,
    pi: &PprVector,
    budgets: &[usize],
    rng: &mut impl Rng,
) -> Result<ContextSubgraph> {
    let nodes = sample_node_set(g.csr(), v, pi, budgets, rng.gen())?;
    Ok(induce(g.csr(), nodes, vec![0], TaskKind::Node))
}

pub(crate) fn sample_node_set(
    csr: &Csr,
    v: usize,
    pi: &PprVector,
    budgets: &[usize],
    stream_key: u64,
) -> Result<Vec<usize>> {
    validate_budgets(budgets)?;
    if v >= csr.n_nodes() {
        return Err(Error::NodeOutOfRange {
            node: v,
            n_nodes: csr.n_nodes(),
        });
    }
    let mut selected = vec![v];
    let mut seen: HashSet<usize> = HashSet::from([v]);
    let mut frontier = vec![v];
    for (hop, &budget) in budgets.iter().enumerate() {
        // exact-distance ring: neighbors of the previous ring not seen before
        let mut ring: Vec<usize> = frontier
            .iter()
            .flat_map(|&u| csr.neighbors(u).iter().copied())
            .filter(|u| !seen.contains(u))
            .collect();
        ring.sort_unstable();
        ring.dedup();
        if ring.is_empty() {
            break;
        }
        seen.extend(ring.iter().copied());
        let raw: Vec<f64> = ring.iter().map(|&u| pi.get(u).max(WEIGHT_FLOOR)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let key = mix64(stream_key ^ mix64(hop as u64 + 0x5eed));
        let picks = weighted_sample(&weights, &ring, budget, key);
        selected.extend(picks.iter().map(|&i| ring[i]));
        // the next ring grows from the whole ring, not just the picks, so that
        // N_k keeps its exact-distance meaning
        frontier = ring;
    }
    Ok(selected)
}

fn induce(csr: &Csr, nodes: Vec<usize>, anchors: Vec<usize>, kind: TaskKind) -> ContextSubgraph {
    let adjacency = csr.induced(&nodes);
    ContextSubgraph {
        task_kind: kind,
        anchors,
        local_to_global: nodes,
        adjacency,
        ppr_features: Vec::new(),
    }
}

/// Union of the two endpoint subgraphs, then induced edges. The pair need not
/// be linked (negative samples).
pub fn sample_edge_subgraph(
    g: &TextAttributedGraph,
    u: usize,
    v: usize,
    pi_u: &PprVector,
    pi_v: &PprVector,
    budgets: &[usize],
    rng: &mut impl Rng,
) -> Result<ContextSubgraph> {
    if u == v {
        return Err(Error::invalid("edge task needs two distinct endpoints"));
    }
    let key_u: u64 = rng.gen();
    let key_v: u64 = rng.gen();
    let su = sample_node_set(g.csr(), u, pi_u, budgets, key_u)?;
    let sv = sample_node_set(g.csr(), v, pi_v, budgets, key_v)?;
    Ok(union_subgraph(g.csr(), su, sv))
}

pub(crate) fn union_subgraph(csr: &Csr, su: Vec<usize>, sv: Vec<usize>) -> ContextSubgraph {
    let (u, v) = (su[0], sv[0]);
    let mut nodes = su;
    let mut have: HashSet<usize> = nodes.iter().copied().collect();
    for w in sv {
        if have.insert(w) {
            nodes.push(w);
        }
    }
    let anchors = vec![0, nodes.iter().position(|&w| w == v).unwrap()];
    debug_assert_eq!(nodes[0], u);
    induce(csr, nodes, anchors, TaskKind::Edge)
}

/// Wraps a whole graph as one sample; every node is an anchor.
pub fn graph_as_sample(g: &TextAttributedGraph) -> Result<ContextSubgraph> {
    let n = g.n_nodes();
    if n == 0 {
        return Err(Error::invalid("cannot wrap an empty graph"));
    }
    Ok(ContextSubgraph {
        task_kind: TaskKind::Graph,
        anchors: (0..n).collect(),
        local_to_global: (0..n).collect(),
        adjacency: g.csr().clone(),
        ppr_features: Vec::new(),
    })
}

/// All nodes within `hops` of `v` (breadth-first order), i.e. what node
/// sampling returns when every budget is unbounded.
pub fn k_hop_nodes(csr: &Csr, v: usize, hops: usize) -> Vec<usize> {
    let mut out = vec![v];
    let mut seen: HashSet<usize> = HashSet::from([v]);
    let mut frontier = vec![v];
    for _ in 0..hops {
        let mut ring: Vec<usize> = frontier
            .iter()
            .flat_map(|&u| csr.neighbors(u).iter().copied())
            .filter(|u| !seen.contains(u))
            .collect();
        ring.sort_unstable();
        ring.dedup();
        if ring.is_empty() {
            break;
        }
        seen.extend(ring.iter().copied());
        out.extend_from_slice(&ring);
        frontier = ring;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppr::exact_ppr;
    use crate::rng;
    use crate::store::{make_synthetic_tag, SyntheticSpec};

    fn star(leaves: usize) -> TextAttributedGraph {
        let edges: Vec<_> = (1..=leaves).map(|l| (0, l)).collect();
        TextAttributedGraph::new(vec![String::new(); leaves + 1], &edges, false).unwrap()
    }

    fn node_set(s: &ContextSubgraph) -> Vec<usize> {
        let mut v = s.local_to_global.clone();
        v.sort_unstable();
        v
    }

    #[test]
    fn exhaustive_budgets_give_the_full_neighborhood() {
        let spec = SyntheticSpec::new(40, 2, 0.2, 0.02);
        let g = make_synthetic_tag(&spec, 1).unwrap();
        let pi = exact_ppr(g.csr(), 3, 0.15).unwrap();
        let a = sample_node_subgraph(&g, 3, &pi, &[100, 100], &mut rng::stream(1, &[])).unwrap();
        let b = sample_node_subgraph(&g, 3, &pi, &[100, 100], &mut rng::stream(2, &[])).unwrap();
        assert_eq!(node_set(&a), node_set(&b));
        let mut full = k_hop_nodes(g.csr(), 3, 2);
        full.sort_unstable();
        assert_eq!(node_set(&a), full);
        assert_eq!(a.anchors, vec![0]);
        assert_eq!(a.local_to_global[0], 3);
    }

    #[test]
    fn uniform_scores_give_uniform_first_draws() {
        let g = star(4);
        let pi = PprVector {
            seed: 0,
            alpha: 0.15,
            scores: vec![(0, 0.6), (1, 0.1), (2, 0.1), (3, 0.1), (4, 0.1)],
        };
        let mut counts = [0usize; 5];
        let trials = 8000;
        for t in 0..trials {
            let s = sample_node_subgraph(&g, 0, &pi, &[1], &mut rng::stream(t, &[])).unwrap();
            counts[s.local_to_global[1]] += 1;
        }
        for &c in &counts[1..] {
            assert!((c as f64 / trials as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn rejects_empty_budgets_and_bad_nodes() {
        let g = star(3);
        let pi = exact_ppr(g.csr(), 0, 0.15).unwrap();
        assert!(sample_node_subgraph(&g, 0, &pi, &[], &mut rng::stream(0, &[])).is_err());
        assert!(sample_node_subgraph(&g, 9, &pi, &[1], &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn zero_scores_are_floored() {
        let g = star(3);
        let pi = PprVector {
            seed: 0,
            alpha: 0.15,
            scores: vec![(0, 1.0)],
        };
        let s = sample_node_subgraph(&g, 0, &pi, &[2], &mut rng::stream(0, &[])).unwrap();
        assert_eq!(s.n_nodes(), 3);
    }

    #[test]
    fn edge_union_with_subset_and_disjoint_parts() {
        // path 0-1-2: G_0 with two hops covers G_1 restricted to one hop
        let g = TextAttributedGraph::new(vec![String::new(); 3], &[(0, 1), (1, 2)], false).unwrap();
        let t = PprTable::compute(&g, 0.15, 1e-9).unwrap();
        let s = sample_edge_subgraph(&g, 0, 1, t.get(0), t.get(1), &[5, 5], &mut rng::stream(0, &[]))
            .unwrap();
        assert_eq!(node_set(&s), vec![0, 1, 2]);
        assert_eq!(s.anchors.len(), 2);
        assert_eq!(s.local_to_global[s.anchors[1]], 1);

        let g2 = TextAttributedGraph::new(vec![String::new(); 4], &[(0, 1), (2, 3)], false).unwrap();
        let t2 = PprTable::compute(&g2, 0.15, 1e-9).unwrap();
        let s2 = sample_edge_subgraph(&g2, 0, 2, t2.get(0), t2.get(2), &[5], &mut rng::stream(0, &[]))
            .unwrap();
        assert_eq!(s2.n_nodes(), 4);
        assert!(sample_edge_subgraph(&g2, 1, 1, t2.get(1), t2.get(1), &[5], &mut rng::stream(0, &[]))
            .is_err());
    }

    #[test]
    fn edge_union_commutes_with_swapped_keys() {
        let spec = SyntheticSpec::new(60, 2, 0.15, 0.02);
        let g = make_synthetic_tag(&spec, 4).unwrap();
        let t = PprTable::compute(&g, 0.15, 1e-7).unwrap();
        for (u, v) in [(0, 5), (10, 50), (3, 40)] {
            let su = sample_node_set(g.csr(), u, t.get(u), &[3, 3], 11).unwrap();
            let sv = sample_node_set(g.csr(), v, t.get(v), &[3, 3], 22).unwrap();
            let a = union_subgraph(g.csr(), su.clone(), sv.clone());
            let b = union_subgraph(g.csr(), sv, su);
            assert_eq!(node_set(&a), node_set(&b));
        }
    }

    #[test]
    fn random_edges_contain_both_endpoint_samples() {
        let spec = SyntheticSpec::new(80, 3, 0.1, 0.02);
        let g = make_synthetic_tag(&spec, 8).unwrap();
        let t = PprTable::compute(&g, 0.15, 1e-7).unwrap();
        let mut r = rng::stream(3, &[]);
        for i in 0..100 {
            let u = r.gen_range(0..80);
            let v = (u + 1 + r.gen_range(0..79)) % 80;
            let (ku, kv) = (rng::derive_seed(i, &[0]), rng::derive_seed(i, &[1]));
            let su = sample_node_set(g.csr(), u, t.get(u), &[4, 4], ku).unwrap();
            let sv = sample_node_set(g.csr(), v, t.get(v), &[4, 4], kv).unwrap();
            let e = union_subgraph(g.csr(), su.clone(), sv.clone());
            let set: HashSet<usize> = e.local_to_global.iter().copied().collect();
            assert!(su.iter().chain(&sv).all(|w| set.contains(w)));
            assert_eq!(e.local_to_global[e.anchors[0]], u);
            assert_eq!(e.local_to_global[e.anchors[1]], v);
            // induced-subgraph soundness
            for a in 0..e.n_nodes() {
                for b in 0..e.n_nodes() {
                    assert_eq!(
                        e.adjacency.has_edge(a, b),
                        g.csr().has_edge(e.local_to_global[a], e.local_to_global[b])
                    );
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = SyntheticSpec::new(50, 2, 0.2, 0.02);
        let g = make_synthetic_tag(&spec, 2).unwrap();
        let pi = exact_ppr(g.csr(), 7, 0.15).unwrap();
        let a = sample_node_subgraph(&g, 7, &pi, &[3, 4], &mut rng::stream(9, &[])).unwrap();
        let b = sample_node_subgraph(&g, 7, &pi, &[3, 4], &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_samples_wrap_everything() {
        let g = TextAttributedGraph::new(
            vec!["c".into(), "c".into(), "o".into(), "n".into(), "h".into()],
            &[(0, 1), (1, 2), (2, 3), (3, 4)],
            false,
        )
        .unwrap();
        let s = graph_as_sample(&g).unwrap();
        assert_eq!(s.n_nodes(), 5);
        assert_eq!(&s.adjacency, g.csr());
        assert_eq!(s.anchors, vec![0, 1, 2, 3, 4]);
        assert!(s.ppr_features.is_empty());
        let single = TextAttributedGraph::new(vec!["x".into()], &[], false).unwrap();
        assert_eq!(graph_as_sample(&single).unwrap().anchors, vec![0]);
        let empty = TextAttributedGraph::new(vec![], &[], false).unwrap();
        assert!(graph_as_sample(&empty).is_err());
    }
}
