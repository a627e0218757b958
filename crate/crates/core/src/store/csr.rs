use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compressed sparse row adjacency. Neighbor lists are sorted ascending and
/// free of duplicates and self-loops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Csr {
    pub fn empty(n_nodes: usize) -> Self {
        Csr {
            offsets: vec![0; n_nodes + 1],
            targets: Vec::new(),
        }
    }

    /// Builds a CSR from an edge list. Self-loops are dropped, multi-edges
    /// collapsed, and with `symmetric` every edge is inserted in both
    /// directions.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)], symmetric: bool) -> Result<Self> {
        let (csr, _) = Self::from_edges_with_origin(n_nodes, edges, symmetric)?;
        Ok(csr)
    }

    /// Like [`Csr::from_edges`] but also reports, for every CSR slot, the index
    /// of the input edge that produced it (first occurrence wins on duplicates).
    pub fn from_edges_with_origin(
        n_nodes: usize,
        edges: &[(usize, usize)],
        symmetric: bool,
    ) -> Result<(Self, Vec<usize>)> {
        let mut arcs: Vec<(usize, usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= n_nodes || v >= n_nodes {
                return Err(Error::NodeOutOfRange {
                    node: u.max(v),
                    n_nodes,
                });
            }
            if u == v {
                continue;
            }
            arcs.push((u, v, i));
            if symmetric {
                arcs.push((v, u, i));
            }
        }
        arcs.sort_unstable();
        arcs.dedup_by(|b, a| a.0 == b.0 && a.1 == b.1);

        let mut offsets = vec![0usize; n_nodes + 1];
        for &(u, _, _) in &arcs {
            offsets[u + 1] += 1;
        }
        for i in 0..n_nodes {
            offsets[i + 1] += offsets[i];
        }
        let targets = arcs.iter().map(|a| a.1).collect();
        let origin = arcs.iter().map(|a| a.2).collect();
        Ok((Csr { offsets, targets }, origin))
    }

    /// Assembles a CSR from raw arrays, validating every structural invariant.
    pub fn from_raw(offsets: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        let csr = Csr { offsets, targets };
        csr.validate()?;
        Ok(csr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGraph(m));
        if self.offsets.is_empty() || self.offsets[0] != 0 {
            return bad("csr offsets must start at 0".into());
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("csr offsets must be non-decreasing".into());
        }
        if *self.offsets.last().unwrap() != self.targets.len() {
            return bad(format!(
                "last csr offset {} != target count {}",
                self.offsets.last().unwrap(),
                self.targets.len()
            ));
        }
        let n = self.n_nodes();
        for v in 0..n {
            let nb = self.neighbors(v);
            if let Some(&t) = nb.iter().find(|&&t| t >= n) {
                return bad(format!("target {t} of node {v} out of range"));
            }
            if nb.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("neighbor list of node {v} not strictly sorted"));
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_slots(&self) -> usize {
        self.targets.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Slot index of arc (u, v), if present.
    pub fn slot(&self, u: usize, v: usize) -> Option<usize> {
        self.neighbors(u)
            .binary_search(&v)
            .ok()
            .map(|i| self.offsets[u] + i)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.slot(u, v).is_some()
    }

    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes()).flat_map(move |u| self.neighbors(u).iter().map(move |&v| (u, v)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.arcs().all(|(u, v)| self.has_edge(v, u))
    }

    pub fn symmetrize(&self) -> Csr {
        let arcs: Vec<_> = self.arcs().collect();
        Csr::from_edges(self.n_nodes(), &arcs, true).expect("arcs of a valid csr are in range")
    }

    /// Induced subgraph on `nodes` (global ids, in local order). Local node `i`
    /// corresponds to `nodes[i]`.
    pub fn induced(&self, nodes: &[usize]) -> Csr {
        let mut local = std::collections::HashMap::with_capacity(nodes.len());
        for (i, &g) in nodes.iter().enumerate() {
            local.insert(g, i);
        }
        let mut edges = Vec::new();
        for (i, &g) in nodes.iter().enumerate() {
            for t in self.neighbors(g) {
                if let Some(&j) = local.get(t) {
                    edges.push((i, j));
                }
            }
        }
        Csr::from_edges(nodes.len(), &edges, false).expect("local ids are in range")
    }

    /// Block-diagonal union: node ids of `parts[k]` are shifted by the node
    /// counts of the earlier parts.
    pub fn block_diagonal(parts: &[&Csr]) -> Csr {
        let mut offsets = vec![0usize];
        let mut targets = Vec::new();
        let mut shift = 0;
        for p in parts {
            for v in 0..p.n_nodes() {
                targets.extend(p.neighbors(v).iter().map(|t| t + shift));
                offsets.push(targets.len());
            }
            shift += p.n_nodes();
        }
        Csr { offsets, targets }
    }
}
