//! Text-attributed graphs: data model, JSONL ingestion, binary persistence
//! and synthetic generators.

mod binary;
mod csr;
mod jsonl;
mod synth;

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub(crate) use binary::{open_frame, Reader, Writer};
pub use binary::{load_binary, read_binary, save_binary, write_binary, BINARY_VERSION};
pub use csr::Csr;
pub use jsonl::{load_collection_jsonl, load_jsonl, parse_collection, parse_jsonl, IngestOptions};
pub use synth::{default_word_pools, make_synthetic_tag, SyntheticSpec};

use crate::error::{Error, Result};
use crate::rng;
use crate::text::Vocabulary;

/// Node or graph target: a class id or a real-valued regression target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(i64),
    Real(f64),
}

impl Label {
    pub fn as_class(&self) -> Option<i64> {
        match *self {
            Label::Class(c) => Some(c),
            Label::Real(_) => None,
        }
    }

    pub fn as_real(&self) -> f64 {
        match *self {
            Label::Class(c) => c as f64,
            Label::Real(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: i64,
    pub text: String,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRecord {
    pub src: i64,
    pub dst: i64,
    pub text: Option<String>,
    pub label: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitLevel {
    Node,
    Edge,
    Graph,
}

/// Train/validation/test index lists over nodes, edges or graph instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub level: SplitLevel,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Validates disjointness and that every id is below `universe`.
    pub fn new(
        level: SplitLevel,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
        universe: usize,
    ) -> Result<Self> {
        let mut seen = vec![false; universe];
        for &id in train.iter().chain(&val).chain(&test) {
            if id >= universe {
                return Err(Error::invalid(format!(
                    "split id {id} out of range (universe {universe})"
                )));
            }
            if seen[id] {
                return Err(Error::invalid(format!("split id {id} appears twice")));
            }
            seen[id] = true;
        }
        Ok(DatasetSplit {
            level,
            train,
            val,
            test,
        })
    }

    /// Seeded random split; the test part takes whatever the two fractions leave.
    pub fn random(
        level: SplitLevel,
        universe: usize,
        train_frac: f64,
        val_frac: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_frac)
            || !(0.0..=1.0).contains(&val_frac)
            || train_frac + val_frac > 1.0
        {
            return Err(Error::invalid("split fractions must lie in [0,1] and sum to <= 1"));
        }
        let mut ids: Vec<usize> = (0..universe).collect();
        ids.shuffle(&mut rng::stream(seed, &[rng::purpose::SPLIT]));
        let n_train = (train_frac * universe as f64).round() as usize;
        let n_val = ((val_frac * universe as f64).round() as usize).min(universe - n_train);
        let mut train = ids[..n_train].to_vec();
        let mut val = ids[n_train..n_train + n_val].to_vec();
        let mut test = ids[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(DatasetSplit {
            level,
            train,
            val,
            test,
        })
    }
}

/// A graph whose nodes (and optionally edges) carry raw text.
///
/// Nodes are densely indexed `0..n_nodes`; the ids found in the source files
/// are kept in [`TextAttributedGraph::original_ids`]. Edge payloads are
/// aligned with CSR slots, so an undirected edge stores its text twice.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAttributedGraph {
    pub(crate) csr: Csr,
    pub(crate) directed: bool,
    pub(crate) node_texts: Vec<String>,
    pub(crate) edge_texts: Option<Vec<Option<String>>>,
    pub(crate) node_labels: Option<Vec<Option<Label>>>,
    pub(crate) edge_labels: Option<Vec<Option<i64>>>,
    pub(crate) graph_label: Option<Label>,
    pub(crate) original_ids: Vec<i64>,
    pub(crate) split: Option<DatasetSplit>,
}

impl TextAttributedGraph {
    /// Builds a graph from dense node texts and an edge list. Undirected
    /// graphs are symmetrized; self-loops and duplicate edges are dropped.
    pub fn new(node_texts: Vec<String>, edges: &[(usize, usize)], directed: bool) -> Result<Self> {
        let csr = Csr::from_edges(node_texts.len(), edges, !directed)?;
        let n = node_texts.len();
        Ok(TextAttributedGraph {
            csr,
            directed,
            node_texts,
            edge_texts: None,
            node_labels: None,
            edge_labels: None,
            graph_label: None,
            original_ids: (0..n as i64).collect(),
            split: None,
        })
    }

    pub(crate) fn from_records(
        nodes: Vec<NodeRecord>,
        edges: Vec<(usize, usize, Option<String>, Option<i64>)>,
        directed: bool,
    ) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.0, e.1)).collect();
        let (csr, origin) = Csr::from_edges_with_origin(nodes.len(), &pairs, !directed)?;
        let edge_texts = edges
            .iter()
            .any(|e| e.2.is_some())
            .then(|| origin.iter().map(|&i| edges[i].2.clone()).collect());
        let edge_labels = edges
            .iter()
            .any(|e| e.3.is_some())
            .then(|| origin.iter().map(|&i| edges[i].3).collect());
        let node_labels = nodes
            .iter()
            .any(|n| n.label.is_some())
            .then(|| nodes.iter().map(|n| n.label).collect());
        let original_ids = nodes.iter().map(|n| n.id).collect();
        let node_texts = nodes.into_iter().map(|n| n.text).collect();
        Ok(TextAttributedGraph {
            csr,
            directed,
            node_texts,
            edge_texts,
            node_labels,
            edge_labels,
            graph_label: None,
            original_ids,
            split: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.csr.n_nodes()
    }

    pub fn csr(&self) -> &Csr {
        &self.csr
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// One-hop neighbors of `v`, sorted ascending.
    pub fn neighbors(&self, v: usize) -> Result<&[usize]> {
        self.check_node(v)?;
        Ok(self.csr.neighbors(v))
    }

    pub fn check_node(&self, v: usize) -> Result<()> {
        if v >= self.n_nodes() {
            return Err(Error::NodeOutOfRange {
                node: v,
                n_nodes: self.n_nodes(),
            });
        }
        Ok(())
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_nodes()).map(|v| self.csr.degree(v)).collect()
    }

    pub fn node_text(&self, v: usize) -> &str {
        &self.node_texts[v]
    }

    pub fn node_texts(&self) -> &[String] {
        &self.node_texts
    }

    pub fn edge_text(&self, u: usize, v: usize) -> Option<&str> {
        let slot = self.csr.slot(u, v)?;
        self.edge_texts.as_ref()?[slot].as_deref()
    }

    pub fn node_labels(&self) -> Option<&[Option<Label>]> {
        self.node_labels.as_deref()
    }

    pub fn edge_labels(&self) -> Option<&[Option<i64>]> {
        self.edge_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<Label> {
        self.graph_label
    }

    pub fn original_ids(&self) -> &[i64] {
        &self.original_ids
    }

    /// Dense index of a node id as it appeared in the source files.
    pub fn dense_id(&self, original: i64) -> Option<usize> {
        self.original_ids.iter().position(|&o| o == original)
    }

    pub fn split(&self) -> Option<&DatasetSplit> {
        self.split.as_ref()
    }

    pub fn set_split(&mut self, split: DatasetSplit) -> Result<()> {
        let universe = match split.level {
            SplitLevel::Node => self.n_nodes(),
            SplitLevel::Edge => self.csr.n_slots(),
            SplitLevel::Graph => {
                return Err(Error::invalid("graph-level splits belong to a collection"))
            }
        };
        self.split = Some(DatasetSplit::new(
            split.level,
            split.train,
            split.val,
            split.test,
            universe,
        )?);
        Ok(())
    }

    pub fn set_node_labels(&mut self, labels: Vec<Option<Label>>) -> Result<()> {
        if labels.len() != self.n_nodes() {
            return Err(Error::invalid("one label slot per node required"));
        }
        self.node_labels = Some(labels);
        Ok(())
    }

    pub fn set_graph_label(&mut self, label: Option<Label>) {
        self.graph_label = label;
    }

    /// Checks every structural invariant of the data model.
    pub fn validate(&self) -> Result<()> {
        self.csr.validate()?;
        let n = self.n_nodes();
        if self.node_texts.len() != n || self.original_ids.len() != n {
            return Err(Error::InvalidGraph("per-node arrays disagree in length".into()));
        }
        if !self.directed && !self.csr.is_symmetric() {
            return Err(Error::InvalidGraph("undirected graph with asymmetric adjacency".into()));
        }
        let slots = self.csr.n_slots();
        if self.edge_texts.as_ref().is_some_and(|t| t.len() != slots)
            || self.edge_labels.as_ref().is_some_and(|t| t.len() != slots)
        {
            return Err(Error::InvalidGraph("edge payloads not aligned to csr slots".into()));
        }
        if self.node_labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::InvalidGraph("node labels not aligned to nodes".into()));
        }
        let mut ids = self.original_ids.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph("duplicate original node ids".into()));
        }
        Ok(())
    }

    /// A short digest of structure and texts, used for provenance records.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        write_binary(self, &mut buf).expect("writing to memory cannot fail");
        let digest = Sha256::digest(&buf);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Graph-level dataset: independent graphs sharing one text convention.
#[derive(Debug, Clone)]
pub struct GraphCollection {
    pub graphs: Vec<TextAttributedGraph>,
    pub graph_ids: Vec<i64>,
    pub vocab: Option<Arc<Vocabulary>>,
}

impl GraphCollection {
    pub fn new(graphs: Vec<TextAttributedGraph>, graph_ids: Vec<i64>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::invalid("graph collection must not be empty"));
        }
        if graphs.len() != graph_ids.len() {
            return Err(Error::invalid("one id per graph required"));
        }
        let directed = graphs[0].directed;
        if graphs.iter().any(|g| g.directed != directed) {
            return Err(Error::invalid("collection mixes directed and undirected graphs"));
        }
        Ok(GraphCollection {
            graphs,
            graph_ids,
            vocab: None,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.graphs
            .iter()
            .flat_map(|g| g.node_texts.iter().map(String::as_str))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> TextAttributedGraph {
        TextAttributedGraph::new(vec!["a".into(), "b".into(), "c".into()], &[(0, 1), (1, 2)], false)
            .unwrap()
    }

    #[test]
    fn neighbors_of_path_middle() {
        let g = path3();
        assert_eq!(g.neighbors(1).unwrap(), &[0, 2]);
        assert_eq!(g.degrees(), vec![1, 2, 1]);
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        let g = TextAttributedGraph::new(vec!["".into(); 3], &[(0, 1)], false).unwrap();
        assert!(g.neighbors(2).unwrap().is_empty());
    }

    #[test]
    fn star_center_lists_leaves_sorted() {
        let g = TextAttributedGraph::new(
            vec![String::new(); 5],
            &[(0, 4), (0, 2), (0, 1), (3, 0)],
            false,
        )
        .unwrap();
        assert_eq!(g.neighbors(0).unwrap(), &[1, 2, 3, 4]);
    }

    #[test]
    fn out_of_range_neighbor_query() {
        assert!(matches!(
            path3().neighbors(3),
            Err(Error::NodeOutOfRange { node: 3, n_nodes: 3 })
        ));
    }

    #[test]
    fn splits_are_disjoint_and_in_range() {
        let s = DatasetSplit::random(SplitLevel::Node, 100, 0.6, 0.2, 3).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s.train.len(), 60);
        assert!(DatasetSplit::new(SplitLevel::Node, vec![1], vec![1], vec![], 5).is_err());
        assert!(DatasetSplit::new(SplitLevel::Node, vec![7], vec![], vec![], 5).is_err());
    }

    #[test]
    fn directed_graph_keeps_orientation() {
        let g = TextAttributedGraph::new(vec![String::new(); 2], &[(0, 1)], true).unwrap();
        assert_eq!(g.neighbors(0).unwrap(), &[1]);
        assert!(g.neighbors(1).unwrap().is_empty());
        g.validate().unwrap();
    }
}
