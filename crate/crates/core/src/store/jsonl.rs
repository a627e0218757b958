use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Number;

use super::{
    DatasetSplit, GraphCollection, Label, NodeRecord, SplitLevel, TextAttributedGraph,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Keep edge direction instead of symmetrizing.
    pub directed: bool,
    /// Random node split `(train_frac, val_frac, seed)` attached after loading.
    pub node_split: Option<(f64, f64, u64)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: i64,
    text: String,
    #[serde(default)]
    label: Option<Number>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    src: i64,
    dst: i64,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    label: Option<i64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    graph_id: i64,
    nodes: Vec<RawNode>,
    edges: Vec<RawEdge>,
    #[serde(default)]
    label: Option<Number>,
}

fn number_label(n: Number) -> Label {
    match n.as_i64() {
        Some(i) => Label::Class(i),
        None => Label::Real(n.as_f64().unwrap_or(f64::NAN)),
    }
}

fn parse_lines<T: for<'de> Deserialize<'de>>(src: &str) -> Result<Vec<(usize, T)>> {
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|r| (i + 1, r))
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

fn assemble(
    nodes: Vec<(usize, RawNode)>,
    edges: Vec<(usize, RawEdge)>,
    directed: bool,
) -> Result<TextAttributedGraph> {
    let mut index = HashMap::with_capacity(nodes.len());
    let mut records = Vec::with_capacity(nodes.len());
    for (line, n) in nodes {
        if index.insert(n.id, records.len()).is_some() {
            return Err(Error::DuplicateNode { line, id: n.id });
        }
        records.push(NodeRecord {
            id: n.id,
            text: n.text,
            label: n.label.map(number_label),
        });
    }
    let mut dense = Vec::with_capacity(edges.len());
    for (line, e) in edges {
        let lookup = |id: i64| {
            index
                .get(&id)
                .copied()
                .ok_or(Error::DanglingEndpoint { line, id })
        };
        dense.push((lookup(e.src)?, lookup(e.dst)?, e.text, e.label));
    }
    let g = TextAttributedGraph::from_records(records, dense, directed)?;
    g.validate()?;
    Ok(g)
}

/// Parses node and edge JSON Lines held in memory.
pub fn parse_jsonl(nodes: &str, edges: &str, options: &IngestOptions) -> Result<TextAttributedGraph> {
    let mut g = assemble(parse_lines(nodes)?, parse_lines(edges)?, options.directed)?;
    if let Some((train, val, seed)) = options.node_split {
        let split = DatasetSplit::random(SplitLevel::Node, g.n_nodes(), train, val, seed)?;
        g.set_split(split)?;
    }
    Ok(g)
}

pub fn load_jsonl(
    nodes_path: impl AsRef<Path>,
    edges_path: impl AsRef<Path>,
    options: &IngestOptions,
) -> Result<TextAttributedGraph> {
    let nodes = fs::read_to_string(nodes_path)?;
    let edges = fs::read_to_string(edges_path)?;
    parse_jsonl(&nodes, &edges, options)
}

/// Parses a graph-collection file: one graph object per line.
pub fn parse_collection(src: &str, options: &IngestOptions) -> Result<GraphCollection> {
    let mut graphs = Vec::new();
    let mut ids = Vec::new();
    for (line, raw) in parse_lines::<RawGraph>(src)? {
        let nodes = raw.nodes.into_iter().map(|n| (line, n)).collect();
        let edges = raw.edges.into_iter().map(|e| (line, e)).collect();
        let mut g = assemble(nodes, edges, options.directed)?;
        g.set_graph_label(raw.label.map(number_label));
        if g.n_nodes() == 0 {
            return Err(Error::Parse {
                line,
                message: "graph has no nodes".into(),
            });
        }
        graphs.push(g);
        ids.push(raw.graph_id);
    }
    GraphCollection::new(graphs, ids)
}

pub fn load_collection_jsonl(path: impl AsRef<Path>, options: &IngestOptions) -> Result<GraphCollection> {
    parse_collection(&fs::read_to_string(path)?, options)
}
