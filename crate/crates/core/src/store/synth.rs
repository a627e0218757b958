use rand::Rng;

use super::{DatasetSplit, Label, SplitLevel, TextAttributedGraph};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of a planted-partition text-attributed graph.
///
/// Nodes are assigned to clusters in contiguous, equally sized blocks. Each
/// pair of nodes is linked independently with `p_intra` inside a cluster and
/// `p_inter` across clusters. Node text is a bag of words drawn from the
/// node's cluster pool (Zipf-weighted by pool rank); with probability
/// `text_noise` an individual word comes from a uniformly chosen other pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub n_clusters: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub pools: Vec<Vec<String>>,
    pub words_per_node: (usize, usize),
    pub zipf_exponent: f64,
    pub text_noise: f64,
    /// Node split fractions `(train, val)`; the remainder is test.
    pub split: (f64, f64),
}

impl SyntheticSpec {
    pub fn new(n_nodes: usize, n_clusters: usize, p_intra: f64, p_inter: f64) -> Self {
        SyntheticSpec {
            n_nodes,
            n_clusters,
            p_intra,
            p_inter,
            pools: default_word_pools(n_clusters, 12),
            words_per_node: (6, 12),
            zipf_exponent: 1.0,
            text_noise: 0.0,
            split: (0.6, 0.2),
        }
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_intra) || !prob(self.p_inter) || !prob(self.text_noise) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_nodes.max(1) {
            return Err(Error::invalid("need 1 <= n_clusters <= n_nodes"));
        }
        if self.pools.len() != self.n_clusters || self.pools.iter().any(Vec::is_empty) {
            return Err(Error::invalid("one non-empty word pool per cluster required"));
        }
        if self.words_per_node.0 > self.words_per_node.1 {
            return Err(Error::invalid("words_per_node range is inverted"));
        }
        if self.text_noise > 0.0 && self.n_clusters < 2 {
            return Err(Error::invalid("text noise needs a second cluster"));
        }
        Ok(())
    }

    pub fn cluster_of(&self, v: usize) -> usize {
        v * self.n_clusters / self.n_nodes
    }
}

/// Distinct pronounceable pseudo-words, `pool_size` per cluster, disjoint
/// across clusters.
pub fn default_word_pools(n_clusters: usize, pool_size: usize) -> Vec<Vec<String>> {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let syllable = |i: usize| format!("{}{}", ONSETS[i % 12], VOWELS[(i / 12) % 5]);
    (0..n_clusters)
        .map(|c| {
            (0..pool_size)
                .map(|j| {
                    let idx = c * pool_size + j;
                    format!("{}{}{}", syllable(idx % 60), syllable(idx / 60 + 7), syllable(c + 31))
                })
                .collect()
        })
        .collect()
}

fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect()
}

/// Deterministic for a fixed `(spec, seed)`. Node labels are cluster ids and a
/// node split is attached.
pub fn make_synthetic_tag(spec: &SyntheticSpec, seed: u64) -> Result<TextAttributedGraph> {
    spec.validate()?;
    let n = spec.n_nodes;
    let mut edge_rng = rng::stream(seed, &[rng::purpose::SYNTH, 0]);
    let mut edges = Vec::new();
    for u in 0..n {
        let cu = spec.cluster_of(u);
        for v in u + 1..n {
            let p = if spec.cluster_of(v) == cu {
                spec.p_intra
            } else {
                spec.p_inter
            };
            if edge_rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let cdfs: Vec<Vec<f64>> = spec
        .pools
        .iter()
        .map(|p| zipf_cdf(p.len(), spec.zipf_exponent))
        .collect();
    let mut text_rng = rng::stream(seed, &[rng::purpose::SYNTH, 1]);
    let texts = (0..n)
        .map(|v| {
            let own = spec.cluster_of(v);
            let len = text_rng.gen_range(spec.words_per_node.0..=spec.words_per_node.1);
            (0..len)
                .map(|_| {
                    let mut c = own;
                    if spec.text_noise > 0.0 && text_rng.gen::<f64>() < spec.text_noise {
                        c = (own + text_rng.gen_range(1..spec.n_clusters)) % spec.n_clusters;
                    }
                    let u: f64 = text_rng.gen();
                    let k = cdfs[c].partition_point(|&x| x < u).min(spec.pools[c].len() - 1);
                    spec.pools[c][k].as_str()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();

    let mut g = TextAttributedGraph::new(texts, &edges, false)?;
    g.set_node_labels(
        (0..n)
            .map(|v| Some(Label::Class(spec.cluster_of(v) as i64)))
            .collect(),
    )?;
    let split = DatasetSplit::random(SplitLevel::Node, n, spec.split.0, spec.split.1, seed)?;
    g.set_split(split)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Newman modularity of a partition, computed directly from the definition.
    fn modularity(g: &TextAttributedGraph, community: impl Fn(usize) -> usize) -> f64 {
        let n = g.n_nodes();
        let deg = g.degrees();
        let two_m: f64 = deg.iter().sum::<usize>() as f64;
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                if community(i) != community(j) {
                    continue;
                }
                let a = g.csr().has_edge(i, j) as u8 as f64;
                q += a - (deg[i] * deg[j]) as f64 / two_m;
            }
        }
        q / two_m
    }

    #[test]
    fn two_cliques_with_disjoint_vocabularies() {
        let spec = SyntheticSpec::new(10, 2, 1.0, 0.0);
        let g = make_synthetic_tag(&spec, 1).unwrap();
        for v in 0..10 {
            assert_eq!(g.csr().degree(v), 4);
            for &u in g.neighbors(v).unwrap() {
                assert_eq!(spec.cluster_of(u), spec.cluster_of(v));
            }
        }
        let words = |c: usize| -> HashSet<String> {
            (0..10)
                .filter(|&v| spec.cluster_of(v) == c)
                .flat_map(|v| g.node_text(v).split(' ').map(String::from).collect::<Vec<_>>())
                .collect()
        };
        assert!(words(0).is_disjoint(&words(1)));
    }

    #[test]
    fn same_seed_same_graph() {
        let spec = SyntheticSpec::new(60, 3, 0.2, 0.01);
        assert_eq!(
            make_synthetic_tag(&spec, 9).unwrap(),
            make_synthetic_tag(&spec, 9).unwrap()
        );
        assert_ne!(
            make_synthetic_tag(&spec, 9).unwrap(),
            make_synthetic_tag(&spec, 10).unwrap()
        );
    }

    #[test]
    fn planted_partition_has_high_modularity() {
        let spec = SyntheticSpec::new(200, 4, 0.15, 0.01);
        let g = make_synthetic_tag(&spec, 3).unwrap();
        let q = modularity(&g, |v| spec.cluster_of(v));
        assert!(q > 0.3, "modularity {q}");
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let spec = SyntheticSpec::new(10, 2, 1.5, 0.0);
        assert!(make_synthetic_tag(&spec, 0).is_err());
    }

    #[test]
    fn default_pools_are_distinct() {
        let pools = default_word_pools(4, 30);
        let all: HashSet<&String> = pools.iter().flatten().collect();
        assert_eq!(all.len(), 120);
    }
}
