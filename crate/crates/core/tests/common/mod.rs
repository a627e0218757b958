#![allow(dead_code)]

use std::sync::Arc;

use sstag::models::ModelConfig;
use sstag::store::{default_word_pools, make_synthetic_tag, SyntheticSpec, TextAttributedGraph};
use sstag::text::Vocabulary;
use sstag::training::TrainConfig;

/// Two planted clusters, 200 nodes. Peaked word distributions with 15%
/// cross-cluster noise.
pub fn two_cluster_spec() -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(200, 2, 0.06, 0.004);
    spec.pools = default_word_pools(2, 8);
    spec.zipf_exponent = 2.5;
    spec.text_noise = 0.15;
    spec.words_per_node = (4, 8);
    spec
}

pub fn two_cluster_graph() -> (TextAttributedGraph, Arc<Vocabulary>) {
    let g = make_synthetic_tag(&two_cluster_spec(), 0).unwrap();
    let vocab = Vocabulary::build(g.node_texts().iter().map(String::as_str), 1).unwrap();
    (g, Arc::new(vocab))
}

/// Eight anchors with four-node rings keep a step around 50 ms.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        budgets: vec![4, 4],
        ..TrainConfig::default()
    }
}

pub fn tiny_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        max_len: 16,
        ppr_width: 4,
        n_anchors: 4,
        ..ModelConfig::desk(vocab_size)
    }
}

/// Five nodes, eleven distinct words: a vocabulary of 16 with the reserved ids.
pub fn toy_graph() -> (TextAttributedGraph, Vocabulary) {
    let texts = [
        "alpha beta gamma",
        "beta delta epsilon zeta",
        "eta theta alpha",
        "iota kappa lambda beta",
        "gamma eta kappa",
    ];
    let g = TextAttributedGraph::new(
        texts.iter().map(|s| s.to_string()).collect(),
        &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)],
        false,
    )
    .unwrap();
    let vocab = Vocabulary::build(texts, 1).unwrap();
    assert_eq!(vocab.len(), 16);
    (g, vocab)
}
