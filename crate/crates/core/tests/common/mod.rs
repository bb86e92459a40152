#![allow(dead_code)]

use std::sync::Arc;

use kgdialog_core::kg::{DialogueTurn, KnowledgeGraph, Speaker};
use kgdialog_core::mask::KnowledgeColumns;
use kgdialog_core::model::ModelConfig;
use kgdialog_core::pipeline::{Encoded, Pipeline};
use kgdialog_core::sequence::{AssemblyLimits, InputSequence, Vocabulary, SPECIAL_TOKENS};
use rand::seq::SliceRandom;
use rand::Rng;

pub const WORDS: [&str; 41] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "red", "green", "blue", "what", "is", "the", "of", "where", "near", "far", "open",
    "closed", "cheap", "dear", "?",
];

/// 9 specials plus 41 words: 50 tokens.
pub fn small_vocab() -> Vocabulary {
    let tokens = SPECIAL_TOKENS
        .iter()
        .copied()
        .chain(WORDS)
        .map(str::to_string)
        .collect();
    Vocabulary::from_tokens(tokens).unwrap()
}

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        vocab_size,
        max_positions: 96,
        max_entity_ids: 16,
        max_triple_ids: 24,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Random graph over `WORDS` with up to `max_triples` triples.
pub fn random_graph<R: Rng>(rng: &mut R, max_triples: usize) -> KnowledgeGraph {
    let n = rng.gen_range(1..=max_triples);
    let pick = |rng: &mut R| *WORDS[..29].choose(rng).unwrap();
    let triples: Vec<(&str, &str, &str)> = (0..n).map(|_| (pick(rng), pick(rng), pick(rng))).collect();
    KnowledgeGraph::from_surfaces(triples).unwrap()
}

pub fn random_text<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A training-shaped input over a random graph, with one earlier exchange.
pub fn random_encoded<R: Rng>(rng: &mut R, max_triples: usize, mask: bool) -> (Arc<KnowledgeGraph>, Encoded) {
    let graph = Arc::new(random_graph(rng, max_triples));
    let pipeline = Pipeline::new(small_vocab(), AssemblyLimits::default(), mask);
    let history = vec![
        DialogueTurn::new(Speaker::User, &random_text(rng, 1, 3)),
        DialogueTurn::new(Speaker::System, &random_text(rng, 1, 3)),
    ];
    let question = random_text(rng, 2, 5);
    let gold = random_text(rng, 2, 5);
    let ke = rng.gen_range(1..=4);
    let kr = rng.gen_range(1..=3);
    let sel = pipeline.selection(&graph, &question, ke, kr);
    let order = Pipeline::order(&graph, Some(rng.gen()));
    let enc = pipeline
        .encode("rand#0", &graph, &order, &history, &question, Some(&gold), sel)
        .unwrap();
    (graph, enc)
}

/// Columns with every triple of `hidden` masked (subject spans stay visible).
pub fn hide_triples(seq: &InputSequence, hidden: &[usize]) -> KnowledgeColumns {
    let mut cols = KnowledgeColumns::unmasked(seq);
    for &t in hidden {
        let span = seq.triple_spans[t];
        cols.visible[span.start..span.end].fill(false);
        cols.triple_selected[t] = false;
    }
    cols
}
