//! Question-conditioned entity and relation weights, and top-k selection.
//!
//! Relation weights come from one step of row-normalized propagation over an
//! undirected graph whose nodes are the entities and the relation labels:
//! `H = D^-1 (A + I) X`, read off at the relation nodes. `X` holds the cosine
//! similarity between the question and each node surface.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::kg::KnowledgeGraph;
use crate::sequence::{Vocabulary, PAD, UNK};

/// Relevance of an entity surface to a question.
pub trait EntityScorer {
    fn score(&self, question: &str, entity_surface: &str) -> f64;
}

/// Token embedding lookup used for surface similarity.
pub trait Embedder {
    fn dim(&self) -> usize;

    fn token_vector(&self, token: &str) -> &[f64];

    /// Mean of the token vectors; the zero vector for empty text.
    fn mean_embedding(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        let mut count = 0usize;
        for tok in text.split_whitespace() {
            for (a, v) in acc.iter_mut().zip(self.token_vector(tok)) {
                *a += v;
            }
            count += 1;
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        acc
    }
}

/// A vocabulary-indexed embedding matrix. Unknown tokens map to `[UNK]`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    vocab: Vocabulary,
    dim: usize,
    rows: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_rows(vocab: Vocabulary, dim: usize, rows: Vec<f64>) -> Self {
        assert_eq!(rows.len(), vocab.len() * dim, "embedding rows do not match the vocabulary");
        EmbeddingTable { vocab, dim, rows }
    }

    /// Seeded uniform(-1, 1) rows with `[PAD]` and `[UNK]` pinned to zero.
    /// Independent of training, so selections stay fixed for a given seed.
    pub fn frozen_random(vocab: Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<f64> = (0..vocab.len() * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for id in [PAD, UNK] {
            rows[id * dim..(id + 1) * dim].fill(0.0);
        }
        EmbeddingTable { vocab, dim, rows }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
}

impl Embedder for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> &[f64] {
        let id = self.vocab.id(token).unwrap_or(UNK);
        &self.rows[id * self.dim..(id + 1) * self.dim]
    }
}

/// Cosine similarity, 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scores an entity by the cosine between mean question and mean entity
/// embeddings.
pub struct CosineScorer<'a, E: ?Sized> {
    embedder: &'a E,
}

impl<E: Embedder + ?Sized> EntityScorer for CosineScorer<'_, E> {
    fn score(&self, question: &str, entity_surface: &str) -> f64 {
        cosine(
            &self.embedder.mean_embedding(question),
            &self.embedder.mean_embedding(entity_surface),
        )
    }
}

pub fn default_scorer<E: Embedder + ?Sized>(embedder: &E) -> CosineScorer<'_, E> {
    CosineScorer { embedder }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Entity,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Node {
    pub kind: NodeKind,
    /// Entity or relation id in the source graph.
    pub id: usize,
    pub surface: String,
}

/// Undirected entity/relation graph: every triple `(s, r, o)` contributes the
/// edges `s - r` and `r - o`. Nodes are the entities followed by the
/// relation labels, both in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    pub nodes: Vec<Node>,
    pub n_entities: usize,
    /// Dense `d x d` 0/1 adjacency, row-major, zero diagonal.
    pub adjacency: Vec<f64>,
    /// Sorted neighbour lists (same edges as `adjacency`).
    pub neighbors: Vec<Vec<usize>>,
    /// Row sums of `A + I`.
    pub degree: Vec<f64>,
    /// 1 at relation nodes, 0 at entity nodes.
    pub relation_mask: Vec<f64>,
}

impl BipartiteGraph {
    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn adj(&self, u: usize, v: usize) -> f64 {
        self.adjacency[u * self.dim() + v]
    }

    /// Edges as `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }

    pub fn relation_node(&self, relation_id: usize) -> usize {
        self.n_entities + relation_id
    }
}

pub fn build_bipartite(graph: &KnowledgeGraph) -> BipartiteGraph {
    let n_entities = graph.entities().len();
    let nodes: Vec<Node> = graph
        .entities()
        .iter()
        .map(|e| Node {
            kind: NodeKind::Entity,
            id: e.id,
            surface: e.surface.clone(),
        })
        .chain(graph.relations().iter().map(|r| Node {
            kind: NodeKind::Relation,
            id: r.id,
            surface: r.surface.clone(),
        }))
        .collect();
    let d = nodes.len();
    let mut adjacency = vec![0.0; d * d];
    let mut link = |u: usize, v: usize| {
        adjacency[u * d + v] = 1.0;
        adjacency[v * d + u] = 1.0;
    };
    for t in graph.triples() {
        let r = n_entities + t.relation;
        link(t.subject, r);
        link(r, t.object);
    }
    let neighbors: Vec<Vec<usize>> = (0..d)
        .map(|u| (0..d).filter(|&v| adjacency[u * d + v] != 0.0).collect())
        .collect();
    let degree = neighbors.iter().map(|ns| ns.len() as f64 + 1.0).collect();
    let relation_mask = (0..d).map(|u| if u < n_entities { 0.0 } else { 1.0 }).collect();
    BipartiteGraph {
        nodes,
        n_entities,
        adjacency,
        neighbors,
        degree,
        relation_mask,
    }
}

/// Cosine between the mean question embedding and each node surface.
pub fn feature_vector<E: Embedder + ?Sized>(bg: &BipartiteGraph, question: &str, embedder: &E) -> Vec<f64> {
    let q = embedder.mean_embedding(question);
    bg.nodes
        .iter()
        .map(|n| cosine(&q, &embedder.mean_embedding(&n.surface)))
        .collect()
}

/// `D^-1 (A + I) X`.
pub fn propagate(bg: &BipartiteGraph, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), bg.dim(), "feature vector does not match the graph");
    bg.neighbors
        .iter()
        .enumerate()
        .map(|(u, ns)| (x[u] + ns.iter().map(|&v| x[v]).sum::<f64>()) / bg.degree[u])
        .collect()
}

/// Propagated features with entity positions zeroed by the relation mask.
pub fn masked_propagation(bg: &BipartiteGraph, x: &[f64]) -> Vec<f64> {
    propagate(bg, x)
        .into_iter()
        .zip(&bg.relation_mask)
        .map(|(h, m)| h * m)
        .collect()
}

/// Raw relation weights indexed by relation id.
pub fn relation_weights(bg: &BipartiteGraph, x: &[f64]) -> Vec<f64> {
    masked_propagation(bg, x).split_off(bg.n_entities)
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax-normalized weights, indexed by entity / relation id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedGraph {
    pub entity_weights: Vec<f64>,
    pub relation_weights: Vec<f64>,
}

/// Every intermediate of the weight computation, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrace {
    pub bipartite: BipartiteGraph,
    pub features: Vec<f64>,
    pub propagated: Vec<f64>,
    pub entity_scores: Vec<f64>,
    pub relation_raw: Vec<f64>,
    pub weighted: WeightedGraph,
}

pub fn trace_weighted_graph<S, E>(graph: &KnowledgeGraph, question: &str, scorer: &S, embedder: &E) -> WeightTrace
where
    S: EntityScorer + ?Sized,
    E: Embedder + ?Sized,
{
    let bipartite = build_bipartite(graph);
    let features = feature_vector(&bipartite, question, embedder);
    let propagated = propagate(&bipartite, &features);
    let relation_raw = relation_weights(&bipartite, &features);
    let entity_scores: Vec<f64> = graph
        .entities()
        .iter()
        .map(|e| scorer.score(question, &e.surface))
        .collect();
    let weighted = WeightedGraph {
        entity_weights: softmax(&entity_scores),
        relation_weights: softmax(&relation_raw),
    };
    WeightTrace {
        bipartite,
        features,
        propagated,
        entity_scores,
        relation_raw,
        weighted,
    }
}

pub fn compute_weighted_graph<S, E>(graph: &KnowledgeGraph, question: &str, scorer: &S, embedder: &E) -> WeightedGraph
where
    S: EntityScorer + ?Sized,
    E: Embedder + ?Sized,
{
    trace_weighted_graph(graph, question, scorer, embedder).weighted
}

/// Top-k entity and relation ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Selection {
    pub entities: BTreeSet<usize>,
    pub relations: BTreeSet<usize>,
    pub k_entity: usize,
    pub k_relation: usize,
}

impl Selection {
    /// Selects everything in `graph`.
    pub fn all(graph: &KnowledgeGraph) -> Self {
        Selection {
            entities: (0..graph.entities().len()).collect(),
            relations: (0..graph.relations().len()).collect(),
            k_entity: graph.entities().len(),
            k_relation: graph.relations().len(),
        }
    }
}

/// Indices of the `k` largest weights; ties go to the lower index.
pub fn rank_top(weights: &[f64], k: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.into_iter().take(k).collect()
}

pub fn select_topk(wg: &WeightedGraph, k_entity: usize, k_relation: usize) -> Selection {
    Selection {
        entities: rank_top(&wg.entity_weights, k_entity),
        relations: rank_top(&wg.relation_weights, k_relation),
        k_entity,
        k_relation,
    }
}
