//! Turns a dialogue context into a model input plus its knowledge mask.
//! Shared by training, evaluation, inspection and chat.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use serde::Serialize;

use crate::graph_weight::{
    compute_weighted_graph, default_scorer, select_topk, trace_weighted_graph, EmbeddingTable, NodeKind, Selection,
    WeightedGraph,
};
use crate::kg::{DialogueTurn, KnowledgeGraph};
use crate::mask::{knowledge_column_mask, KnowledgeColumns};
use crate::sequence::{assemble_input, linearize_graph, AssemblyLimits, GraphOrder, InputSequence, Vocabulary};

/// Width of the frozen embedding table used for question/surface similarity.
pub const SCORER_DIM: usize = 64;
/// Seed of that table. Fixed so that selections only depend on the vocabulary.
pub const SCORER_SEED: u64 = 0x5eed;

/// Stable 64-bit FNV-1a hash, used to derive per-sample seeds.
pub fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Mixes several words into one seed (splitmix64 finalizer per step).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpNode {
    pub index: usize,
    pub kind: NodeKind,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedRelation {
    pub relation: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripleFlag {
    pub index: usize,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskSummary {
    pub triples: Vec<TripleFlag>,
    pub masked_positions: usize,
    pub fallback: bool,
}

/// Every intermediate of the weight computation for one question. Field
/// order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphDump {
    pub question: String,
    pub k_entity: usize,
    pub k_relation: usize,
    pub nodes: Vec<DumpNode>,
    /// Undirected edges `[u, v]` with `u < v`.
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<f64>,
    pub propagated: Vec<f64>,
    pub entity_weights: Vec<f64>,
    pub relation_weights: Vec<f64>,
    /// Relations by descending weight.
    pub relation_ranking: Vec<RankedRelation>,
    pub selected_entities: Vec<String>,
    pub selected_relations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSummary>,
}

/// An encoded context ready for the model.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub seq: InputSequence,
    pub columns: KnowledgeColumns,
    pub selection: Selection,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub vocab: Vocabulary,
    pub limits: AssemblyLimits,
    pub use_kg_mask: bool,
    embedder: EmbeddingTable,
}

impl Pipeline {
    pub fn new(vocab: Vocabulary, limits: AssemblyLimits, use_kg_mask: bool) -> Self {
        let embedder = EmbeddingTable::frozen_random(vocab.clone(), SCORER_DIM, SCORER_SEED);
        Pipeline {
            vocab,
            limits,
            use_kg_mask,
            embedder,
        }
    }

    pub fn embedder(&self) -> &EmbeddingTable {
        &self.embedder
    }

    pub fn weighted_graph(&self, graph: &KnowledgeGraph, question: &str) -> WeightedGraph {
        compute_weighted_graph(graph, question, &default_scorer(&self.embedder), &self.embedder)
    }

    pub fn selection(&self, graph: &KnowledgeGraph, question: &str, k_entity: usize, k_relation: usize) -> Selection {
        select_topk(&self.weighted_graph(graph, question), k_entity, k_relation)
    }

    pub fn dump(
        &self,
        graph: &KnowledgeGraph,
        question: &str,
        k_entity: usize,
        k_relation: usize,
        with_mask: bool,
    ) -> Result<GraphDump> {
        let trace = trace_weighted_graph(graph, question, &default_scorer(&self.embedder), &self.embedder);
        let sel = select_topk(&trace.weighted, k_entity, k_relation);
        let rel_w = &trace.weighted.relation_weights;
        let mut ranking: Vec<usize> = (0..rel_w.len()).collect();
        ranking.sort_by(|&a, &b| rel_w[b].total_cmp(&rel_w[a]).then(a.cmp(&b)));
        let mask = if with_mask {
            let enc = self.encode("inspect", graph, &Self::order(graph, None), &[], question, None, sel.clone())?;
            let triples = enc
                .seq
                .triple_spans
                .iter()
                .zip(&enc.columns.triple_selected)
                .map(|(span, &selected)| {
                    let (s, r, o) = graph.surface_triple(span.triple);
                    TripleFlag {
                        index: span.triple,
                        subject: s.to_string(),
                        relation: r.to_string(),
                        object: o.to_string(),
                        selected,
                    }
                })
                .collect();
            Some(MaskSummary {
                triples,
                masked_positions: enc.columns.masked_count(),
                fallback: enc.columns.fallback,
            })
        } else {
            None
        };
        Ok(GraphDump {
            question: question.to_string(),
            k_entity,
            k_relation,
            nodes: trace
                .bipartite
                .nodes
                .iter()
                .enumerate()
                .map(|(index, n)| DumpNode {
                    index,
                    kind: n.kind,
                    surface: n.surface.clone(),
                })
                .collect(),
            edges: trace.bipartite.edges().into_iter().map(|(u, v)| [u, v]).collect(),
            features: trace.features,
            propagated: trace.propagated,
            entity_weights: trace.weighted.entity_weights.clone(),
            relation_weights: rel_w.clone(),
            relation_ranking: ranking
                .into_iter()
                .map(|i| RankedRelation {
                    relation: graph.relation_surface(i).to_string(),
                    weight: rel_w[i],
                })
                .collect(),
            selected_entities: sel.entities.iter().map(|&i| graph.entity_surface(i).to_string()).collect(),
            selected_relations: sel.relations.iter().map(|&i| graph.relation_surface(i).to_string()).collect(),
            mask,
        })
    }

    /// Graph order for training: file order when `shuffle_seed` is `None`.
    pub fn order(graph: &KnowledgeGraph, shuffle_seed: Option<u64>) -> GraphOrder {
        match shuffle_seed {
            Some(seed) => GraphOrder::shuffled(graph, &mut ChaCha8Rng::seed_from_u64(seed)),
            None => GraphOrder::file_order(graph),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        sample_id: &str,
        graph: &KnowledgeGraph,
        order: &GraphOrder,
        history: &[DialogueTurn],
        question: &str,
        gold_response: Option<&str>,
        selection: Selection,
    ) -> Result<Encoded> {
        let knowledge = linearize_graph(graph, order, &self.vocab)?;
        let seq = assemble_input(sample_id, &knowledge, history, question, gold_response, &self.vocab, &self.limits)?;
        let columns = if self.use_kg_mask {
            knowledge_column_mask(&seq, &selection, graph)
        } else {
            KnowledgeColumns::unmasked(&seq)
        };
        Ok(Encoded { seq, columns, selection })
    }
}
