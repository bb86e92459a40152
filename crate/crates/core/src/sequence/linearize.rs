use rand::seq::SliceRandom;
use rand::Rng;

use super::vocab::{Vocabulary, BOS, O, R, S};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, SubjectGroup};

/// Emission order of a graph: subject groups, and triples within each group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphOrder {
    pub groups: Vec<SubjectGroup>,
}

impl GraphOrder {
    pub fn file_order(graph: &KnowledgeGraph) -> Self {
        GraphOrder {
            groups: graph.subject_groups(),
        }
    }

    /// Random permutation of groups and of triples inside every group.
    pub fn shuffled<G: Rng + ?Sized>(graph: &KnowledgeGraph, rng: &mut G) -> Self {
        let mut groups = graph.subject_groups();
        groups.shuffle(rng);
        for g in &mut groups {
            g.triples.shuffle(rng);
        }
        GraphOrder { groups }
    }

    /// Checks that this is a permutation of `graph`'s groups and triples.
    pub fn validate(&self, graph: &KnowledgeGraph) -> Result<()> {
        let mut seen = vec![false; graph.triples().len()];
        let mut subjects = std::collections::HashSet::new();
        for g in &self.groups {
            if !subjects.insert(g.subject) {
                return Err(Error::Order(format!("subject {} appears twice", g.subject)));
            }
            if g.triples.is_empty() {
                return Err(Error::Order(format!("group for subject {} is empty", g.subject)));
            }
            for &t in &g.triples {
                let triple = graph
                    .triples()
                    .get(t)
                    .ok_or_else(|| Error::Order(format!("triple {t} does not exist")))?;
                if triple.subject != g.subject {
                    return Err(Error::Order(format!("triple {t} is not in subject group {}", g.subject)));
                }
                if std::mem::replace(&mut seen[t], true) {
                    return Err(Error::Order(format!("triple {t} appears twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Order(format!("triple {missing} is missing")));
        }
        Ok(())
    }
}

/// Token range of one subject group: `[S]` at `start`, subject tokens up to
/// `subject_end`, then its triples up to `end` (exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSpan {
    pub subject: usize,
    pub start: usize,
    pub subject_end: usize,
    pub end: usize,
}

/// Token range `[R] relation [O] object` of one emitted triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripleSpan {
    /// Index of the triple in the source graph.
    pub triple: usize,
    /// Index into the stream's group spans.
    pub group: usize,
    pub start: usize,
    pub end: usize,
}

/// The knowledge segment with its entity and triple annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeStream {
    pub tokens: Vec<usize>,
    pub entity_ids: Vec<usize>,
    pub triple_ids: Vec<usize>,
    pub groups: Vec<GroupSpan>,
    pub triples: Vec<TripleSpan>,
}

impl KnowledgeStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Longest prefix within `budget` tokens that ends on a triple boundary.
    /// Trailing triples go first; a group left without triples goes with them.
    /// `[BOS]` is always kept.
    pub fn truncated(&self, budget: usize) -> KnowledgeStream {
        if self.len() <= budget {
            return self.clone();
        }
        let kept = self.triples.iter().take_while(|t| t.end <= budget).count();
        let cut = if kept == 0 { 1 } else { self.triples[kept - 1].end };
        let triples: Vec<TripleSpan> = self.triples[..kept].to_vec();
        let n_groups = triples.last().map_or(0, |t| t.group + 1);
        let mut groups = self.groups[..n_groups].to_vec();
        if let Some(last) = groups.last_mut() {
            last.end = cut;
        }
        KnowledgeStream {
            tokens: self.tokens[..cut].to_vec(),
            entity_ids: self.entity_ids[..cut].to_vec(),
            triple_ids: self.triple_ids[..cut].to_vec(),
            groups,
            triples,
        }
    }
}

/// Flattens `graph` as `[BOS] ([S] subject ([R] relation [O] object)+)*`.
///
/// Entity ids number the groups from 1 and cover everything from a group's
/// `[S]` to its end. Triple ids number emitted triples from 1 and cover the
/// `[R] .. object` span; subject tokens carry triple id 0.
pub fn linearize_graph(
    graph: &KnowledgeGraph,
    order: &GraphOrder,
    vocab: &Vocabulary,
) -> Result<KnowledgeStream> {
    order.validate(graph)?;
    let mut out = KnowledgeStream {
        tokens: vec![BOS],
        entity_ids: vec![0],
        triple_ids: vec![0],
        groups: Vec::with_capacity(order.groups.len()),
        triples: Vec::with_capacity(graph.triples().len()),
    };
    let push = |out: &mut KnowledgeStream, tok: usize, ent: usize, tri: usize| {
        out.tokens.push(tok);
        out.entity_ids.push(ent);
        out.triple_ids.push(tri);
    };

    for (gi, group) in order.groups.iter().enumerate() {
        let entity_id = gi + 1;
        let start = out.len();
        push(&mut out, S, entity_id, 0);
        for tok in vocab.encode(graph.entity_surface(group.subject)) {
            push(&mut out, tok, entity_id, 0);
        }
        let subject_end = out.len();
        for &t in &group.triples {
            let triple_id = out.triples.len() + 1;
            let triple = graph.triples()[t];
            let t_start = out.len();
            push(&mut out, R, entity_id, triple_id);
            for tok in vocab.encode(graph.relation_surface(triple.relation)) {
                push(&mut out, tok, entity_id, triple_id);
            }
            push(&mut out, O, entity_id, triple_id);
            for tok in vocab.encode(graph.entity_surface(triple.object)) {
                push(&mut out, tok, entity_id, triple_id);
            }
            out.triples.push(TripleSpan {
                triple: t,
                group: gi,
                start: t_start,
                end: out.len(),
            });
        }
        out.groups.push(GroupSpan {
            subject: group.subject,
            start,
            subject_end,
            end: out.len(),
        });
    }
    Ok(out)
}
