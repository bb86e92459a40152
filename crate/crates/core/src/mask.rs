//! Knowledge attention mask and its composition with the causal and padding
//! masks into one additive `n x n` mask.

use crate::graph_weight::Selection;
use crate::kg::KnowledgeGraph;
use crate::sequence::InputSequence;

/// Additive value standing in for minus infinity. Large enough that
/// `exp(score + MASKED - max)` underflows to exactly zero in `f32`.
pub const MASKED: f64 = -1e9;

/// Per-key visibility over the knowledge segment `0..=knowledge_end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeColumns {
    pub visible: Vec<bool>,
    /// Rule outcome for every retained triple, in emission order.
    pub triple_selected: Vec<bool>,
    /// The rule hid every triple, so the whole segment was left visible.
    pub fallback: bool,
}

impl KnowledgeColumns {
    /// No knowledge masking at all.
    pub fn unmasked(seq: &InputSequence) -> Self {
        KnowledgeColumns {
            visible: vec![true; seq.knowledge_end + 1],
            triple_selected: vec![true; seq.triple_spans.len()],
            fallback: false,
        }
    }

    pub fn value(&self, position: usize) -> f64 {
        if self.visible[position] {
            0.0
        } else {
            MASKED
        }
    }

    pub fn masked_count(&self) -> usize {
        self.visible.iter().filter(|v| !**v).count()
    }
}

/// A triple stays visible iff `(s in E or o in E) and r in R`. Subject tokens
/// stay visible iff some triple of their group does. `[BOS]` and `[SEP]`
/// are always visible. If no triple survives, nothing is masked.
pub fn knowledge_column_mask(seq: &InputSequence, sel: &Selection, graph: &KnowledgeGraph) -> KnowledgeColumns {
    let triple_selected: Vec<bool> = seq
        .triple_spans
        .iter()
        .map(|span| {
            let t = graph.triples()[span.triple];
            (sel.entities.contains(&t.subject) || sel.entities.contains(&t.object))
                && sel.relations.contains(&t.relation)
        })
        .collect();

    if !triple_selected.is_empty() && !triple_selected.contains(&true) {
        return KnowledgeColumns {
            triple_selected,
            fallback: true,
            ..KnowledgeColumns::unmasked(seq)
        };
    }

    let mut visible = vec![true; seq.knowledge_end + 1];
    let mut group_visible = vec![false; seq.group_spans.len()];
    for (span, &keep) in seq.triple_spans.iter().zip(&triple_selected) {
        group_visible[span.group] |= keep;
        if !keep {
            visible[span.start..span.end].fill(false);
        }
    }
    for (group, &keep) in seq.group_spans.iter().zip(&group_visible) {
        if !keep {
            visible[group.start..group.subject_end].fill(false);
        }
    }
    KnowledgeColumns {
        visible,
        triple_selected,
        fallback: false,
    }
}

/// Row-major `n x n` visibility; `value` gives the additive form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        self.visible[query * self.n + key]
    }

    pub fn value(&self, query: usize, key: usize) -> f64 {
        if self.is_visible(query, key) {
            0.0
        } else {
            MASKED
        }
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.visible[query * self.n..(query + 1) * self.n]
    }

    /// Dense additive matrix.
    pub fn to_additive(&self) -> Vec<f64> {
        self.visible.iter().map(|&v| if v { 0.0 } else { MASKED }).collect()
    }
}

/// Causal mask intersected with the knowledge key columns, padded with
/// `pad_len` extra positions. Padded keys are hidden from every row; padded
/// rows see only position 0 so no row is entirely masked.
pub fn compose_mask(seq: &InputSequence, cols: &KnowledgeColumns, pad_len: usize) -> AttentionMask {
    let len = seq.len();
    let n = len + pad_len;
    let mut visible = vec![false; n * n];
    for i in 0..len {
        let row = &mut visible[i * n..(i + 1) * n];
        for (j, cell) in row.iter_mut().enumerate().take(i + 1) {
            *cell = cols.visible.get(j).copied().unwrap_or(true);
        }
    }
    for i in len..n {
        visible[i * n] = true;
    }
    AttentionMask { n, visible }
}
