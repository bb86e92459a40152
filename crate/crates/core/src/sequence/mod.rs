//! Vocabulary, graph linearization and assembly of the five aligned input
//! streams (token, position, entity, triple, type).

mod linearize;
mod vocab;

use serde::{Deserialize, Serialize};

pub use linearize::{linearize_graph, GraphOrder, GroupSpan, KnowledgeStream, TripleSpan};
pub use vocab::{Vocabulary, BOS, EOS, O, PAD, Q, R, S, SEP, SPECIAL_TOKENS, UNK};

use crate::error::{Error, Result};
use crate::kg::{DialogueTurn, Speaker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenType {
    Kg = 0,
    User = 1,
    System = 2,
}

impl From<Speaker> for TokenType {
    fn from(s: Speaker) -> Self {
        match s {
            Speaker::User => TokenType::User,
            Speaker::System => TokenType::System,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyLimits {
    pub max_knowledge_tokens: usize,
    pub max_history_tokens: usize,
    pub max_history_turns: usize,
    pub context_limit: usize,
}

impl Default for AssemblyLimits {
    fn default() -> Self {
        AssemblyLimits {
            max_knowledge_tokens: 384,
            max_history_tokens: 128,
            max_history_turns: 4,
            context_limit: 1024,
        }
    }
}

/// One model input: five equal-length index streams plus segment markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub sample_id: String,
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub entity_ids: Vec<usize>,
    pub triple_ids: Vec<usize>,
    pub type_ids: Vec<usize>,
    /// Index of `[SEP]`.
    pub knowledge_end: usize,
    /// First question token (right after `[Q]`).
    pub question_start: usize,
    /// First response token; equals `len()` for a generation context.
    pub response_start: usize,
    /// Retained triples in emission order; span `i` carries triple id `i + 1`.
    pub triple_spans: Vec<TripleSpan>,
    pub group_spans: Vec<GroupSpan>,
    /// History turns that did not fit `max_history_turns`.
    pub evicted_turns: usize,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn response_len(&self) -> usize {
        self.len() - self.response_start
    }

    /// Appends a generated response token.
    pub fn push_response_token(&mut self, token: usize) {
        let pos = self.len();
        self.token_ids.push(token);
        self.position_ids.push(pos);
        self.entity_ids.push(0);
        self.triple_ids.push(0);
        self.type_ids.push(TokenType::System as usize);
    }

    pub fn response_tokens(&self) -> &[usize] {
        &self.token_ids[self.response_start..]
    }

    /// Token span of the `i`-th retained triple.
    pub fn triple_tokens(&self, i: usize) -> &[usize] {
        let span = self.triple_spans[i];
        &self.token_ids[span.start..span.end]
    }
}

/// Lays out `knowledge [SEP] history [Q] question [response [EOS]]`.
///
/// Knowledge is cut to `max_knowledge_tokens` on triple boundaries. History
/// keeps the newest `max_history_turns` turns and then drops its oldest
/// tokens until it fits `max_history_tokens`.
pub fn assemble_input(
    sample_id: &str,
    knowledge: &KnowledgeStream,
    history: &[DialogueTurn],
    question: &str,
    gold_response: Option<&str>,
    vocab: &Vocabulary,
    limits: &AssemblyLimits,
) -> Result<InputSequence> {
    let knowledge = knowledge.truncated(limits.max_knowledge_tokens);
    let mut token_ids = knowledge.tokens.clone();
    let mut entity_ids = knowledge.entity_ids.clone();
    let mut triple_ids = knowledge.triple_ids.clone();
    let mut type_ids = vec![TokenType::Kg as usize; token_ids.len()];

    let knowledge_end = token_ids.len();
    token_ids.push(SEP);
    type_ids.push(TokenType::Kg as usize);

    let kept_from = history.len().saturating_sub(limits.max_history_turns);
    let mut hist: Vec<(usize, usize)> = history[kept_from..]
        .iter()
        .flat_map(|turn| {
            let ty = TokenType::from(turn.speaker) as usize;
            vocab.encode(&turn.text).into_iter().map(move |t| (t, ty))
        })
        .collect();
    if hist.len() > limits.max_history_tokens {
        hist.drain(..hist.len() - limits.max_history_tokens);
    }
    for (tok, ty) in hist {
        token_ids.push(tok);
        type_ids.push(ty);
    }

    token_ids.push(Q);
    type_ids.push(TokenType::User as usize);
    let question_start = token_ids.len();
    for tok in vocab.encode(question) {
        token_ids.push(tok);
        type_ids.push(TokenType::User as usize);
    }

    let response_start = token_ids.len();
    if let Some(gold) = gold_response {
        for tok in vocab.encode(gold) {
            token_ids.push(tok);
            type_ids.push(TokenType::System as usize);
        }
        token_ids.push(EOS);
        type_ids.push(TokenType::System as usize);
    }

    let n = token_ids.len();
    if n > limits.context_limit {
        return Err(Error::SequenceTooLong {
            sample_id: sample_id.to_string(),
            len: n,
            limit: limits.context_limit,
        });
    }
    entity_ids.resize(n, 0);
    triple_ids.resize(n, 0);

    Ok(InputSequence {
        sample_id: sample_id.to_string(),
        token_ids,
        position_ids: (0..n).collect(),
        entity_ids,
        triple_ids,
        type_ids,
        knowledge_end,
        question_start,
        response_start,
        triple_spans: knowledge.triples,
        group_spans: knowledge.groups,
        evicted_turns: kept_from,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::KnowledgeGraph;

    fn vocab_for(words: &str) -> Vocabulary {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in words.split_whitespace() {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Vocabulary::from_tokens(tokens).unwrap()
    }

    fn starbucks() -> (KnowledgeGraph, Vocabulary) {
        let g = KnowledgeGraph::from_surfaces([
            ("starbucks", "distance", "4 miles"),
            ("starbucks", "address", "792 bedoin st"),
        ])
        .unwrap();
        let v = vocab_for("starbucks distance 4 miles address 792 bedoin st where is ? it away");
        (g, v)
    }

    fn decode_all(v: &Vocabulary, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| v.token(i).to_string()).collect()
    }

    #[test]
    fn starbucks_layout() {
        let (g, v) = starbucks();
        let ks = linearize_graph(&g, &GraphOrder::file_order(&g), &v).unwrap();
        assert_eq!(
            decode_all(&v, &ks.tokens).join(" "),
            "[BOS] [S] starbucks [R] distance [O] 4 miles [R] address [O] 792 bedoin st"
        );
        assert_eq!(ks.entity_ids[0], 0);
        assert!(ks.entity_ids[1..].iter().all(|&e| e == 1));
        assert_eq!(ks.triple_ids, [0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2]);
        assert_eq!(v.decode(&ks.tokens[ks.triples[0].start..ks.triples[0].end]), "distance 4 miles");
    }

    #[test]
    fn single_triple() {
        let g = KnowledgeGraph::from_surfaces([("a", "r", "b")]).unwrap();
        let v = vocab_for("a r b");
        let ks = linearize_graph(&g, &GraphOrder::file_order(&g), &v).unwrap();
        for special in [S, R, O] {
            assert_eq!(ks.tokens.iter().filter(|&&t| t == special).count(), 1);
        }
    }

    #[test]
    fn empty_graph_is_bos_only() {
        let g = KnowledgeGraph::default();
        let ks = linearize_graph(&g, &GraphOrder::file_order(&g), &vocab_for("")).unwrap();
        assert_eq!(ks.tokens, vec![BOS]);
    }

    #[test]
    fn invalid_order_is_rejected() {
        let (g, v) = starbucks();
        let mut order = GraphOrder::file_order(&g);
        order.groups[0].triples.pop();
        assert!(linearize_graph(&g, &order, &v).is_err());
        order.groups[0].triples = vec![0, 0];
        assert!(linearize_graph(&g, &order, &v).is_err());
    }

    #[test]
    fn empty_history_puts_q_after_sep() {
        let (g, v) = starbucks();
        let ks = linearize_graph(&g, &GraphOrder::file_order(&g), &v).unwrap();
        let seq = assemble_input("s", &ks, &[], "where is starbucks ?", Some("it is 4 miles away"), &v, &AssemblyLimits::default()).unwrap();
        assert_eq!(seq.token_ids[seq.knowledge_end], SEP);
        assert_eq!(seq.token_ids[seq.knowledge_end + 1], Q);
        assert_eq!(seq.question_start, seq.knowledge_end + 2);
        assert_eq!(*seq.token_ids.last().unwrap(), EOS);
        assert_eq!(v.decode(seq.response_tokens()), "it is 4 miles away");
        assert!(seq.type_ids[..=seq.knowledge_end].iter().all(|&t| t == 0));
        assert!(seq.type_ids[seq.response_start..].iter().all(|&t| t == 2));
        assert_eq!(seq.type_ids[seq.question_start - 1], 1);
    }

    #[test]
    fn oldest_turn_dropped_past_turn_limit() {
        let (g, v) = starbucks();
        let ks = linearize_graph(&g, &GraphOrder::file_order(&g), &v).unwrap();
        let words = ["st", "where", "is", "it", "away"];
        let history: Vec<DialogueTurn> = words
            .iter()
            .enumerate()
            .map(|(i, w)| DialogueTurn::new(if i % 2 == 0 { Speaker::User } else { Speaker::System }, w))
            .collect();
        let seq = assemble_input("s", &ks, &history, "where", None, &v, &AssemblyLimits::default()).unwrap();
        let hist = &seq.token_ids[seq.knowledge_end + 1..seq.question_start - 1];
        assert_eq!(v.decode(hist), "where is it away");
        assert_eq!(seq.evicted_turns, 1);
        assert_eq!(seq.type_ids[seq.knowledge_end + 1], TokenType::System as usize);
    }

    #[test]
    fn history_token_budget_trims_oldest_tokens() {
        let (g, v) = starbucks();
        let ks = linearize_graph(&g, &GraphOrder::file_order(&g), &v).unwrap();
        let history = vec![
            DialogueTurn::new(Speaker::User, "where is starbucks"),
            DialogueTurn::new(Speaker::System, "it is away"),
        ];
        let limits = AssemblyLimits {
            max_history_tokens: 4,
            ..AssemblyLimits::default()
        };
        let seq = assemble_input("s", &ks, &history, "where", None, &v, &limits).unwrap();
        let hist = &seq.token_ids[seq.knowledge_end + 1..seq.question_start - 1];
        assert_eq!(v.decode(hist), "starbucks it is away");
    }

    #[test]
    fn knowledge_budget_drops_whole_triples() {
        let g = KnowledgeGraph::from_surfaces([("a", "r", "x"), ("a", "r2", "y"), ("b", "r", "z")]).unwrap();
        let v = vocab_for("a r x r2 y b z");
        let ks = linearize_graph(&g, &GraphOrder::file_order(&g), &v).unwrap();
        // [BOS] [S] a [R] r [O] x [R] r2 [O] y [S] b [R] r [O] z = 17 tokens
        assert_eq!(ks.len(), 17);
        let limits = AssemblyLimits {
            max_knowledge_tokens: 16,
            ..AssemblyLimits::default()
        };
        let seq = assemble_input("s", &ks, &[], "a", None, &v, &limits).unwrap();
        assert_eq!(seq.triple_spans.len(), 2);
        assert_eq!(seq.group_spans.len(), 1);
        assert_eq!(seq.knowledge_end, 11);
        assert_eq!(v.decode(seq.triple_tokens(1)), "r2 y");
        let tight = AssemblyLimits {
            max_knowledge_tokens: 2,
            ..AssemblyLimits::default()
        };
        let seq = assemble_input("s", &ks, &[], "a", None, &v, &tight).unwrap();
        assert_eq!(seq.knowledge_end, 1);
        assert!(seq.triple_spans.is_empty());
    }

    #[test]
    fn context_limit_error_names_sample() {
        let (g, v) = starbucks();
        let ks = linearize_graph(&g, &GraphOrder::file_order(&g), &v).unwrap();
        let limits = AssemblyLimits {
            context_limit: 10,
            ..AssemblyLimits::default()
        };
        let err = assemble_input("dlg-9#0", &ks, &[], "where", None, &v, &limits).unwrap_err();
        assert!(err.to_string().contains("dlg-9#0"));
    }
}
