//! Sentence BLEU and micro-averaged entity F1.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// Description of the BLEU variant, echoed into evaluation reports.
pub const BLEU_VARIANT: &str = "sentence BLEU-4, uniform weights, brevity penalty; an order with no matches \
uses precision 1/(2*c) where c is the candidate n-gram count (at least 1); an order where neither side has \
n-grams is skipped as precision 1; empty hypothesis scores 0";

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence-level BLEU-4 in `[0, 1]`.
pub fn sentence_bleu(hypothesis: &[&str], reference: &[&str]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand_total = hypothesis.len().saturating_sub(n - 1);
        let ref_total = reference.len().saturating_sub(n - 1);
        if cand_total == 0 && ref_total == 0 {
            continue;
        }
        let cand = ngram_counts(hypothesis, n);
        let refs = ngram_counts(reference, n);
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (2.0 * cand_total.max(1) as f64)
        } else {
            matched as f64 / cand_total as f64
        };
        log_sum += p.ln();
    }
    let bp = if hypothesis.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hypothesis.len() as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

/// Whitespace-tokenizing convenience wrapper.
pub fn sentence_bleu_str(hypothesis: &str, reference: &str) -> f64 {
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    sentence_bleu(&h, &r)
}

/// Entity phrases, matched longest first.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    by_first: HashMap<String, Vec<Vec<String>>>,
}

impl Lexicon {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<Vec<String>> = phrases
            .into_iter()
            .map(|p| p.as_ref().split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        all.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        all.dedup();
        let mut by_first: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for p in all {
            by_first.entry(p[0].clone()).or_default().push(p);
        }
        Lexicon { by_first }
    }

    /// Scans left to right; at each position the longest matching phrase
    /// is taken and its tokens are consumed.
    pub fn extract(&self, text: &str) -> BTreeSet<String> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self.by_first.get(tokens[i]).and_then(|cands| {
                cands.iter().find(|p| {
                    p.len() <= tokens.len() - i && p.iter().zip(&tokens[i..]).all(|(a, b)| a == b)
                })
            });
            match hit {
                Some(p) => {
                    found.insert(p.join(" "));
                    i += p.len();
                }
                None => i += 1,
            }
        }
        found
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EntityCounts {
    pub fn compare(predicted: &BTreeSet<String>, gold: &BTreeSet<String>) -> Self {
        let tp = predicted.intersection(gold).count();
        EntityCounts {
            tp,
            fp: predicted.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn add(&mut self, other: EntityCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2TP / (2TP + FP + FN)`; 1 when there is nothing to find and nothing
    /// was predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Micro-averaged entity F1 of paired hypotheses and golds, in `[0, 1]`.
pub fn entity_f1<H: AsRef<str>, G: AsRef<str>>(hypotheses: &[H], golds: &[G], lexicon: &Lexicon) -> f64 {
    assert_eq!(hypotheses.len(), golds.len(), "one hypothesis per gold response");
    let mut total = EntityCounts::default();
    for (h, g) in hypotheses.iter().zip(golds) {
        total.add(EntityCounts::compare(&lexicon.extract(h.as_ref()), &lexicon.extract(g.as_ref())));
    }
    total.f1()
}
