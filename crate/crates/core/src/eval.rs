//! Generation over a split and scoring with BLEU and entity F1.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{entity_lexicon, DatasetSplit, DialogueSample};
use crate::metrics::{sentence_bleu_str, EntityCounts, Lexicon, BLEU_VARIANT};
use crate::model::{sample_response, Checkpoint, DecodingParams, ModelState};
use crate::pipeline::{fnv1a, mix_seed, Pipeline};
use crate::sequence::{AssemblyLimits, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub decoding: DecodingParams,
    pub k_entity: usize,
    pub k_relation: usize,
    pub limits: AssemblyLimits,
    pub threads: usize,
    /// Score the gold responses against themselves instead of generating.
    pub hyp_from_gold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub question: String,
    pub gold: String,
    pub hypothesis: String,
    pub gold_entities: BTreeSet<String>,
    pub predicted_entities: BTreeSet<String>,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean sentence BLEU, x100.
    pub bleu: f64,
    /// Micro-averaged entity F1, x100.
    pub entity_f1: f64,
    pub counts: EntityCounts,
    pub n_samples: usize,
    pub bleu_variant: String,
    pub options: EvalOptions,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    /// Fixed-width metrics table.
    pub fn table(&self) -> String {
        format!(
            "{:<10} {:>9} {:>9} {:>8}\n{:<10} {:>9.2} {:>9.2} {:>8}\n",
            "k(e/r)",
            "BLEU",
            "EntityF1",
            "samples",
            format!("{}/{}", k_label(self.options.k_entity), k_label(self.options.k_relation)),
            self.bleu,
            self.entity_f1,
            self.n_samples
        )
    }
}

/// `all` for an unbounded k.
pub fn k_label(k: usize) -> String {
    if k == usize::MAX {
        "all".into()
    } else {
        k.to_string()
    }
}

fn generate(
    state: &ModelState<f32>,
    pipeline: &Pipeline,
    sample: &DialogueSample,
    opts: &EvalOptions,
) -> Result<String> {
    if opts.hyp_from_gold {
        return Ok(sample.gold_response.clone());
    }
    let sel = pipeline.selection(&sample.graph, &sample.question, opts.k_entity, opts.k_relation);
    let order = Pipeline::order(&sample.graph, None);
    let enc = pipeline.encode(&sample.id, &sample.graph, &order, &sample.history, &sample.question, None, sel)?;
    let decoding = DecodingParams {
        seed: mix_seed(&[opts.decoding.seed, fnv1a(&sample.id)]),
        ..opts.decoding
    };
    let tokens = sample_response(state, &enc.seq, &enc.columns, &decoding)?;
    Ok(pipeline.vocab.decode(&tokens))
}

/// Generates for every sample of `split` and scores the results.
pub fn evaluate_state(
    state: &ModelState<f32>,
    vocab: &Vocabulary,
    split: &DatasetSplit,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let pipeline = Pipeline::new(vocab.clone(), opts.limits, state.config.ablation.kg_mask());
    let lexicon = Lexicon::new(entity_lexicon(&[split]));
    let hyps: Vec<Result<String>> = if opts.threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            split
                .samples
                .par_iter()
                .map(|s| generate(state, &pipeline, s, opts))
                .collect()
        })
    } else {
        split.samples.iter().map(|s| generate(state, &pipeline, s, opts)).collect()
    };

    let mut samples = Vec::with_capacity(split.len());
    let mut counts = EntityCounts::default();
    let mut bleu_sum = 0.0;
    for (s, h) in split.samples.iter().zip(hyps) {
        let hypothesis = h?;
        let gold_entities = lexicon.extract(&s.gold_response);
        let predicted_entities = lexicon.extract(&hypothesis);
        counts.add(EntityCounts::compare(&predicted_entities, &gold_entities));
        let bleu = sentence_bleu_str(&hypothesis, &s.gold_response);
        bleu_sum += bleu;
        samples.push(SampleRecord {
            id: s.id.clone(),
            question: s.question.clone(),
            gold: s.gold_response.clone(),
            hypothesis,
            gold_entities,
            predicted_entities,
            bleu,
        });
    }
    let n = samples.len();
    Ok(EvalReport {
        bleu: if n == 0 { 0.0 } else { 100.0 * bleu_sum / n as f64 },
        entity_f1: 100.0 * counts.f1(),
        counts,
        n_samples: n,
        bleu_variant: BLEU_VARIANT.to_string(),
        options: *opts,
        samples,
    })
}

/// As [`evaluate_state`], after checking that `vocab` is the checkpoint's.
pub fn evaluate(ckpt: &Checkpoint, vocab: &Vocabulary, split: &DatasetSplit, opts: &EvalOptions) -> Result<EvalReport> {
    let found = vocab.hash();
    if found != ckpt.header.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: ckpt.header.vocab_hash.clone(),
            found,
        });
    }
    evaluate_state(&ckpt.state, vocab, split, opts)
}
