//! Training loop: per-epoch graph shuffling, gradient accumulation and an
//! AdamW update, with the best validation-loss state retained.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_weight::Selection;
use crate::kg::{DatasetSplit, DialogueSample};
use crate::mask::compose_mask;
use crate::model::{Dropout, ModelConfig, ModelState, Params, Scalar};
use crate::pipeline::{fnv1a, mix_seed, Pipeline};
use crate::sequence::{AssemblyLimits, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    /// Linear warmup length in optimizer steps; 0 keeps the rate constant.
    pub warmup_steps: usize,
    pub seed: u64,
    pub k_entity: usize,
    pub k_relation: usize,
    pub limits: AssemblyLimits,
    /// Worker threads for per-sample gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 6.25e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: 4,
            grad_accum_steps: 4,
            epochs: 10,
            warmup_steps: 0,
            seed: 42,
            k_entity: 7,
            k_relation: 7,
            limits: AssemblyLimits::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("k_entity", self.k_entity),
            ("k_relation", self.k_relation),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        Ok(())
    }

    /// Samples per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Params<f32>,
    v: Params<f32>,
}

impl AdamW {
    pub fn new(cfg: &ModelConfig, train: &TrainConfig) -> Self {
        AdamW {
            lr: train.learning_rate,
            beta1: train.adam_beta1,
            beta2: train.adam_beta2,
            eps: train.adam_epsilon,
            weight_decay: train.weight_decay,
            step: 0,
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
        }
    }

    /// One update at learning rate `lr`.
    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let decay = (lr * self.weight_decay) as f32;
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let denom = v.data[i].sqrt() / c2_sqrt + eps;
                p.data[i] -= decay * p.data[i] + step_size * m.data[i] / denom;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,valid_loss\n");
    for r in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.train_loss, r.valid_loss));
    }
    out
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history_csv(history).as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the lowest validation loss.
    pub best: ModelState<f32>,
    pub best_epoch: usize,
    pub last: ModelState<f32>,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

/// Selections only depend on the question and graph, so they are computed once.
fn selections(pipeline: &Pipeline, split: &DatasetSplit, cfg: &TrainConfig) -> Vec<Selection> {
    split
        .samples
        .iter()
        .map(|s| pipeline.selection(&s.graph, &s.question, cfg.k_entity, cfg.k_relation))
        .collect()
}

fn sample_grad(
    state: &ModelState<f32>,
    pipeline: &Pipeline,
    sample: &DialogueSample,
    selection: &Selection,
    seed: u64,
    epoch: usize,
) -> Result<(f64, Params<f32>)> {
    let id_hash = fnv1a(&sample.id);
    let order = Pipeline::order(&sample.graph, Some(mix_seed(&[seed, epoch as u64, id_hash, 0])));
    let enc = pipeline.encode(
        &sample.id,
        &sample.graph,
        &order,
        &sample.history,
        &sample.question,
        Some(&sample.gold_response),
        selection.clone(),
    )?;
    let mask = compose_mask(&enc.seq, &enc.columns, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, id_hash, 1]));
    let dropout = (state.config.dropout > 0.0).then_some(Dropout {
        rate: state.config.dropout,
        rng: &mut rng,
    });
    state.loss_and_grad(&enc.seq, &mask, dropout)
}

/// Mean response loss over `split` in file order, without dropout.
pub fn mean_loss<T: Scalar>(
    state: &ModelState<T>,
    pipeline: &Pipeline,
    split: &DatasetSplit,
    k_entity: usize,
    k_relation: usize,
) -> Result<f64> {
    if split.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in &split.samples {
        let sel = pipeline.selection(&s.graph, &s.question, k_entity, k_relation);
        let order = Pipeline::order(&s.graph, None);
        let enc = pipeline.encode(&s.id, &s.graph, &order, &s.history, &s.question, Some(&s.gold_response), sel)?;
        total += state.response_loss(&enc.seq, &compose_mask(&enc.seq, &enc.columns, 0))?;
    }
    Ok(total / split.len() as f64)
}

/// Trains from a fresh initialization seeded by `cfg.seed`. `on_epoch` sees
/// every epoch record as soon as it is available.
pub fn train(
    train_split: &DatasetSplit,
    valid_split: &DatasetSplit,
    vocab: &Vocabulary,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    train_while(train_split, valid_split, vocab, model_cfg, cfg, &mut |r| {
        on_epoch(r);
        true
    })
}

/// Like [`train`], but stops after any epoch for which `on_epoch` returns
/// false. `cfg.epochs` stays the upper bound.
pub fn train_while(
    train_split: &DatasetSplit,
    valid_split: &DatasetSplit,
    vocab: &Vocabulary,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_split.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if model_cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from the vocabulary size {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let mut state = ModelState::<f32>::new(model_cfg, cfg.seed)?;
    let pipeline = Pipeline::new(vocab.clone(), cfg.limits, model_cfg.ablation.kg_mask());
    let train_sel = selections(&pipeline, train_split, cfg);
    let mut opt = AdamW::new(&model_cfg, cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelState<f32>)> = None;
    let mut grads = Params::<f32>::zeros(&model_cfg);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, 0xe90c])));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.effective_batch()) {
            let results: Vec<Result<(f64, Params<f32>)>> = if cfg.threads > 1 {
                use rayon::prelude::*;
                pool.install(|| {
                    chunk
                        .par_iter()
                        .map(|&i| sample_grad(&state, &pipeline, &train_split.samples[i], &train_sel[i], cfg.seed, epoch))
                        .collect()
                })
            } else {
                chunk
                    .iter()
                    .map(|&i| sample_grad(&state, &pipeline, &train_split.samples[i], &train_sel[i], cfg.seed, epoch))
                    .collect()
            };
            grads.fill_zero();
            for (&i, r) in chunk.iter().zip(results) {
                let sample_id = &train_split.samples[i].id;
                let (loss, g) = r.map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        step: opt.step as usize + 1,
                        sample_id: sample_id.clone(),
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
                if !loss.is_finite() || !g.all_finite() {
                    return Err(Error::Diverged {
                        step: opt.step as usize + 1,
                        sample_id: sample_id.clone(),
                        loss,
                    });
                }
                loss_sum += loss;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / chunk.len() as f32);
            let lr = if cfg.warmup_steps > 0 && (opt.step as usize) < cfg.warmup_steps {
                cfg.learning_rate * (opt.step + 1) as f64 / cfg.warmup_steps as f64
            } else {
                cfg.learning_rate
            };
            opt.update(&mut state.params, &grads, lr);
        }

        let valid_loss = if valid_split.is_empty() {
            f64::NAN
        } else {
            mean_loss(&state, &pipeline, valid_split, cfg.k_entity, cfg.k_relation)?
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_split.len() as f64,
            valid_loss,
        };
        let go_on = on_epoch(&record);
        history.push(record);
        // without a validation split the latest state counts as best
        let better = match &best {
            None => true,
            Some((b, _, _)) => valid_loss.is_nan() || valid_loss < *b,
        };
        if better {
            best = Some((valid_loss, epoch, state.clone()));
        }
        if !go_on {
            break;
        }
    }

    let (best_epoch, best_state) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, state.clone()),
    };
    Ok(TrainOutcome {
        best: best_state,
        best_epoch,
        last: state,
        history,
        steps: opt.step,
    })
}
