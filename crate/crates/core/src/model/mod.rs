//! Decoder-only transformer over the five summed input embeddings.

mod checkpoint;
mod forward;
mod params;
mod sample;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION};
pub use forward::{attention, Dropout};
pub use params::{BlockParams, LayerNormParams, Params};
pub use sample::{sample_response, select_next};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::sequence::InputSequence;

/// Switches that remove parts of the model for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_entity_embedding: bool,
    pub no_triple_embedding: bool,
    pub no_type_embedding: bool,
    pub no_kg_mask: bool,
}

impl Ablation {
    pub fn entity_embedding(&self) -> bool {
        !self.no_entity_embedding
    }

    pub fn triple_embedding(&self) -> bool {
        !self.no_triple_embedding
    }

    pub fn type_embedding(&self) -> bool {
        !self.no_type_embedding
    }

    pub fn kg_mask(&self) -> bool {
        !self.no_kg_mask
    }

    /// Parses a comma-separated list such as `no-entity-emb,no-kg-mask`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "none" => {}
                "no-entity-emb" | "no-entity-embedding" => a.no_entity_embedding = true,
                "no-triple-emb" | "no-triple-embedding" => a.no_triple_embedding = true,
                "no-type-emb" | "no-type-embedding" => a.no_type_embedding = true,
                "no-kg-mask" => a.no_kg_mask = true,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub max_entity_ids: usize,
    pub max_triple_ids: usize,
    pub n_types: usize,
    pub dropout: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            vocab_size: 0,
            max_positions: 1024,
            max_entity_ids: 64,
            max_triple_ids: 128,
            n_types: 3,
            dropout: 0.1,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("max_entity_ids", self.max_entity_ids),
            ("max_triple_ids", self.max_triple_ids),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_types != 3 {
            return Err(Error::Config(format!("n_types must be 3, got {}", self.n_types)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub max_response_length: usize,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.68,
            top_k: 6,
            top_p: 0.9,
            max_response_length: 100,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} is outside (0, 1]", self.top_p)));
        }
        if self.max_response_length == 0 {
            return Err(Error::Config("max_response_length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelState {
            config,
            params: Params::init(&config, &mut rng),
        })
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<T>::zeros(&config);
        for ((name, want), got) in expected.named().into_iter().zip(params.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        if expected.blocks.len() != params.blocks.len() {
            return Err(Error::Checkpoint("layer count does not match the config".into()));
        }
        Ok(ModelState { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Normalized embedding sum of every position.
    pub fn embed(&self, seq: &InputSequence) -> Result<Tensor<T>> {
        forward::embed(&self.config, &self.params, seq)
    }

    /// Logits for every position, without dropout.
    pub fn forward(&self, seq: &InputSequence, mask: &AttentionMask) -> Result<Tensor<T>> {
        let cache = forward::forward_hidden(&self.config, &self.params, seq, mask, None)?;
        let logits = forward::head_logits(&self.params, &cache.hidden, 0..seq.len());
        if !logits.all_finite() {
            return Err(Error::NonFinite(format!("logits of `{}`", seq.sample_id)));
        }
        Ok(logits)
    }

    /// Logits of the last position only.
    pub fn next_token_logits(&self, seq: &InputSequence, mask: &AttentionMask) -> Result<Vec<T>> {
        let cache = forward::forward_hidden(&self.config, &self.params, seq, mask, None)?;
        let n = seq.len();
        let logits = forward::head_logits(&self.params, &cache.hidden, n - 1..n);
        if !logits.all_finite() {
            return Err(Error::NonFinite(format!("logits of `{}`", seq.sample_id)));
        }
        Ok(logits.data)
    }

    /// Response loss and the full parameter gradient.
    pub fn loss_and_grad(
        &self,
        seq: &InputSequence,
        mask: &AttentionMask,
        dropout: Option<Dropout<'_>>,
    ) -> Result<(f64, Params<T>)> {
        forward::loss_and_grad(&self.config, &self.params, seq, mask, dropout)
    }

    /// Response loss without gradients or dropout.
    pub fn response_loss(&self, seq: &InputSequence, mask: &AttentionMask) -> Result<f64> {
        let rows = forward::response_rows(seq)?;
        let cache = forward::forward_hidden(&self.config, &self.params, seq, mask, None)?;
        let logits = forward::head_logits(&self.params, &cache.hidden, rows.clone());
        let (l, _) = forward::nll(&logits, &seq.token_ids[rows.start + 1..rows.end + 1]);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss of `{}`", seq.sample_id)));
        }
        Ok(l)
    }
}

/// Mean next-token NLL over the response of `seq` given full `n x V` logits,
/// and its gradient with respect to those logits.
pub fn loss<T: Scalar>(logits: &Tensor<T>, seq: &InputSequence) -> Result<(f64, Tensor<T>)> {
    let rows = forward::response_rows(seq)?;
    assert_eq!(logits.rows, seq.len(), "one logit row per position");
    let sub = Tensor::from_vec(
        rows.len(),
        logits.cols,
        logits.data[rows.start * logits.cols..rows.end * logits.cols].to_vec(),
    );
    let (l, g) = forward::nll(&sub, &seq.token_ids[rows.start + 1..rows.end + 1]);
    let mut grad = Tensor::zeros(logits.rows, logits.cols);
    grad.data[rows.start * logits.cols..rows.end * logits.cols].copy_from_slice(&g.data);
    Ok((l, grad))
}
