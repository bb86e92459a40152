use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};
use super::ModelConfig;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// One pre-norm transformer block. Linear weights are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: LayerNormParams<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2: LayerNormParams<T>,
    pub w_ff1: Tensor<T>,
    pub b_ff1: Tensor<T>,
    pub w_ff2: Tensor<T>,
    pub b_ff2: Tensor<T>,
}

/// Every trainable tensor of the model. The same layout holds gradients and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub token: Tensor<T>,
    pub position: Tensor<T>,
    pub entity: Tensor<T>,
    pub triple: Tensor<T>,
    pub token_type: Tensor<T>,
    pub embed_ln: LayerNormParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_ln: LayerNormParams<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn new(d: usize, gain: T) -> Self {
        LayerNormParams {
            gain: Tensor::filled(1, d, gain),
            bias: Tensor::zeros(1, d),
        }
    }
}

impl<T: Scalar> Params<T> {
    /// All tensors zero, including layer-norm gains.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::shaped(cfg, T::zero())
    }

    fn shaped(cfg: &ModelConfig, ln_gain: T) -> Self {
        let d = cfg.d_model;
        let block = || BlockParams {
            ln1: LayerNormParams::new(d, ln_gain),
            w_q: Tensor::zeros(d, d),
            b_q: Tensor::zeros(1, d),
            w_k: Tensor::zeros(d, d),
            b_k: Tensor::zeros(1, d),
            w_v: Tensor::zeros(d, d),
            b_v: Tensor::zeros(1, d),
            w_o: Tensor::zeros(d, d),
            b_o: Tensor::zeros(1, d),
            ln2: LayerNormParams::new(d, ln_gain),
            w_ff1: Tensor::zeros(d, cfg.d_ff),
            b_ff1: Tensor::zeros(1, cfg.d_ff),
            w_ff2: Tensor::zeros(cfg.d_ff, d),
            b_ff2: Tensor::zeros(1, d),
        };
        Params {
            token: Tensor::zeros(cfg.vocab_size, d),
            position: Tensor::zeros(cfg.max_positions, d),
            entity: Tensor::zeros(cfg.max_entity_ids, d),
            triple: Tensor::zeros(cfg.max_triple_ids, d),
            token_type: Tensor::zeros(cfg.n_types, d),
            embed_ln: LayerNormParams::new(d, ln_gain),
            blocks: (0..cfg.n_layers).map(|_| block()).collect(),
            final_ln: LayerNormParams::new(d, ln_gain),
        }
    }

    /// GPT-2 style initialization: N(0, 0.02) weights, residual output
    /// projections scaled by `1/sqrt(2 * n_layers)`, unit gains, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::shaped(cfg, T::one());
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let residual = Normal::new(0.0, INIT_STD / (2.0 * cfg.n_layers as f64).sqrt()).expect("valid std");
        let fill = |t: &mut Tensor<T>, dist: &Normal<f64>, rng: &mut R| {
            for v in &mut t.data {
                *v = T::lit(dist.sample(rng));
            }
        };
        fill(&mut p.token, &normal, rng);
        fill(&mut p.position, &normal, rng);
        fill(&mut p.entity, &normal, rng);
        fill(&mut p.triple, &normal, rng);
        fill(&mut p.token_type, &normal, rng);
        for b in &mut p.blocks {
            fill(&mut b.w_q, &normal, rng);
            fill(&mut b.w_k, &normal, rng);
            fill(&mut b.w_v, &normal, rng);
            fill(&mut b.w_o, &residual, rng);
            fill(&mut b.w_ff1, &normal, rng);
            fill(&mut b.w_ff2, &residual, rng);
        }
        p
    }

    /// Tensors with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embed.token".into(), &self.token),
            ("embed.position".into(), &self.position),
            ("embed.entity".into(), &self.entity),
            ("embed.triple".into(), &self.triple),
            ("embed.type".into(), &self.token_type),
            ("embed.ln.gain".into(), &self.embed_ln.gain),
            ("embed.ln.bias".into(), &self.embed_ln.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let entries: [(&str, &Tensor<T>); 16] = [
                ("ln1.gain", &b.ln1.gain),
                ("ln1.bias", &b.ln1.bias),
                ("attn.w_q", &b.w_q),
                ("attn.b_q", &b.b_q),
                ("attn.w_k", &b.w_k),
                ("attn.b_k", &b.b_k),
                ("attn.w_v", &b.w_v),
                ("attn.b_v", &b.b_v),
                ("attn.w_o", &b.w_o),
                ("attn.b_o", &b.b_o),
                ("ln2.gain", &b.ln2.gain),
                ("ln2.bias", &b.ln2.bias),
                ("ff.w1", &b.w_ff1),
                ("ff.b1", &b.b_ff1),
                ("ff.w2", &b.w_ff2),
                ("ff.b2", &b.b_ff2),
            ];
            out.extend(entries.into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("final_ln.gain".into(), &self.final_ln.gain));
        out.push(("final_ln.bias".into(), &self.final_ln.bias));
        out
    }

    /// Mutable tensors in the same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.token,
            &mut self.position,
            &mut self.entity,
            &mut self.triple,
            &mut self.token_type,
            &mut self.embed_ln.gain,
            &mut self.embed_ln.bias,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1.gain,
                &mut b.ln1.bias,
                &mut b.w_q,
                &mut b.b_q,
                &mut b.w_k,
                &mut b.b_k,
                &mut b.w_v,
                &mut b.b_v,
                &mut b.w_o,
                &mut b.b_o,
                &mut b.ln2.gain,
                &mut b.ln2.bias,
                &mut b.w_ff1,
                &mut b.b_ff1,
                &mut b.w_ff2,
                &mut b.b_ff2,
            ]);
        }
        out.push(&mut self.final_ln.gain);
        out.push(&mut self.final_ln.bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill_zero();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let ln = |l: &LayerNormParams<T>| LayerNormParams {
            gain: l.gain.cast(),
            bias: l.bias.cast(),
        };
        Params {
            token: self.token.cast(),
            position: self.position.cast(),
            entity: self.entity.cast(),
            triple: self.triple.cast(),
            token_type: self.token_type.cast(),
            embed_ln: ln(&self.embed_ln),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: ln(&b.ln1),
                    w_q: b.w_q.cast(),
                    b_q: b.b_q.cast(),
                    w_k: b.w_k.cast(),
                    b_k: b.b_k.cast(),
                    w_v: b.w_v.cast(),
                    b_v: b.b_v.cast(),
                    w_o: b.w_o.cast(),
                    b_o: b.b_o.cast(),
                    ln2: ln(&b.ln2),
                    w_ff1: b.w_ff1.cast(),
                    b_ff1: b.b_ff1.cast(),
                    w_ff2: b.w_ff2.cast(),
                    b_ff2: b.b_ff2.cast(),
                })
                .collect(),
            final_ln: ln(&self.final_ln),
        }
    }
}
