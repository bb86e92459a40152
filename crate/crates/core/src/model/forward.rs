//! Forward pass with activation caching, next-token NLL, and the matching
//! hand-written backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{BlockParams, LayerNormParams, Params};
use super::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::{AttentionMask, MASKED};
use crate::sequence::InputSequence;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

struct LnCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<Tensor<T>>,
    ctx: Tensor<T>,
    drop_attn: Option<Vec<T>>,
    ln2: LnCache<T>,
    b: Tensor<T>,
    ff_pre: Tensor<T>,
    ff_act: Tensor<T>,
    drop_ff: Option<Vec<T>>,
}

pub(crate) struct ForwardCache<T> {
    embed_ln: LnCache<T>,
    drop_embed: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    /// Output of the final layer norm, `n x d`.
    pub hidden: Tensor<T>,
}

/// Inverted dropout driven by a caller-owned generator.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<T: Scalar>(&mut self, len: usize) -> Option<Vec<T>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = T::lit(1.0 / (1.0 - self.rate));
        Some(
            (0..len)
                .map(|_| if self.rng.gen::<f64>() < self.rate { T::zero() } else { keep })
                .collect(),
        )
    }
}

fn apply_mask<T: Scalar>(x: &mut Tensor<T>, mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, k) in x.data.iter_mut().zip(m) {
            *v *= *k;
        }
    }
}

fn layer_norm<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> (Tensor<T>, LnCache<T>) {
    let d = x.cols;
    let inv_d = T::lit(1.0 / d as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = Tensor::zeros(x.rows, d);
    let mut out = Tensor::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * r;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = xh[j] * p.gain.data[j] + p.bias.data[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns dx; accumulates gain/bias gradients.
fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &LnCache<T>,
    p: &LayerNormParams<T>,
    g: &mut LayerNormParams<T>,
) -> Tensor<T> {
    let d = dy.cols;
    let inv_d = T::lit(1.0 / d as f64);
    let mut dx = Tensor::zeros(dy.rows, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            g.gain.data[j] += dyr[j] * xh[j];
            g.bias.data[j] += dyr[j];
            dxhat[j] = dyr[j] * p.gain.data[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        let r = cache.rstd[i];
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// `x W + b` for row-major `x` (`n x in`) and `W` (`in x out`).
fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        out.row_mut(i).copy_from_slice(&b.data);
    }
    gemm(T::one(), x.view(), w.view(), T::one(), out.view_mut());
    out
}

/// Accumulates `dW += x^T dy`, `db += colsum(dy)`; returns `dy W^T`.
fn linear_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Tensor<T> {
    gemm(T::one(), x.view().t(), dy.view(), T::one(), dw.view_mut());
    for i in 0..dy.rows {
        for (acc, &v) in db.data.iter_mut().zip(dy.row(i)) {
            *acc += v;
        }
    }
    let mut dx = Tensor::zeros(dy.rows, w.rows);
    gemm(T::one(), dy.view(), w.view().t(), T::zero(), dx.view_mut());
    dx
}

/// Masked softmax attention for one head, writing `softmax(q k^T * scale + M) v`
/// into `out` and returning the probabilities.
fn attend<T: Scalar>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    mask: &AttentionMask,
    n: usize,
    scale: T,
    out: MatMut<'_, T>,
) -> Tensor<T> {
    let mut probs = Tensor::zeros(n, n);
    gemm(scale, q, k.t(), T::zero(), probs.view_mut());
    let masked = T::lit(MASKED);
    for i in 0..n {
        let vis = &mask.row(i)[..n];
        let row = probs.row_mut(i);
        for (s, &visible) in row.iter_mut().zip(vis) {
            if !visible {
                *s += masked;
            }
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = sum.recip();
        for s in row.iter_mut() {
            *s *= inv;
        }
    }
    gemm(T::one(), probs.view(), v, T::zero(), out);
    probs
}

/// Single-head masked attention `softmax(Q K^T / sqrt(d_k) + M) V`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: &AttentionMask) -> Tensor<T> {
    let n = q.rows;
    assert!(mask.n() >= n && k.rows == n && v.rows == n && q.cols == k.cols);
    let scale = T::lit(1.0 / (q.cols as f64).sqrt());
    let mut out = Tensor::zeros(n, v.cols);
    attend(q.view(), k.view(), v.view(), mask, n, scale, out.view_mut());
    out
}

fn check_indices(cfg: &ModelConfig, seq: &InputSequence) -> Result<()> {
    let streams: [(&'static str, &[usize], usize); 5] = [
        ("token", &seq.token_ids, cfg.vocab_size),
        ("position", &seq.position_ids, cfg.max_positions),
        ("entity", &seq.entity_ids, cfg.max_entity_ids),
        ("triple", &seq.triple_ids, cfg.max_triple_ids),
        ("type", &seq.type_ids, cfg.n_types),
    ];
    for (stream, ids, size) in streams {
        if let Some(&index) = ids.iter().find(|&&i| i >= size) {
            return Err(Error::IndexOutOfRange { stream, index, size });
        }
    }
    Ok(())
}

/// Sum of the enabled embedding streams, before normalization.
fn embedding_sum<T: Scalar>(cfg: &ModelConfig, p: &Params<T>, seq: &InputSequence) -> Result<Tensor<T>> {
    check_indices(cfg, seq)?;
    let n = seq.len();
    let d = cfg.d_model;
    let mut x = Tensor::zeros(n, d);
    for i in 0..n {
        let row = x.row_mut(i);
        row.copy_from_slice(p.token.row(seq.token_ids[i]));
        let mut add = |t: &Tensor<T>, id: usize| {
            for (r, &v) in row.iter_mut().zip(t.row(id)) {
                *r += v;
            }
        };
        add(&p.position, seq.position_ids[i]);
        if cfg.ablation.entity_embedding() {
            add(&p.entity, seq.entity_ids[i]);
        }
        if cfg.ablation.triple_embedding() {
            add(&p.triple, seq.triple_ids[i]);
        }
        if cfg.ablation.type_embedding() {
            add(&p.token_type, seq.type_ids[i]);
        }
    }
    Ok(x)
}

/// Normalized sum of the five embeddings, without dropout.
pub(crate) fn embed<T: Scalar>(cfg: &ModelConfig, p: &Params<T>, seq: &InputSequence) -> Result<Tensor<T>> {
    let x = embedding_sum(cfg, p, seq)?;
    Ok(layer_norm(&x, &p.embed_ln).0)
}

fn block_forward<T: Scalar>(
    cfg: &ModelConfig,
    p: &BlockParams<T>,
    x: &mut Tensor<T>,
    mask: &AttentionMask,
    dropout: &mut Option<Dropout<'_>>,
) -> BlockCache<T> {
    let n = x.rows;
    let d = cfg.d_model;
    let dk = d / cfg.n_heads;
    let scale = T::lit(1.0 / (dk as f64).sqrt());

    let (a, ln1) = layer_norm(x, &p.ln1);
    let q = linear(&a, &p.w_q, &p.b_q);
    let k = linear(&a, &p.w_k, &p.b_k);
    let v = linear(&a, &p.w_v, &p.b_v);
    let mut ctx = Tensor::zeros(n, d);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let out = ctx.cols_view_mut(h * dk, dk);
        probs.push(attend(
            q.cols_view(h * dk, dk),
            k.cols_view(h * dk, dk),
            v.cols_view(h * dk, dk),
            mask,
            n,
            scale,
            out,
        ));
    }
    let mut attn_out = linear(&ctx, &p.w_o, &p.b_o);
    let drop_attn = dropout.as_mut().and_then(|dr| dr.mask(attn_out.len()));
    apply_mask(&mut attn_out, &drop_attn);
    x.add_assign(&attn_out);

    let (b, ln2) = layer_norm(x, &p.ln2);
    let ff_pre = linear(&b, &p.w_ff1, &p.b_ff1);
    let ff_act = Tensor::from_vec(ff_pre.rows, ff_pre.cols, ff_pre.data.iter().map(|&v| gelu(v)).collect());
    let mut ff_out = linear(&ff_act, &p.w_ff2, &p.b_ff2);
    let drop_ff = dropout.as_mut().and_then(|dr| dr.mask(ff_out.len()));
    apply_mask(&mut ff_out, &drop_ff);
    x.add_assign(&ff_out);

    BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        drop_attn,
        ln2,
        b,
        ff_pre,
        ff_act,
        drop_ff,
    }
}

/// Runs the network up to the final layer norm.
pub(crate) fn forward_hidden<T: Scalar>(
    cfg: &ModelConfig,
    p: &Params<T>,
    seq: &InputSequence,
    mask: &AttentionMask,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardCache<T>> {
    let n = seq.len();
    assert!(mask.n() >= n, "attention mask is smaller than the sequence");
    if n > cfg.max_positions {
        return Err(Error::IndexOutOfRange {
            stream: "position",
            index: n - 1,
            size: cfg.max_positions,
        });
    }
    let x = embedding_sum(cfg, p, seq)?;
    let (mut x, embed_ln) = layer_norm(&x, &p.embed_ln);
    let drop_embed = dropout.as_mut().and_then(|dr| dr.mask(x.len()));
    apply_mask(&mut x, &drop_embed);

    let blocks = p
        .blocks
        .iter()
        .map(|bp| block_forward(cfg, bp, &mut x, mask, &mut dropout))
        .collect();
    let (hidden, final_ln) = layer_norm(&x, &p.final_ln);
    if !hidden.all_finite() {
        return Err(Error::NonFinite(format!("hidden states of `{}`", seq.sample_id)));
    }
    Ok(ForwardCache {
        embed_ln,
        drop_embed,
        blocks,
        final_ln,
        hidden,
    })
}

/// Logits of the tied output head for rows `rows` of the hidden states.
pub(crate) fn head_logits<T: Scalar>(p: &Params<T>, hidden: &Tensor<T>, rows: std::ops::Range<usize>) -> Tensor<T> {
    let d = hidden.cols;
    let h = MatRef::new(&hidden.data[rows.start * d..rows.end * d], rows.len(), d);
    let mut out = Tensor::zeros(rows.len(), p.token.rows);
    gemm(T::one(), h, p.token.view().t(), T::zero(), out.view_mut());
    out
}

/// Mean NLL of `targets` under row-wise softmax of `logits`, and its gradient.
pub(crate) fn nll<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> (f64, Tensor<T>) {
    assert_eq!(logits.rows, targets.len());
    let inv_t = 1.0 / targets.len() as f64;
    let mut grad = Tensor::zeros(logits.rows, logits.cols);
    let mut total = 0.0f64;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: f64 = row.iter().map(|&v| (v - max).to_f64().unwrap_or(f64::NAN).exp()).sum();
        let log_z = max.to_f64().unwrap_or(f64::NAN) + sum.ln();
        total += log_z - row[target].to_f64().unwrap_or(f64::NAN);
        let g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = T::lit((v.to_f64().unwrap_or(f64::NAN) - log_z).exp() * inv_t);
        }
        g[target] -= T::lit(inv_t);
    }
    (total * inv_t, grad)
}

/// Positions predicting the response: row `p` predicts token `p + 1`.
pub(crate) fn response_rows(seq: &InputSequence) -> Result<std::ops::Range<usize>> {
    if seq.response_start == 0 || seq.response_start >= seq.len() {
        return Err(Error::EmptyResponse(seq.sample_id.clone()));
    }
    Ok(seq.response_start - 1..seq.len() - 1)
}

/// Back-propagates `d_hidden` (gradient at the final layer norm output).
pub(crate) fn backward<T: Scalar>(
    cfg: &ModelConfig,
    p: &Params<T>,
    seq: &InputSequence,
    cache: &ForwardCache<T>,
    d_hidden: &Tensor<T>,
    grads: &mut Params<T>,
) {
    let n = seq.len();
    let d = cfg.d_model;
    let dk = d / cfg.n_heads;
    let scale = T::lit(1.0 / (dk as f64).sqrt());

    let mut dx = layer_norm_backward(d_hidden, &cache.final_ln, &p.final_ln, &mut grads.final_ln);

    for ((bp, bc), bg) in p.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
        // feed-forward sublayer
        let mut d_ff_out = dx.clone();
        apply_mask(&mut d_ff_out, &bc.drop_ff);
        let mut d_act = linear_backward(&d_ff_out, &bc.ff_act, &bp.w_ff2, &mut bg.w_ff2, &mut bg.b_ff2);
        for (g, &pre) in d_act.data.iter_mut().zip(&bc.ff_pre.data) {
            *g *= gelu_grad(pre);
        }
        let d_b = linear_backward(&d_act, &bc.b, &bp.w_ff1, &mut bg.w_ff1, &mut bg.b_ff1);
        dx.add_assign(&layer_norm_backward(&d_b, &bc.ln2, &bp.ln2, &mut bg.ln2));

        // attention sublayer
        let mut d_attn_out = dx.clone();
        apply_mask(&mut d_attn_out, &bc.drop_attn);
        let d_ctx = linear_backward(&d_attn_out, &bc.ctx, &bp.w_o, &mut bg.w_o, &mut bg.b_o);
        let mut dq = Tensor::zeros(n, d);
        let mut dk_all = Tensor::zeros(n, d);
        let mut dv = Tensor::zeros(n, d);
        let mut d_probs = Tensor::zeros(n, n);
        for h in 0..cfg.n_heads {
            let probs = &bc.probs[h];
            let d_out = d_ctx.cols_view(h * dk, dk);
            // dP = dO V^T, dV = P^T dO
            gemm(T::one(), d_out, bc.v.cols_view(h * dk, dk).t(), T::zero(), d_probs.view_mut());
            gemm(T::one(), probs.view().t(), d_out, T::zero(), dv.cols_view_mut(h * dk, dk));
            // softmax backward, folded with the 1/sqrt(d_k) scale
            for i in 0..n {
                let pr = probs.row(i);
                let dp = d_probs.row_mut(i);
                let dot = pr.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (g, &pv) in dp.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            gemm(T::one(), d_probs.view(), bc.k.cols_view(h * dk, dk), T::zero(), dq.cols_view_mut(h * dk, dk));
            gemm(T::one(), d_probs.view().t(), bc.q.cols_view(h * dk, dk), T::zero(), dk_all.cols_view_mut(h * dk, dk));
        }
        let mut d_a = linear_backward(&dq, &bc.a, &bp.w_q, &mut bg.w_q, &mut bg.b_q);
        d_a.add_assign(&linear_backward(&dk_all, &bc.a, &bp.w_k, &mut bg.w_k, &mut bg.b_k));
        d_a.add_assign(&linear_backward(&dv, &bc.a, &bp.w_v, &mut bg.w_v, &mut bg.b_v));
        dx.add_assign(&layer_norm_backward(&d_a, &bc.ln1, &bp.ln1, &mut bg.ln1));
    }

    apply_mask(&mut dx, &cache.drop_embed);
    let d_sum = layer_norm_backward(&dx, &cache.embed_ln, &p.embed_ln, &mut grads.embed_ln);
    for i in 0..n {
        let g = d_sum.row(i);
        let scatter = |t: &mut Tensor<T>, id: usize| {
            for (acc, &v) in t.row_mut(id).iter_mut().zip(g) {
                *acc += v;
            }
        };
        scatter(&mut grads.token, seq.token_ids[i]);
        scatter(&mut grads.position, seq.position_ids[i]);
        if cfg.ablation.entity_embedding() {
            scatter(&mut grads.entity, seq.entity_ids[i]);
        }
        if cfg.ablation.triple_embedding() {
            scatter(&mut grads.triple, seq.triple_ids[i]);
        }
        if cfg.ablation.type_embedding() {
            scatter(&mut grads.token_type, seq.type_ids[i]);
        }
    }
}

/// Loss over the response and its gradient for every parameter.
pub(crate) fn loss_and_grad<T: Scalar>(
    cfg: &ModelConfig,
    p: &Params<T>,
    seq: &InputSequence,
    mask: &AttentionMask,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Params<T>)> {
    let rows = response_rows(seq)?;
    let cache = forward_hidden(cfg, p, seq, mask, dropout)?;
    let logits = head_logits(p, &cache.hidden, rows.clone());
    let targets = &seq.token_ids[rows.start + 1..rows.end + 1];
    let (loss, d_logits) = nll(&logits, targets);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss of `{}`", seq.sample_id)));
    }

    let mut grads = Params::zeros(cfg);
    let d = cfg.d_model;
    // tied head: dE += dL^T H, dH = dL E
    let h_rows = MatRef::new(&cache.hidden.data[rows.start * d..rows.end * d], rows.len(), d);
    gemm(T::one(), d_logits.view().t(), h_rows, T::one(), grads.token.view_mut());
    let mut d_hidden = Tensor::zeros(seq.len(), d);
    {
        let out = MatMut::new(&mut d_hidden.data[rows.start * d..rows.end * d], rows.len(), d);
        gemm(T::one(), d_logits.view(), p.token.view(), T::zero(), out);
    }
    backward(cfg, p, seq, &cache, &d_hidden, &mut grads);
    Ok((loss, grads))
}
