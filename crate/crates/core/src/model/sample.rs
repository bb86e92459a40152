use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecodingParams, ModelState, Scalar};
use crate::error::Result;
use crate::mask::{compose_mask, KnowledgeColumns};
use crate::sequence::{InputSequence, EOS};

/// Picks the next token from raw logits: temperature, top-k, then the
/// smallest nucleus reaching `top_p`, renormalized and sampled.
pub fn select_next<R: Rng + ?Sized>(logits: &[f64], params: &DecodingParams, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(params.top_k.max(1));

    let max = logits[order[0]] / params.temperature;
    let mut probs: Vec<f64> = order
        .iter()
        .map(|&i| (logits[i] / params.temperature - max).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    let mut cumulative = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter_mut().enumerate() {
        *p /= total;
        cumulative += *p;
        if cumulative >= params.top_p {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    if keep == 1 {
        return order[0];
    }
    let mass: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * mass;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return order[i];
        }
        u -= p;
    }
    order[keep - 1]
}

/// Generates a response after `context`. The knowledge columns stay fixed
/// while generated tokens are appended. The returned tokens exclude `[EOS]`.
pub fn sample_response<T: Scalar>(
    state: &ModelState<T>,
    context: &InputSequence,
    cols: &KnowledgeColumns,
    params: &DecodingParams,
) -> Result<Vec<usize>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut seq = context.clone();
    seq.response_start = seq.len();
    let mut out = Vec::new();
    while out.len() < params.max_response_length && seq.len() < state.config.max_positions {
        let mask = compose_mask(&seq, cols, 0);
        let logits: Vec<f64> = state
            .next_token_logits(&seq, &mask)?
            .into_iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        let token = select_next(&logits, params, &mut rng);
        if token == EOS {
            break;
        }
        out.push(token);
        seq.push_response_token(token);
    }
    Ok(out)
}
