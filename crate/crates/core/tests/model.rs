mod common;

use common::*;
use kgdialog_core::error::Error;
use kgdialog_core::mask::{compose_mask, AttentionMask, KnowledgeColumns};
use kgdialog_core::model::{attention, loss, sample_response, select_next, DecodingParams, ModelState, Params, Tensor};
use kgdialog_core::sequence::{InputSequence, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Hand-built sequence with every stream set explicitly.
fn toy_seq(tokens: &[usize], response_start: usize) -> InputSequence {
    let n = tokens.len();
    InputSequence {
        sample_id: "toy".into(),
        token_ids: tokens.to_vec(),
        position_ids: (0..n).collect(),
        entity_ids: vec![0; n],
        triple_ids: vec![0; n],
        type_ids: vec![0; n],
        knowledge_end: 0,
        question_start: 1,
        response_start,
        triple_spans: vec![],
        group_spans: vec![],
        evicted_turns: 0,
    }
}

fn causal(seq: &InputSequence) -> AttentionMask {
    compose_mask(seq, &KnowledgeColumns::unmasked(seq), 0)
}

// ---------------------------------------------------------------- embed

#[test]
fn embed_with_only_token_table_is_normalized_token_rows() {
    let vocab = small_vocab();
    let cfg = tiny_config(vocab.len());
    let mut state = ModelState::<f64>::new(cfg, 1).unwrap();
    for t in [
        &mut state.params.position,
        &mut state.params.entity,
        &mut state.params.triple,
        &mut state.params.token_type,
    ] {
        t.fill_zero();
    }
    let seq = toy_seq(&[1, 12, 30, 12], 2);
    let h = state.embed(&seq).unwrap();
    for (i, &tok) in seq.token_ids.iter().enumerate() {
        let row = state.params.token.row(tok);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        for j in 0..16 {
            let expect = (row[j] - mean) / (var + 1e-5).sqrt();
            assert!((h.row(i)[j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn embed_rows_have_zero_mean_unit_variance() {
    let vocab = small_vocab();
    let mut state = ModelState::<f64>::new(tiny_config(vocab.len()), 2).unwrap();
    // unit-scale tables so the 1e-5 eps is negligible next to the variance
    for t in state.params.tensors_mut().into_iter().take(5) {
        t.scale(50.0);
    }
    let (_, enc) = random_encoded(&mut rng(3), 5, true);
    let h = state.embed(&enc.seq).unwrap();
    for i in 0..h.rows {
        let row = h.row(i);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn embed_two_positions_by_hand() {
    let mut cfg = tiny_config(12);
    cfg.d_model = 4;
    cfg.n_heads = 1;
    let mut state = ModelState::<f64>::new(cfg, 0).unwrap();
    let p = &mut state.params;
    for t in [&mut p.token, &mut p.position, &mut p.entity, &mut p.triple, &mut p.token_type] {
        t.fill_zero();
    }
    p.token.row_mut(10).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    p.token.row_mut(11).copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
    p.position.row_mut(0).copy_from_slice(&[0.5, 0.0, 0.0, 0.0]);
    p.position.row_mut(1).copy_from_slice(&[0.0, 0.5, 0.0, 0.0]);
    p.entity.row_mut(2).copy_from_slice(&[0.0, 0.0, 0.0, 1.0]);
    p.triple.row_mut(3).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    p.token_type.row_mut(1).copy_from_slice(&[0.0, 1.0, 1.0, 0.0]);
    p.embed_ln.gain.data.copy_from_slice(&[1.0, 2.0, 1.0, 1.0]);
    p.embed_ln.bias.data.copy_from_slice(&[0.0, 0.0, 0.0, -1.0]);
    let mut seq = toy_seq(&[10, 11], 1);
    seq.entity_ids = vec![2, 0];
    seq.triple_ids = vec![3, 0];
    seq.type_ids = vec![0, 1];
    // row 0 sum: [2.5, 2, 3, 5]; mean 3.125, var 1.296875
    // row 1 sum: [0, 1.5, 2, 0];  mean 0.875, var 0.796875
    let h = state.embed(&seq).unwrap();
    let expect = |sum: [f64; 4], mean: f64, var: f64| -> Vec<f64> {
        let r = 1.0 / (var + 1e-5f64).sqrt();
        let g = [1.0, 2.0, 1.0, 1.0];
        let b = [0.0, 0.0, 0.0, -1.0];
        (0..4).map(|j| (sum[j] - mean) * r * g[j] + b[j]).collect()
    };
    let e0 = expect([2.5, 2.0, 3.0, 5.0], 3.125, 1.296875);
    let e1 = expect([0.0, 1.5, 2.0, 0.0], 0.875, 0.796875);
    for j in 0..4 {
        assert!((h.row(0)[j] - e0[j]).abs() < 1e-12);
        assert!((h.row(1)[j] - e1[j]).abs() < 1e-12);
    }
}

#[test]
fn out_of_range_index_names_the_stream() {
    let state = ModelState::<f32>::new(tiny_config(50), 0).unwrap();
    let mut seq = toy_seq(&[1, 2, 3], 2);
    seq.triple_ids[1] = 24;
    match state.embed(&seq) {
        Err(Error::IndexOutOfRange { stream, index, size }) => {
            assert_eq!((stream, index, size), ("triple", 24, 24));
        }
        other => panic!("unexpected {other:?}"),
    }
    let mut seq = toy_seq(&[1, 60], 1);
    seq.type_ids[0] = 0;
    assert!(matches!(state.embed(&seq), Err(Error::IndexOutOfRange { stream: "token", .. })));
}

// ---------------------------------------------------------------- attention

fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, m: &AttentionMask) -> Tensor<f64> {
    let n = q.rows;
    let dk = q.cols as f64;
    let mut out = Tensor::zeros(n, v.cols);
    for i in 0..n {
        let keys: Vec<usize> = (0..n).filter(|&j| m.is_visible(i, j)).collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|&j| (0..q.cols).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / dk.sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        for (s, &j) in scores.iter().zip(&keys) {
            let w = (s - mx).exp() / z;
            for c in 0..v.cols {
                out.row_mut(i)[c] += w * v.row(j)[c];
            }
        }
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    let mut r = rng(11);
    let seq = toy_seq(&[1, 2, 3], 3);
    let m = causal(&seq);
    let (q, k, v) = (random_tensor(&mut r, 3, 4), random_tensor(&mut r, 3, 4), random_tensor(&mut r, 3, 4));
    let got = attention(&q, &k, &v, &m);
    let want = naive_attention(&q, &k, &v, &m);
    for (a, b) in got.data.iter().zip(&want.data) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn attention_only_column_zero_copies_first_value() {
    let mut r = rng(12);
    let seq = toy_seq(&[1, 2, 3, 4], 4);
    // hide every knowledge column except 0 by making the whole prefix "knowledge"
    let mut seq2 = seq.clone();
    seq2.knowledge_end = 3;
    let cols = KnowledgeColumns {
        visible: vec![true, false, false, false],
        triple_selected: vec![],
        fallback: false,
    };
    let m = compose_mask(&seq2, &cols, 0);
    let (q, k, v) = (random_tensor(&mut r, 4, 3), random_tensor(&mut r, 4, 3), random_tensor(&mut r, 4, 3));
    let out = attention(&q, &k, &v, &m);
    for i in 0..4 {
        assert_eq!(out.row(i), v.row(0));
    }
}

#[test]
fn zero_queries_and_keys_attend_uniformly() {
    let mut r = rng(13);
    let seq = toy_seq(&[1, 2, 3, 4], 4);
    let m = causal(&seq);
    let z = Tensor::<f64>::zeros(4, 2);
    let v = random_tensor(&mut r, 4, 2);
    let out = attention(&z, &z, &v, &m);
    for i in 0..4 {
        for c in 0..2 {
            let mean = (0..=i).map(|j| v.row(j)[c]).sum::<f64>() / (i + 1) as f64;
            assert!((out.row(i)[c] - mean).abs() < 1e-12);
        }
    }
}

// ---------------------------------------------------------------- forward

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let m = x.iter().sum::<f64>() / d;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(a, (gg, bb))| (a - m) / (v + 1e-5).sqrt() * gg + bb)
        .collect()
}

fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols)
        .map(|o| b.data[o] + (0..w.rows).map(|i| x[i] * w.row(i)[o]).sum::<f64>())
        .collect()
}

/// Dense re-implementation with `Vec` rows and explicit loops.
fn naive_forward(state: &ModelState<f64>, seq: &InputSequence, m: &AttentionMask) -> Vec<Vec<f64>> {
    let p = &state.params;
    let cfg = &state.config;
    let n = seq.len();
    let d = cfg.d_model;
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let e: Vec<f64> = (0..d)
                .map(|c| {
                    p.token.row(seq.token_ids[i])[c]
                        + p.position.row(seq.position_ids[i])[c]
                        + p.entity.row(seq.entity_ids[i])[c]
                        + p.triple.row(seq.triple_ids[i])[c]
                        + p.token_type.row(seq.type_ids[i])[c]
                })
                .collect();
            ln(&e, &p.embed_ln.gain.data, &p.embed_ln.bias.data)
        })
        .collect();
    let heads = cfg.n_heads;
    let dk = d / heads;
    for b in &p.blocks {
        let a: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &b.ln1.gain.data, &b.ln1.bias.data)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &b.w_q, &b.b_q)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &b.w_k, &b.b_k)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &b.w_v, &b.b_v)).collect();
        let mut ctx = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..n {
                let keys: Vec<usize> = (0..n).filter(|&j| m.is_visible(i, j)).collect();
                let s: Vec<f64> = keys
                    .iter()
                    .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|t| (t - mx).exp()).sum();
                for (t, &j) in s.iter().zip(&keys) {
                    for c in cols.clone() {
                        ctx[i][c] += (t - mx).exp() / z * v[j][c];
                    }
                }
            }
        }
        for i in 0..n {
            let o = affine(&ctx[i], &b.w_o, &b.b_o);
            for c in 0..d {
                x[i][c] += o[c];
            }
            let bb = ln(&x[i], &b.ln2.gain.data, &b.ln2.bias.data);
            let hdn: Vec<f64> = affine(&bb, &b.w_ff1, &b.b_ff1)
                .into_iter()
                .map(|u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                .collect();
            let f = affine(&hdn, &b.w_ff2, &b.b_ff2);
            for c in 0..d {
                x[i][c] += f[c];
            }
        }
    }
    x.iter()
        .map(|r| {
            let h = ln(r, &p.final_ln.gain.data, &p.final_ln.bias.data);
            (0..cfg.vocab_size)
                .map(|t| (0..d).map(|c| h[c] * p.token.row(t)[c]).sum())
                .collect()
        })
        .collect()
}

fn perturb_biases(state: &mut ModelState<f64>, seed: u64) {
    // init leaves biases at zero and gains at one; move them so they are exercised
    let mut r = rng(seed);
    for t in state.params.tensors_mut() {
        if t.rows == 1 {
            for v in &mut t.data {
                *v += r.gen_range(-0.3..0.3);
            }
        }
    }
}

#[test]
fn forward_matches_dense_oracle() {
    let mut cfg = tiny_config(50);
    cfg.d_model = 8;
    let mut state = ModelState::<f64>::new(cfg, 21).unwrap();
    perturb_biases(&mut state, 22);
    for t in state.params.tensors_mut() {
        t.scale(10.0);
    }
    let (g, enc) = random_encoded(&mut rng(23), 5, true);
    let cols = hide_triples(&enc.seq, &[0]);
    let m = compose_mask(&enc.seq, &cols, 0);
    let logits = state.forward(&enc.seq, &m).unwrap();
    let want = naive_forward(&state, &enc.seq, &m);
    assert!(g.triples().len() >= 1);
    for i in 0..enc.seq.len() {
        for t in 0..50 {
            assert!((logits.row(i)[t] - want[i][t]).abs() < 1e-8, "row {i} token {t}");
        }
    }
}

#[test]
fn zero_block_weights_leave_embeddings_and_head() {
    let cfg = tiny_config(50);
    let mut state = ModelState::<f64>::new(cfg, 31).unwrap();
    for b in &mut state.params.blocks {
        for t in [&mut b.w_q, &mut b.w_k, &mut b.w_v, &mut b.w_o, &mut b.w_ff1, &mut b.w_ff2] {
            t.fill_zero();
        }
    }
    let (_, enc) = random_encoded(&mut rng(32), 4, true);
    let m = causal(&enc.seq);
    let logits = state.forward(&enc.seq, &m).unwrap();
    let h0 = state.embed(&enc.seq).unwrap();
    let p = &state.params;
    for i in 0..enc.seq.len() {
        let h = ln(h0.row(i), &p.final_ln.gain.data, &p.final_ln.bias.data);
        for t in 0..50 {
            let want: f64 = (0..16).map(|c| h[c] * p.token.row(t)[c]).sum();
            assert!((logits.row(i)[t] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn forward_is_deterministic_per_copy() {
    let state = ModelState::<f32>::new(tiny_config(50), 41).unwrap();
    let (_, enc) = random_encoded(&mut rng(42), 6, true);
    let m = compose_mask(&enc.seq, &enc.columns, 0);
    let a = state.forward(&enc.seq, &m).unwrap();
    let b = state.forward(&enc.seq.clone(), &m.clone()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_parameters_fail_fast() {
    let mut state = ModelState::<f32>::new(tiny_config(50), 43).unwrap();
    state.params.blocks[0].w_ff1.data[5] = f32::NAN;
    let seq = toy_seq(&[1, 10, 11, 12], 2);
    assert!(matches!(state.forward(&seq, &causal(&seq)), Err(Error::NonFinite(_))));
}

// ---------------------------------------------------------------- loss

#[test]
fn uniform_logits_give_log_vocab() {
    let seq = toy_seq(&[1, 2, 3, 4, 5], 2);
    let logits = Tensor::<f64>::filled(5, 50, 0.7);
    let (l, g) = loss(&logits, &seq).unwrap();
    assert!((l - 50f64.ln()).abs() < 1e-12);
    // rows outside the predicting range carry no gradient
    assert!(g.row(0).iter().chain(g.row(4)).all(|v| *v == 0.0));
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    let seq = toy_seq(&[1, 2, 3, 4], 1);
    let mut logits = Tensor::<f64>::zeros(4, 10);
    for p in 0..3 {
        logits.row_mut(p)[seq.token_ids[p + 1]] = 60.0;
    }
    assert!(loss(&logits, &seq).unwrap().0 < 1e-20);
}

#[test]
fn loss_matches_per_token_oracle() {
    let mut r = rng(51);
    let seq = toy_seq(&[1, 7, 8, 9, 3, 6], 3); // 3 response tokens
    let logits = random_tensor(&mut r, 6, 10);
    let (l, _) = loss(&logits, &seq).unwrap();
    let mut want = 0.0;
    for p in 2..5 {
        let row = logits.row(p);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want -= (row[seq.token_ids[p + 1]].exp() / z).ln();
    }
    assert!((l - want / 3.0).abs() < 1e-10);
}

#[test]
fn empty_response_is_an_error() {
    let seq = toy_seq(&[1, 2, 3], 3);
    let logits = Tensor::<f64>::zeros(3, 10);
    assert!(matches!(loss(&logits, &seq), Err(Error::EmptyResponse(_))));
}

// ---------------------------------------------------------------- backward

#[test]
fn unused_embedding_rows_get_zero_gradient() {
    let state = ModelState::<f64>::new(tiny_config(50), 61).unwrap();
    let (_, enc) = random_encoded(&mut rng(62), 4, true);
    let m = compose_mask(&enc.seq, &enc.columns, 0);
    let (_, g) = state.loss_and_grad(&enc.seq, &m, None).unwrap();
    let max_pos = enc.seq.len();
    assert!(g.position.row(max_pos + 3).iter().all(|v| *v == 0.0));
    let max_ent = *enc.seq.entity_ids.iter().max().unwrap();
    assert!(g.entity.row(max_ent + 1).iter().all(|v| *v == 0.0));
}

/// Central differences at step 1e-5 over a spread of parameters. The relative
/// error uses `max(|a|, |n|, 1e-6)` as denominator so that exact zeros compare
/// on absolute error.
#[test]
fn gradients_match_finite_differences() {
    let vocab = small_vocab();
    assert_eq!(vocab.len(), 50);
    let mut state = ModelState::<f64>::new(tiny_config(50), 71).unwrap();
    perturb_biases(&mut state, 72);
    let (_, enc) = random_encoded(&mut rng(73), 4, true);
    let m = compose_mask(&enc.seq, &enc.columns, 0);
    let (_, analytic) = state.loss_and_grad(&enc.seq, &m, None).unwrap();

    let mut r = rng(74);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    let n_tensors = state.params.tensors().len();
    for ti in 0..n_tensors {
        let len = state.params.tensors()[ti].len();
        for _ in 0..6 {
            picks.push((ti, r.gen_range(0..len)));
        }
    }
    // embedding rows that the sequence actually touches: tensors 0..5
    let streams = [
        &enc.seq.token_ids,
        &enc.seq.position_ids,
        &enc.seq.entity_ids,
        &enc.seq.triple_ids,
        &enc.seq.type_ids,
    ];
    for (ti, ids) in streams.iter().enumerate() {
        for _ in 0..14 {
            let row = ids[r.gen_range(0..ids.len())];
            picks.push((ti, row * 16 + r.gen_range(0..16)));
        }
    }
    assert!(picks.len() >= 200);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for &(ti, j) in &picks {
        let base = state.params.tensors()[ti].data[j];
        state.params.tensors_mut()[ti].data[j] = base + h;
        let up = state.response_loss(&enc.seq, &m).unwrap();
        state.params.tensors_mut()[ti].data[j] = base - h;
        let down = state.response_loss(&enc.seq, &m).unwrap();
        state.params.tensors_mut()[ti].data[j] = base;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.tensors()[ti].data[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-3, "max relative error {worst}");
}

#[test]
fn gradient_steps_memorize_one_sample() {
    let mut state = ModelState::<f32>::new(tiny_config(50), 81).unwrap();
    let (_, enc) = random_encoded(&mut rng(82), 3, true);
    let m = compose_mask(&enc.seq, &enc.columns, 0);
    let initial = state.response_loss(&enc.seq, &m).unwrap();
    for _ in 0..50 {
        let (_, g) = state.loss_and_grad(&enc.seq, &m, None).unwrap();
        let mut step = g;
        step.scale(-0.5);
        state.params.add_assign(&step);
    }
    let last = state.response_loss(&enc.seq, &m).unwrap();
    assert!(last < initial && last < 50f64.ln(), "{initial} -> {last}");
}

// ---------------------------------------------------------------- causality and isolation

#[test]
fn perturbing_a_token_leaves_earlier_logits_bit_identical() {
    let state = ModelState::<f32>::new(tiny_config(50), 91).unwrap();
    let (_, enc) = random_encoded(&mut rng(92), 5, true);
    let m = compose_mask(&enc.seq, &enc.columns, 0);
    let base = state.forward(&enc.seq, &m).unwrap();
    for j in [1, enc.seq.len() / 2, enc.seq.len() - 1] {
        let mut seq = enc.seq.clone();
        seq.token_ids[j] = if seq.token_ids[j] == 20 { 21 } else { 20 };
        let out = state.forward(&seq, &m).unwrap();
        for i in 0..j {
            assert_eq!(out.row(i), base.row(i), "row {i} changed after perturbing {j}");
        }
        assert_ne!(out.row(j), base.row(j));
    }
}

#[test]
fn masked_triple_does_not_reach_the_response() {
    let state = ModelState::<f32>::new(tiny_config(50), 93).unwrap();
    let mut r = rng(94);
    let (g, enc) = loop {
        let (g, enc) = random_encoded(&mut r, 5, true);
        if enc.seq.triple_spans.len() >= 2 {
            break (g, enc);
        }
    };
    assert!(g.triples().len() >= 2);
    let cols = hide_triples(&enc.seq, &[1]);
    let m = compose_mask(&enc.seq, &cols, 0);
    let base = state.forward(&enc.seq, &m).unwrap();
    let span = enc.seq.triple_spans[1];
    let mut seq = enc.seq.clone();
    for p in span.start..span.end {
        seq.token_ids[p] = 10 + (seq.token_ids[p] + 7) % 30;
        seq.entity_ids[p] = (seq.entity_ids[p] + 1) % 16;
    }
    let out = state.forward(&seq, &m).unwrap();
    for i in enc.seq.response_start - 1..enc.seq.len() {
        assert_eq!(out.row(i), base.row(i));
    }
}

// ---------------------------------------------------------------- sampling

fn context(seed: u64) -> (ModelState<f32>, InputSequence, KnowledgeColumns) {
    let state = ModelState::<f32>::new(tiny_config(50), seed).unwrap();
    let (_, enc) = random_encoded(&mut rng(seed + 1), 4, true);
    let mut seq = enc.seq.clone();
    let start = seq.response_start;
    for v in [
        &mut seq.token_ids,
        &mut seq.position_ids,
        &mut seq.entity_ids,
        &mut seq.triple_ids,
        &mut seq.type_ids,
    ] {
        v.truncate(start);
    }
    (state, seq, enc.columns)
}

fn greedy(state: &ModelState<f32>, ctx: &InputSequence, cols: &KnowledgeColumns, max: usize) -> Vec<usize> {
    let mut seq = ctx.clone();
    let mut out = vec![];
    while out.len() < max {
        let logits = state.next_token_logits(&seq, &compose_mask(&seq, cols, 0)).unwrap();
        let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        if best == EOS {
            break;
        }
        out.push(best);
        seq.push_response_token(best);
    }
    out
}

#[test]
fn top_k_one_is_greedy_for_any_seed() {
    let (state, ctx, cols) = context(101);
    let want = greedy(&state, &ctx, &cols, 12);
    for seed in [0, 1, 99] {
        let params = DecodingParams {
            top_k: 1,
            max_response_length: 12,
            seed,
            ..DecodingParams::default()
        };
        assert_eq!(sample_response(&state, &ctx, &cols, &params).unwrap(), want);
    }
}

#[test]
fn tiny_temperature_is_greedy() {
    let (state, ctx, cols) = context(111);
    let params = DecodingParams {
        temperature: 1e-6,
        top_k: 50,
        top_p: 1.0,
        max_response_length: 10,
        seed: 5,
    };
    assert_eq!(
        sample_response(&state, &ctx, &cols, &params).unwrap(),
        greedy(&state, &ctx, &cols, 10)
    );
}

#[test]
fn sampling_is_reproducible_and_appends_system_tokens() {
    let (state, ctx, cols) = context(121);
    let params = DecodingParams {
        temperature: 1.5,
        top_k: 40,
        top_p: 0.95,
        max_response_length: 15,
        seed: 7,
    };
    let a = sample_response(&state, &ctx, &cols, &params).unwrap();
    let b = sample_response(&state, &ctx, &cols, &params).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 15);
    let mut seq = ctx.clone();
    for &t in &a {
        seq.push_response_token(t);
    }
    let tail = ctx.len()..seq.len();
    assert!(seq.entity_ids[tail.clone()].iter().all(|v| *v == 0));
    assert!(seq.triple_ids[tail.clone()].iter().all(|v| *v == 0));
    assert!(seq.type_ids[tail].iter().all(|v| *v == 2));
}

#[test]
fn nucleus_keeps_smallest_prefix() {
    // probabilities after softmax: about 0.64, 0.24, 0.09, 0.03
    let logits = [3.0, 2.0, 1.0, 0.0];
    let params = DecodingParams {
        temperature: 1.0,
        top_k: 4,
        top_p: 0.6,
        ..DecodingParams::default()
    };
    let mut r = rng(1);
    for _ in 0..50 {
        assert_eq!(select_next(&logits, &params, &mut r), 0);
    }
    let params = DecodingParams { top_p: 0.85, ..params };
    let seen: std::collections::BTreeSet<usize> = (0..400).map(|_| select_next(&logits, &params, &mut r)).collect();
    assert_eq!(seen, [0, 1].into());
    let params = DecodingParams { top_k: 3, top_p: 1.0, ..params };
    let seen: std::collections::BTreeSet<usize> = (0..2000).map(|_| select_next(&logits, &params, &mut r)).collect();
    assert_eq!(seen, [0, 1, 2].into());
}

#[test]
fn params_cast_round_trips_through_f64() {
    let s = ModelState::<f32>::new(tiny_config(50), 131).unwrap();
    let back: Params<f32> = s.params.cast::<f64>().cast();
    assert_eq!(back, s.params);
}
