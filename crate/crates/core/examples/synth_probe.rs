//! Trains on the synthetic corpus and reports per-epoch timing and held-out scores.

use std::time::Instant;

use kgdialog_core::eval::{evaluate_state, EvalOptions};
use kgdialog_core::kg::{generate_synthetic, split_synthetic, SynthConfig};
use kgdialog_core::model::{Ablation, DecodingParams, ModelConfig};
use kgdialog_core::sequence::Vocabulary;
use kgdialog_core::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6.25e-5);
    let ablation = Ablation::parse_list(args.get(3).map(String::as_str).unwrap_or("none")).unwrap();
    let n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2000);

    let all = generate_synthetic(&SynthConfig { n_dialogues: n, ..SynthConfig::default() });
    let [tr, va, te] = split_synthetic(all);
    let vocab = Vocabulary::build(&[&tr, &va, &te], 1).unwrap();
    let model = ModelConfig { vocab_size: vocab.len(), ablation, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs, learning_rate: lr, ..TrainConfig::default() };
    println!("train samples {} vocab {}", tr.len(), vocab.len());
    let t0 = Instant::now();
    let out = train(&tr, &va, &vocab, model, &cfg, &mut |r| {
        println!("epoch {} train {:.4} valid {:.4} at {:.1}s", r.epoch, r.train_loss, r.valid_loss, t0.elapsed().as_secs_f64())
    })
    .unwrap();
    let opts = EvalOptions {
        decoding: DecodingParams::default(),
        k_entity: 7,
        k_relation: 7,
        limits: cfg.limits,
        threads: 1,
        hyp_from_gold: false,
    };
    let t1 = Instant::now();
    let rep = evaluate_state(&out.best, &vocab, &te, &opts).unwrap();
    print!("{}", rep.table());
    println!("eval {:.1}s", t1.elapsed().as_secs_f64());
    for s in rep.samples.iter().take(4) {
        println!("Q: {} | G: {} | H: {}", s.question, s.gold, s.hypothesis);
    }
}
