use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, DialogueSample, DialogueTurn, KnowledgeGraph, Speaker, SplitName};

const RELATION_WORDS: &[&str] = &[
    "distance", "address", "phone", "cuisine", "price", "rating", "area", "traffic", "parking",
    "weather", "time", "date", "room", "agenda", "location", "postcode",
];
const TEMPLATE_WORDS: &[&str] = &["what", "is", "the", "of", "?"];
const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

const SUBJECT_POOL: usize = 200;
const OBJECT_POOL: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub n_subjects_per_graph: usize,
    pub n_relations: usize,
    pub vocab_pool_seed: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogues: 2000,
            n_subjects_per_graph: 5,
            n_relations: 4,
            vocab_pool_seed: 0,
            seed: 1,
        }
    }
}

struct Pools {
    subjects: Vec<String>,
    relations: Vec<String>,
    objects: Vec<String>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            let onset = ONSETS[rng.gen_range(0..ONSETS.len())];
            let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
            format!("{onset}{vowel}")
        })
        .collect()
}

fn build_pools(seed: u64, n_objects_needed: usize, n_relations: usize) -> Pools {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
    taken.extend(RELATION_WORDS.iter().map(|w| w.to_string()));

    let mut draw = |rng: &mut ChaCha8Rng, count: usize, syllables: usize| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let w = pseudo_word(rng, syllables);
            if taken.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    };

    let subjects = draw(&mut rng, SUBJECT_POOL, 3);
    let objects = draw(&mut rng, OBJECT_POOL.max(2 * n_objects_needed), 2);
    let mut relations: Vec<String> = RELATION_WORDS.iter().map(|w| w.to_string()).collect();
    if n_relations > relations.len() {
        let extra = draw(&mut rng, n_relations - relations.len(), 4);
        relations.extend(extra);
    }
    Pools {
        subjects,
        relations,
        objects,
    }
}

/// Generates template dialogues over random graphs. Each question asks for
/// one (subject, relation) cell and the gold response names its object.
pub fn generate_synthetic(config: &SynthConfig) -> DatasetSplit {
    assert!(config.n_subjects_per_graph >= 1, "need at least one subject");
    assert!(config.n_relations >= 1, "need at least one relation");
    let cells = config.n_subjects_per_graph * config.n_relations;
    let pools = build_pools(config.vocab_pool_seed, cells, config.n_relations);
    let n_subjects = config.n_subjects_per_graph.min(pools.subjects.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut samples = Vec::new();
    for d in 0..config.n_dialogues {
        let subjects: Vec<&String> = pools.subjects.choose_multiple(&mut rng, n_subjects).collect();
        let relations: Vec<&String> = pools
            .relations
            .choose_multiple(&mut rng, config.n_relations)
            .collect();
        let objects: Vec<&String> = pools.objects.choose_multiple(&mut rng, cells).collect();

        let mut triples = Vec::with_capacity(cells);
        for (si, s) in subjects.iter().enumerate() {
            for (ri, r) in relations.iter().enumerate() {
                triples.push((s.as_str(), r.as_str(), objects[si * config.n_relations + ri].as_str()));
            }
        }
        let graph = Arc::new(
            KnowledgeGraph::from_surfaces(triples.iter().copied())
                .expect("synthetic surfaces are non-empty"),
        );

        let exchanges = rng.gen_range(1..=3).min(triples.len());
        let asked: Vec<&(&str, &str, &str)> = triples.choose_multiple(&mut rng, exchanges).collect();
        let dialogue_id = format!("synth-{d:05}");
        let mut history = Vec::new();
        for (k, (s, r, o)) in asked.into_iter().enumerate() {
            let question = format!("what is the {r} of {s} ?");
            let answer = format!("the {r} of {s} is {o}");
            samples.push(DialogueSample {
                id: format!("{dialogue_id}#{k}"),
                dialogue_id: dialogue_id.clone(),
                domain: "synthetic".into(),
                graph: Arc::clone(&graph),
                history: history.clone(),
                question: question.clone(),
                gold_response: answer.clone(),
            });
            history.push(DialogueTurn::new(Speaker::User, &question));
            history.push(DialogueTurn::new(Speaker::System, &answer));
        }
    }
    DatasetSplit {
        name: SplitName::Train,
        samples,
    }
}

/// Splits by dialogue into 80/10/10 train/valid/test, preserving order.
pub fn split_synthetic(all: DatasetSplit) -> [DatasetSplit; 3] {
    let n = all.dialogue_count();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut index = 0usize;
    let mut last: Option<String> = None;
    for sample in all.samples {
        if last.as_deref() != Some(sample.dialogue_id.as_str()) {
            if last.is_some() {
                index += 1;
            }
            last = Some(sample.dialogue_id.clone());
        }
        let part = if index < n_train {
            0
        } else if index < n_train + n_valid {
            1
        } else {
            2
        };
        parts[part].push(sample);
    }
    let [train, valid, test] = parts;
    [
        DatasetSplit {
            name: SplitName::Train,
            samples: train,
        },
        DatasetSplit {
            name: SplitName::Valid,
            samples: valid,
        },
        DatasetSplit {
            name: SplitName::Test,
            samples: test,
        },
    ]
}
