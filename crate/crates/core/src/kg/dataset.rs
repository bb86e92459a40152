use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    check_alternation, normalize_text, DatasetSplit, DialogueSample, DialogueTurn,
    KnowledgeGraph, Speaker, SplitName,
};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawFile {
    dialogues: Vec<Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    id: String,
    domain: String,
    kg: RawKg,
    turns: Vec<RawTurn>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKg {
    triples: Vec<[String; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    speaker: Speaker,
    text: String,
}

#[derive(Serialize)]
struct RawFileOut<'a> {
    dialogues: Vec<&'a RawDialogue>,
}

/// Reads a normalized dataset file and expands every user/system exchange
/// into a [`DialogueSample`].
pub fn load_dataset(path: impl AsRef<Path>, split: SplitName) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_dataset_str(&text, split).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn load_dataset_str(text: &str, split: SplitName) -> Result<DatasetSplit> {
    let raw: RawFile = serde_json::from_str(text).map_err(|e| Error::Format {
        path: Default::default(),
        message: e.to_string(),
    })?;
    let mut samples = Vec::new();
    for (index, value) in raw.dialogues.into_iter().enumerate() {
        let fallback_id = value
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("#{index}"));
        let dialogue: RawDialogue = serde_json::from_value(value).map_err(|e| Error::Parse {
            id: fallback_id,
            message: e.to_string(),
        })?;
        expand(dialogue, &mut samples)?;
    }
    Ok(DatasetSplit {
        name: split,
        samples,
    })
}

fn expand(raw: RawDialogue, out: &mut Vec<DialogueSample>) -> Result<()> {
    let id = raw.id;
    let graph = KnowledgeGraph::from_surfaces(raw.kg.kg_triples())
        .map_err(|e| Error::Parse {
            id: id.clone(),
            message: format!("field `kg`: {e}"),
        })?;
    let graph = Arc::new(graph);
    let turns: Vec<DialogueTurn> = raw
        .turns
        .into_iter()
        .map(|t| DialogueTurn {
            speaker: t.speaker,
            text: normalize_text(&t.text),
        })
        .collect();

    if turns.is_empty() {
        return Err(Error::Validation {
            id,
            message: "dialogue has no turns".into(),
        });
    }
    check_alternation(&id, &turns)?;
    if !turns.len().is_multiple_of(2) {
        return Err(Error::Validation {
            id,
            message: "the final turn must be a system turn".into(),
        });
    }

    for (exchange, start) in (0..turns.len()).step_by(2).enumerate() {
        let sample = DialogueSample {
            id: format!("{id}#{exchange}"),
            dialogue_id: id.clone(),
            domain: raw.domain.clone(),
            graph: Arc::clone(&graph),
            history: turns[..start].to_vec(),
            question: turns[start].text.clone(),
            gold_response: turns[start + 1].text.clone(),
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(())
}

/// Reads a standalone graph file, `{"triples": [[s, r, o], ...]}`.
pub fn load_graph(path: impl AsRef<Path>) -> Result<KnowledgeGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_graph_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_graph_str(text: &str) -> Result<KnowledgeGraph> {
    let raw: RawKg = serde_json::from_str(text).map_err(|e| Error::Format {
        path: Default::default(),
        message: e.to_string(),
    })?;
    KnowledgeGraph::from_surfaces(raw.kg_triples())
}

impl RawKg {
    fn kg_triples(&self) -> impl Iterator<Item = (&String, &String, &String)> {
        self.triples.iter().map(|[s, r, o]| (s, r, o))
    }
}

/// Collapses samples back into dialogues (one per run of equal dialogue ids,
/// taking the turns of its last exchange).
fn to_raw(split: &DatasetSplit) -> Vec<RawDialogue> {
    let mut dialogues: Vec<RawDialogue> = Vec::new();
    for (i, sample) in split.samples.iter().enumerate() {
        let is_last = split
            .samples
            .get(i + 1)
            .is_none_or(|next| next.dialogue_id != sample.dialogue_id);
        if !is_last {
            continue;
        }
        let mut turns: Vec<RawTurn> = sample
            .history
            .iter()
            .map(|t| RawTurn {
                speaker: t.speaker,
                text: t.text.clone(),
            })
            .collect();
        turns.push(RawTurn {
            speaker: Speaker::User,
            text: sample.question.clone(),
        });
        turns.push(RawTurn {
            speaker: Speaker::System,
            text: sample.gold_response.clone(),
        });
        dialogues.push(RawDialogue {
            id: sample.dialogue_id.clone(),
            domain: sample.domain.clone(),
            kg: RawKg {
                triples: sample.graph.surface_triples(),
            },
            turns,
        });
    }
    dialogues
}

pub fn to_json(split: &DatasetSplit) -> String {
    let raw = to_raw(split);
    let file = RawFileOut {
        dialogues: raw.iter().collect(),
    };
    serde_json::to_string_pretty(&file).expect("dataset serialization cannot fail")
}

pub fn write_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = to_json(split);
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"dialogues":[{"id":"d1","domain":"navigate",
        "kg":{"triples":[["starbucks","distance","4 miles"],["starbucks","address","792 bedoin st"]]},
        "turns":[{"speaker":"user","text":"Where is Starbucks?"},
                 {"speaker":"system","text":"starbucks is 4 miles away"}]}]}"#;

    #[test]
    fn graph_file() {
        let g = load_graph_str(r#"{"triples":[["Starbucks","distance","4 miles"]]}"#).unwrap();
        assert_eq!(g.surface_triple(0), ("starbucks", "distance", "4 miles"));
        assert!(load_graph_str(r#"{"triples":[["a","b"]]}"#).is_err());
        assert!(load_graph_str(r#"{"edges":[]}"#).is_err());
    }

    #[test]
    fn minimal_file() {
        let split = load_dataset_str(MINIMAL, SplitName::Train).unwrap();
        assert_eq!(split.len(), 1);
        let s = &split.samples[0];
        assert_eq!(s.graph.triples().len(), 2);
        assert_eq!(s.question, "where is starbucks ?");
        assert!(s.history.is_empty());
    }

    #[test]
    fn adjacent_user_turns_fail_validation() {
        let text = r#"{"dialogues":[{"id":"bad","domain":"x","kg":{"triples":[]},
            "turns":[{"speaker":"user","text":"a"},{"speaker":"user","text":"b"}]}]}"#;
        let err = load_dataset_str(text, SplitName::Train).unwrap_err();
        assert!(matches!(err, Error::Validation { ref id, .. } if id == "bad"), "{err}");
    }

    #[test]
    fn schema_error_names_id_and_field() {
        let text = r#"{"dialogues":[{"id":"d7","kg":{"triples":[]},"turns":[]}]}"#;
        let err = load_dataset_str(text, SplitName::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d7") && msg.contains("domain"), "{msg}");
    }

    #[test]
    fn trailing_user_turn_is_rejected() {
        let text = r#"{"dialogues":[{"id":"d","domain":"x","kg":{"triples":[]},
            "turns":[{"speaker":"user","text":"a"},{"speaker":"system","text":"b"},
                     {"speaker":"user","text":"c"}]}]}"#;
        assert!(load_dataset_str(text, SplitName::Train).is_err());
    }

    #[test]
    fn empty_question_is_rejected() {
        let text = r#"{"dialogues":[{"id":"d","domain":"x","kg":{"triples":[]},
            "turns":[{"speaker":"user","text":"  "},{"speaker":"system","text":"b"}]}]}"#;
        assert!(load_dataset_str(text, SplitName::Train).is_err());
    }

    #[test]
    fn multi_turn_expansion() {
        let text = r#"{"dialogues":[{"id":"d","domain":"x","kg":{"triples":[["a","r","b"]]},
            "turns":[{"speaker":"user","text":"q1"},{"speaker":"system","text":"s1"},
                     {"speaker":"user","text":"q2"},{"speaker":"system","text":"s2"}]}]}"#;
        let split = load_dataset_str(text, SplitName::Valid).unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(split.samples[1].history.len(), 2);
        assert_eq!(split.samples[1].id, "d#1");
        assert_eq!(split.dialogue_count(), 1);
        assert!(Arc::ptr_eq(&split.samples[0].graph, &split.samples[1].graph));
    }

    #[test]
    fn roundtrip_through_json() {
        let split = load_dataset_str(MINIMAL, SplitName::Test).unwrap();
        let again = load_dataset_str(&to_json(&split), SplitName::Test).unwrap();
        assert_eq!(split, again);
    }
}
