//! Knowledge graphs, dialogues and dataset splits.
//!
//! Every piece of text is normalized once, when it enters the system, so the
//! rest of the pipeline can compare surfaces with plain string equality.

mod dataset;
mod synth;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, load_dataset_str, load_graph, load_graph_str, to_json, write_dataset};
pub use synth::{generate_synthetic, split_synthetic, SynthConfig};

const TERMINAL_PUNCT: &[char] = &['?', '!', '.', ',', ';', ':'];

/// Lowercases, collapses whitespace and detaches trailing punctuation so that
/// `"Where is Starbucks?"` becomes `"where is starbucks ?"`.
pub fn normalize_text(text: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let mut core = word.as_str();
        let mut trailing = Vec::new();
        while core.chars().count() > 1 {
            let last = core.chars().next_back().expect("non-empty");
            if !TERMINAL_PUNCT.contains(&last) {
                break;
            }
            trailing.push(last.to_string());
            core = &core[..core.len() - last.len_utf8()];
        }
        out.push(core.to_string());
        out.extend(trailing.into_iter().rev());
    }
    out.join(" ")
}

/// Number of whitespace tokens in already-normalized text.
pub fn token_len(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub id: usize,
    pub surface: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// A multi-relational graph whose entity and relation ids are dense and
/// assigned in first-appearance order of the source triples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<RelationLabel>,
    triples: Vec<Triple>,
}

/// All triples sharing one subject, in emission order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectGroup {
    pub subject: usize,
    pub triples: Vec<usize>,
}

impl KnowledgeGraph {
    /// Builds a graph from surface triples. Surfaces are normalized; repeated
    /// triples are dropped.
    pub fn from_surfaces<I, S>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: AsRef<str>,
    {
        let mut graph = KnowledgeGraph::default();
        let mut entity_ids: HashMap<String, usize> = HashMap::new();
        let mut relation_ids: HashMap<String, usize> = HashMap::new();
        let mut seen = BTreeSet::new();

        for (index, (s, r, o)) in triples.into_iter().enumerate() {
            let [s, r, o] = [s.as_ref(), r.as_ref(), o.as_ref()].map(normalize_text);
            if s.is_empty() || r.is_empty() || o.is_empty() {
                return Err(Error::Graph(format!("triple {index} has an empty surface")));
            }
            let subject = intern(&mut entity_ids, &mut graph.entities, s, |id, surface| {
                Entity { id, surface }
            });
            let relation = intern(&mut relation_ids, &mut graph.relations, r, |id, surface| {
                RelationLabel { id, surface }
            });
            let object = intern(&mut entity_ids, &mut graph.entities, o, |id, surface| {
                Entity { id, surface }
            });
            let triple = Triple {
                subject,
                relation,
                object,
            };
            if seen.insert((subject, relation, object)) {
                graph.triples.push(triple);
            }
        }
        Ok(graph)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[RelationLabel] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn entity_surface(&self, id: usize) -> &str {
        &self.entities[id].surface
    }

    pub fn relation_surface(&self, id: usize) -> &str {
        &self.relations[id].surface
    }

    pub fn surface_triple(&self, index: usize) -> (&str, &str, &str) {
        let t = self.triples[index];
        (
            self.entity_surface(t.subject),
            self.relation_surface(t.relation),
            self.entity_surface(t.object),
        )
    }

    pub fn surface_triples(&self) -> Vec<[String; 3]> {
        (0..self.triples.len())
            .map(|i| {
                let (s, r, o) = self.surface_triple(i);
                [s.to_string(), r.to_string(), o.to_string()]
            })
            .collect()
    }

    /// Triples grouped by subject, groups ordered by the first triple that
    /// mentions each subject.
    pub fn subject_groups(&self) -> Vec<SubjectGroup> {
        let mut groups: Vec<SubjectGroup> = Vec::new();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        for (index, triple) in self.triples.iter().enumerate() {
            let g = *slot.entry(triple.subject).or_insert_with(|| {
                groups.push(SubjectGroup {
                    subject: triple.subject,
                    triples: Vec::new(),
                });
                groups.len() - 1
            });
            groups[g].triples.push(index);
        }
        groups
    }
}

fn intern<T>(
    ids: &mut HashMap<String, usize>,
    items: &mut Vec<T>,
    surface: String,
    make: impl FnOnce(usize, String) -> T,
) -> usize {
    if let Some(&id) = ids.get(&surface) {
        return id;
    }
    let id = items.len();
    ids.insert(surface.clone(), id);
    items.push(make(id, surface));
    id
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::User => Speaker::System,
            Speaker::System => Speaker::User,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::User => f.write_str("user"),
            Speaker::System => f.write_str("system"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
}

impl DialogueTurn {
    pub fn new(speaker: Speaker, text: &str) -> Self {
        DialogueTurn {
            speaker,
            text: normalize_text(text),
        }
    }
}

/// One (history, question, gold response) exchange of a dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSample {
    /// `<dialogue id>#<exchange index>`.
    pub id: String,
    pub dialogue_id: String,
    pub domain: String,
    pub graph: Arc<KnowledgeGraph>,
    pub history: Vec<DialogueTurn>,
    pub question: String,
    pub gold_response: String,
}

impl DialogueSample {
    /// Checks alternation of the history and a non-empty question.
    pub fn validate(&self) -> Result<()> {
        check_alternation(&self.id, &self.history)?;
        if self.history.last().map(|t| t.speaker) == Some(Speaker::User) {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: "history must end with a system turn before the question".into(),
            });
        }
        if self.question.trim().is_empty() {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: "question is empty".into(),
            });
        }
        Ok(())
    }
}

pub(crate) fn check_alternation(id: &str, turns: &[DialogueTurn]) -> Result<()> {
    let mut expected = Speaker::User;
    for (i, turn) in turns.iter().enumerate() {
        if turn.speaker != expected {
            return Err(Error::Validation {
                id: id.to_string(),
                message: format!(
                    "turn {i} is by {} but {expected} was expected (turns must alternate, starting with user)",
                    turn.speaker
                ),
            });
        }
        expected = expected.other();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" | "validation" | "dev" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<DialogueSample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of distinct dialogues (consecutive runs of one dialogue id).
    pub fn dialogue_count(&self) -> usize {
        let mut count = 0;
        let mut last: Option<&str> = None;
        for s in &self.samples {
            if last != Some(s.dialogue_id.as_str()) {
                count += 1;
                last = Some(&s.dialogue_id);
            }
        }
        count
    }

    /// Graphs of the split, one per dialogue.
    pub fn graphs(&self) -> impl Iterator<Item = &KnowledgeGraph> {
        let mut last: Option<&str> = None;
        self.samples.iter().filter_map(move |s| {
            if last == Some(s.dialogue_id.as_str()) {
                None
            } else {
                last = Some(&s.dialogue_id);
                Some(s.graph.as_ref())
            }
        })
    }
}

/// Union of entity surfaces over all graphs, longest (in tokens) first and
/// lexicographic within a length, ready for longest-match scanning.
pub fn entity_lexicon(splits: &[&DatasetSplit]) -> Vec<String> {
    let mut surfaces = BTreeSet::new();
    for split in splits {
        for graph in split.graphs() {
            for e in graph.entities() {
                surfaces.insert(e.surface.clone());
            }
        }
    }
    let mut lexicon: Vec<String> = surfaces.into_iter().collect();
    lexicon.sort_by(|a, b| token_len(b).cmp(&token_len(a)).then_with(|| a.cmp(b)));
    lexicon
}
