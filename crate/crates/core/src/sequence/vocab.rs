use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::DatasetSplit;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const Q: usize = 4;
pub const S: usize = 5;
pub const R: usize = 6;
pub const O: usize = 7;
pub const UNK: usize = 8;

pub const SPECIAL_TOKENS: [&str; 9] = [
    "[PAD]", "[BOS]", "[EOS]", "[SEP]", "[Q]", "[S]", "[R]", "[O]", "[UNK]",
];

/// Closed word-level vocabulary. Specials occupy ids `0..9` in the order of
/// [`SPECIAL_TOKENS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Collects every whitespace token of every turn and every graph surface,
    /// keeping those seen at least `min_freq` times. Order after the specials
    /// is frequency-descending, ties broken lexicographically.
    pub fn build(splits: &[&DatasetSplit], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Vocab("min_freq must be at least 1".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        fn bump(text: &str, counts: &mut BTreeMap<String, usize>) {
            for tok in text.split_whitespace() {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        for split in splits {
            // each turn is the question or the gold response of exactly one sample
            for s in &split.samples {
                bump(&s.question, &mut counts);
                bump(&s.gold_response, &mut counts);
            }
            for graph in split.graphs() {
                for e in graph.entities() {
                    bump(&e.surface, &mut counts);
                }
                for r in graph.relations() {
                    bump(&r.surface, &mut counts);
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::Vocab("cannot build a vocabulary from an empty corpus".into()));
        }
        let specials: HashSet<&str> = SPECIAL_TOKENS.iter().copied().collect();
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !specials.contains(w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(Error::Vocab("vocabulary must start with the special tokens".into()));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token at line {}", id + 1)));
            }
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{tok}`")));
            }
        }
        Ok(Vocabulary {
            id_to_token: tokens,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Joins the surface forms of all non-special ids with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIAL_TOKENS.len() && id < self.len())
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The on-disk form: one token per line, LF terminated.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Hex SHA-256 of the file form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
