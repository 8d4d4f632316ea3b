//! Data model, synthetic tasks and tokenization.
//!
//! Every task maps a prompt to a single deterministic target, which doubles as
//! the reward oracle used in evaluation. Text is a string of single-character
//! symbols; token ids 0, 1, 2 are reserved for BOS, EOS and PAD.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::seed;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const RESERVED: usize = 3;
pub const MAX_VOCAB: usize = 64;

/// Symbols of the default toy vocabulary: lowercase a–j then digits 0–9.
pub const DEFAULT_SYMBOLS: &str = "abcdefghij0123456789";
/// Fixed answer of the constant-refusal task.
pub const REFUSAL_TARGET: &str = "no";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("out-of-vocabulary character {0:?}")]
    OutOfVocabulary(char),
    #[error("token id {0} has no text form")]
    NotText(usize),
    #[error("duplicate vocabulary symbol {0:?}")]
    DuplicateSymbol(char),
    #[error("vocabulary of {0} tokens exceeds the limit of {MAX_VOCAB}")]
    VocabTooLarge(usize),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("task admits only {available} distinct prompts, {requested} requested")]
    NotEnoughPrompts { requested: usize, available: u128 },
    #[error("n must be at least 1")]
    EmptyCorpus,
    #[error("record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

/// Token table: reserved ids followed by single-character symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new(DEFAULT_SYMBOLS.chars()).expect("default vocabulary is valid")
    }
}

impl Vocab {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self, CorpusError> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut seen = BTreeSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(CorpusError::DuplicateSymbol(c));
            }
        }
        if symbols.len() + RESERVED > MAX_VOCAB {
            return Err(CorpusError::VocabTooLarge(symbols.len() + RESERVED));
        }
        Ok(Vocab { symbols })
    }

    /// The default symbols extended with whatever the task needs that they lack
    /// (the refusal answer, a custom alphabet).
    pub fn for_task(task: &TaskSpec) -> Result<Self, CorpusError> {
        let mut symbols: Vec<char> = DEFAULT_SYMBOLS.chars().collect();
        let extra = task.alphabet.chars().chain(match task.kind {
            TaskKind::ConstantRefusal => REFUSAL_TARGET.chars(),
            _ => "".chars(),
        });
        for c in extra {
            if !symbols.contains(&c) {
                symbols.push(c);
            }
        }
        Vocab::new(symbols)
    }

    /// Total number of token ids, reserved ones included.
    pub fn size(&self) -> usize {
        self.symbols.len() + RESERVED
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + RESERVED)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        text.chars()
            .map(|c| self.id_of(c).ok_or(CorpusError::OutOfVocabulary(c)))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, CorpusError> {
        ids.iter()
            .map(|&id| {
                id.checked_sub(RESERVED)
                    .and_then(|i| self.symbols.get(i).copied())
                    .ok_or(CorpusError::NotText(id))
            })
            .collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let text: String = self.symbols.iter().collect();
        s.serialize_str(&text)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Vocab::new(text.chars()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Reverse,
    Copy,
    SumMod10,
    ConstantRefusal,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reverse => "reverse",
            TaskKind::Copy => "copy",
            TaskKind::SumMod10 => "sum-mod-10",
            TaskKind::ConstantRefusal => "constant-refusal",
        }
    }

    fn default_alphabet(self) -> &'static str {
        match self {
            TaskKind::SumMod10 => "0123456789",
            _ => "abcdefghij",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A synthetic task. Serialized with keys in the order `kind`, `input_length`,
/// `alphabet`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_length: usize,
    pub alphabet: String,
}

impl TaskSpec {
    /// A task over its kind's default alphabet.
    pub fn new(kind: TaskKind, input_length: usize) -> Self {
        TaskSpec { kind, input_length, alphabet: kind.default_alphabet().to_string() }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |why: &str| Err(CorpusError::InvalidTask(why.to_string()));
        if self.input_length == 0 {
            return bad("input_length must be at least 1");
        }
        if self.alphabet.is_empty() {
            return bad("alphabet is empty");
        }
        let mut seen = BTreeSet::new();
        for c in self.alphabet.chars() {
            if !seen.insert(c) {
                return Err(CorpusError::InvalidTask(format!("alphabet repeats {c:?}")));
            }
        }
        if self.kind == TaskKind::SumMod10 && !self.alphabet.chars().all(|c| c.is_ascii_digit()) {
            return bad("sum-mod-10 needs a digit alphabet");
        }
        Ok(())
    }

    /// Longest response the sampler will produce for this task.
    pub fn max_response_len(&self) -> usize {
        2 * self.input_length + 2
    }

    /// Number of distinct prompts, saturating at `u128::MAX`.
    pub fn distinct_prompts(&self) -> u128 {
        let base = self.alphabet.chars().count() as u128;
        let mut total: u128 = 1;
        for _ in 0..self.input_length {
            total = total.saturating_mul(base);
        }
        total
    }

    /// The oracle target for `prompt`.
    pub fn target(&self, prompt: &str) -> String {
        match self.kind {
            TaskKind::Reverse => prompt.chars().rev().collect(),
            TaskKind::Copy => prompt.to_string(),
            TaskKind::SumMod10 => {
                let sum: u32 = prompt.chars().filter_map(|c| c.to_digit(10)).sum();
                (sum % 10).to_string()
            }
            TaskKind::ConstantRefusal => REFUSAL_TARGET.to_string(),
        }
    }

    fn prompt_from_index(&self, mut idx: u128) -> String {
        let alphabet: Vec<char> = self.alphabet.chars().collect();
        let base = alphabet.len() as u128;
        let mut out = Vec::with_capacity(self.input_length);
        for _ in 0..self.input_length {
            out.push(alphabet[(idx % base) as usize]);
            idx /= base;
        }
        out.into_iter().rev().collect()
    }
}

/// One SFT example. Keys: `id`, `prompt`, `target`, `task`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: String,
    pub prompt: String,
    pub target: String,
    pub task: TaskSpec,
}

impl PromptRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| {
            Err(CorpusError::InvalidRecord { id: self.id.clone(), reason: reason.to_string() })
        };
        if self.prompt.is_empty() || self.target.is_empty() {
            return invalid("prompt and target must be nonempty");
        }
        if self.task.target(&self.prompt) != self.target {
            return invalid("target does not match the task transform");
        }
        Ok(())
    }
}

/// Self-generated responses for one prompt. Keys: `id`, `responses`,
/// `temperature`, `top_p`, `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSet {
    pub id: String,
    pub responses: Vec<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

/// One chosen response and its rejected list. Keys: `id`, `prompt`, `chosen`,
/// `rejected`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: Vec<String>,
}

impl PreferenceRecord {
    /// Structural checks: `rejected` is nonempty and pairwise distinct.
    /// Unfiltered datasets (a% = 100) may legitimately reject the chosen
    /// string itself; see [`PreferenceRecord::validate_filtered`].
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.rejected.is_empty() {
            return Err(self.invalid("rejected list is empty"));
        }
        let mut seen = BTreeSet::new();
        for r in &self.rejected {
            if !seen.insert(r.as_str()) {
                return Err(self.invalid("rejected responses are not pairwise distinct"));
            }
        }
        Ok(())
    }

    /// [`PreferenceRecord::validate`] plus: no rejected entry equals `chosen`.
    pub fn validate_filtered(&self) -> Result<(), CorpusError> {
        self.validate()?;
        if self.rejected.iter().any(|r| r == &self.chosen) {
            return Err(self.invalid("a rejected response equals the chosen one"));
        }
        Ok(())
    }

    fn invalid(&self, reason: &str) -> CorpusError {
        CorpusError::InvalidRecord { id: self.id.clone(), reason: reason.to_string() }
    }
}

/// Record ids are `<task>-<index>` with a six-digit zero-padded index.
pub fn record_id(kind: TaskKind, index: usize) -> String {
    format!("{}-{:06}", kind.name(), index)
}

/// `n` distinct prompts of `task` drawn without replacement, with oracle
/// targets. Deterministic in `(task, n, seed)`.
pub fn gen_toy_corpus(task: &TaskSpec, n: usize, seed: u64) -> Result<Vec<PromptRecord>, CorpusError> {
    task.validate()?;
    if n == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let available = task.distinct_prompts();
    if (n as u128) > available {
        return Err(CorpusError::NotEnoughPrompts { requested: n, available });
    }
    let mut rng = seed::rng(seed);
    let indices: Vec<u128> = if available <= (1u128 << 24) {
        index::sample(&mut rng, available as usize, n).into_iter().map(|i| i as u128).collect()
    } else {
        // Rejection sampling; the space is far larger than n.
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let i = rng.random_range(0..available);
            if seen.insert(i) {
                out.push(i);
            }
        }
        out
    };
    Ok(indices
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let prompt = task.prompt_from_index(idx);
            PromptRecord {
                id: record_id(task.kind, i),
                target: task.target(&prompt),
                prompt,
                task: task.clone(),
            }
        })
        .collect())
}
