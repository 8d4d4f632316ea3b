//! Run configuration: one JSON document with a section per stage.
//!
//! Every section and field has a default, so `{}` is a valid config. Unknown
//! keys are rejected. Section seeds are optional; a missing seed is derived
//! from the root seed as `derive(seed, k)` with the stage counter `k` given
//! by [`StageSeed`]. [`RunConfig::resolved`] fills them in, and the resolved
//! form is what gets written to a run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use selfcontrast_core::corpus::{TaskKind, TaskSpec, Vocab};
use selfcontrast_core::dpo::DpoConfig;
use selfcontrast_core::filter::FilterConfig;
use selfcontrast_core::optim::OptimizerKind;
use selfcontrast_core::seed;
use selfcontrast_core::theorem::GradientModel;
use selfcontrast_core::toylm::{Dims, Sampling, SftConfig};

use crate::embed::EmbedderSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// Counter used to derive each stage's seed from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StageSeed {
    Corpus = 0,
    Sft = 1,
    Sample = 2,
    Filter = 3,
    Dpo = 4,
    Eval = 5,
    Theorem = 6,
    Compare = 7,
}

impl StageSeed {
    pub fn derive(self, root: u64) -> u64 {
        seed::derive(root, self as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub task: TaskSpec,
    pub n: usize,
    /// Fraction of the corpus held out for evaluation (taken from the end).
    pub eval_fraction: f64,
    /// Fraction of the SFT prompts reused as DPO prompts (taken from the
    /// start of the SFT split).
    pub dpo_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            task: TaskSpec::new(TaskKind::Reverse, 4),
            n: 1000,
            eval_fraction: 0.2,
            dpo_fraction: 1.0,
            seed: None,
        }
    }
}

impl CorpusSection {
    /// `(sft, dpo, eval)` prompt counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n_eval = (self.n as f64 * self.eval_fraction).round() as usize;
        let n_sft = self.n.saturating_sub(n_eval);
        let n_dpo = (n_sft as f64 * self.dpo_fraction).round() as usize;
        (n_sft, n_dpo, n_eval)
    }
}

/// Policy shape; the vocabulary size follows from the task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = Dims::toy(Vocab::default().size());
        ModelSection { context: d.context, embed: d.embed, hidden: d.hidden }
    }
}

impl ModelSection {
    pub fn dims(&self, vocab: &Vocab) -> Dims {
        Dims { vocab: vocab.size(), context: self.context, embed: self.embed, hidden: self.hidden }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SftSection {
    fn default() -> Self {
        SftSection { epochs: 60, batch_size: 16, learning_rate: 1e-2, optimizer: OptimizerKind::Sgd, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Responses per prompt (R).
    pub r: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Token cap per response; defaults to the task's maximum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { r: 32, temperature: 1.0, top_p: 1.0, max_len: None, seed: None }
    }
}

impl SampleSection {
    pub fn sampling(&self) -> Sampling {
        Sampling { temperature: self.temperature, top_p: self.top_p }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub a_percent: f64,
    /// Negatives per prompt; one preference dataset and one aligned model
    /// per entry.
    pub m: Vec<usize>,
    pub embedder: EmbedderSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection { a_percent: 25.0, m: vec![1, 8], embedder: EmbedderSpec::default(), seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoSection {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_prompts: usize,
    pub optimizer: OptimizerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DpoSection {
    fn default() -> Self {
        DpoSection { beta: 0.1, learning_rate: 0.2, epochs: 2, batch_prompts: 8, optimizer: OptimizerKind::Sgd, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples_per_prompt: usize,
    /// Histogram bins for the negative-reward KL.
    pub bins: usize,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { samples_per_prompt: 8, bins: 20, temperature: 1.0, top_p: 1.0, seed: None }
    }
}

impl EvalSection {
    pub fn sampling(&self) -> Sampling {
        Sampling { temperature: self.temperature, top_p: self.top_p }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSection {
    pub grid: Vec<GradientModel>,
    pub l: Vec<u64>,
    /// Negative counts to simulate. Empty means "the smallest m that matches
    /// l pairs", skipping (model, l) combinations where none exists.
    pub m: Vec<u64>,
    pub trials: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for TheoremSection {
    fn default() -> Self {
        TheoremSection {
            grid: vec![
                GradientModel::new(1.0, 3.0, 0.0),
                GradientModel::new(1.0, 1.0, 0.0),
                GradientModel::new(2.0, 1.0, 0.0),
                GradientModel::new(1.0, 2.0, 0.3),
            ],
            l: vec![1, 2, 5, 9],
            m: Vec::new(),
            trials: 1_000_000,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub m_list: Vec<usize>,
    pub pair_list: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { m_list: vec![1, 2, 4, 8, 16], pair_list: vec![1, 2, 4, 8], seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub sft: SftSection,
    pub sample: SampleSection,
    pub filter: FilterSection,
    pub dpo: DpoSection,
    pub eval: EvalSection,
    pub theorem: TheoremSection,
    pub compare: CompareSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            sft: SftSection::default(),
            sample: SampleSection::default(),
            filter: FilterSection::default(),
            dpo: DpoSection::default(),
            eval: EvalSection::default(),
            theorem: TheoremSection::default(),
            compare: CompareSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the root seed and clears every section seed, so all stage
    /// seeds are re-derived from the new root.
    pub fn with_root_seed(mut self, root: u64) -> Self {
        self.seed = root;
        self.corpus.seed = None;
        self.sft.seed = None;
        self.sample.seed = None;
        self.filter.seed = None;
        self.dpo.seed = None;
        self.eval.seed = None;
        self.theorem.seed = None;
        self.compare.seed = None;
        self
    }

    /// A copy with every section seed explicit.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        let root = c.seed;
        c.corpus.seed.get_or_insert(StageSeed::Corpus.derive(root));
        c.sft.seed.get_or_insert(StageSeed::Sft.derive(root));
        c.sample.seed.get_or_insert(StageSeed::Sample.derive(root));
        c.filter.seed.get_or_insert(StageSeed::Filter.derive(root));
        c.dpo.seed.get_or_insert(StageSeed::Dpo.derive(root));
        c.eval.seed.get_or_insert(StageSeed::Eval.derive(root));
        c.theorem.seed.get_or_insert(StageSeed::Theorem.derive(root));
        c.compare.seed.get_or_insert(StageSeed::Compare.derive(root));
        c
    }

    /// Hex SHA-256 of the compact JSON of the resolved config.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.resolved()).expect("config serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }

    pub fn vocab(&self) -> Result<Vocab, String> {
        Vocab::for_task(&self.corpus.task).map_err(|e| e.to_string())
    }

    pub fn max_len(&self) -> usize {
        self.sample.max_len.unwrap_or_else(|| self.corpus.task.max_response_len())
    }

    pub fn sft_config(&self) -> SftConfig {
        let s = &self.sft;
        SftConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            seed: s.seed.unwrap_or_else(|| StageSeed::Sft.derive(self.seed)),
            optimizer: s.optimizer,
        }
    }

    /// Seed for the initial (pre-SFT) parameters.
    pub fn init_seed(&self) -> u64 {
        seed::derive(self.sft_config().seed, 0)
    }

    pub fn filter_config(&self, a_percent: f64, m: usize) -> FilterConfig {
        FilterConfig {
            a_percent,
            m,
            r: self.sample.r,
            seed: self.filter.seed.unwrap_or_else(|| StageSeed::Filter.derive(self.seed)),
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        let d = &self.dpo;
        DpoConfig {
            beta: d.beta,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_prompts: d.batch_prompts,
            seed: d.seed.unwrap_or_else(|| StageSeed::Dpo.derive(self.seed)),
            optimizer: d.optimizer,
        }
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs: Vec<String> = Vec::new();
        let mut err = |path: &str, msg: &str| errs.push(format!("{path}: {msg}"));

        let c = &self.corpus;
        if let Err(e) = c.task.validate() {
            err("corpus.task", &e.to_string());
        }
        if c.n == 0 {
            err("corpus.n", "must be at least 1");
        } else if (c.n as u128) > c.task.distinct_prompts() {
            err("corpus.n", &format!("exceeds the {} distinct prompts of the task", c.task.distinct_prompts()));
        }
        if !(c.eval_fraction > 0.0 && c.eval_fraction < 1.0) {
            err("corpus.eval_fraction", "must lie in (0, 1)");
        }
        if !(c.dpo_fraction > 0.0 && c.dpo_fraction <= 1.0) {
            err("corpus.dpo_fraction", "must lie in (0, 1]");
        }
        let (n_sft, n_dpo, n_eval) = c.split_sizes();
        if c.n > 0 && (n_sft == 0 || n_dpo == 0 || n_eval == 0) {
            err("corpus", &format!("split leaves an empty set (sft {n_sft}, dpo {n_dpo}, eval {n_eval})"));
        }

        match self.vocab() {
            Ok(vocab) => {
                if let Err(e) = self.model.dims(&vocab).validate() {
                    err("model", &e.to_string());
                }
            }
            Err(e) => err("corpus.task", &e),
        }
        if c.task.input_length + 1 > self.model.context {
            err("model.context", "must exceed corpus.task.input_length (one slot holds the separator)");
        }

        let s = &self.sft;
        if s.epochs == 0 {
            err("sft.epochs", "must be at least 1");
        }
        if s.batch_size == 0 {
            err("sft.batch_size", "must be at least 1");
        }
        if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
            err("sft.learning_rate", "must be positive and finite");
        }

        let sm = &self.sample;
        if sm.r == 0 {
            err("sample.r", "must be at least 1");
        }
        if let Err(e) = sm.sampling().validate() {
            err("sample", e);
        }
        if sm.max_len == Some(0) {
            err("sample.max_len", "must be at least 1");
        }

        let f = &self.filter;
        let a_ok = f.a_percent > 0.0 && f.a_percent <= 100.0;
        if !a_ok {
            err("filter.a_percent", "must lie in (0, 100]");
        }
        if f.m.is_empty() {
            err("filter.m", "must list at least one negative count");
        }
        for &m in f.m.iter().filter(|_| a_ok) {
            if let Err(e) = self.filter_config(f.a_percent, m).validate() {
                err(&format!("filter.m[{m}]"), &e.to_string());
            }
        }
        let mut sorted = f.m.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != f.m.len() {
            err("filter.m", "entries must be distinct");
        }
        if let Err(e) = f.embedder.validate() {
            err("filter.embedder", &e);
        }

        if let Err(e) = self.dpo_config().validate() {
            err("dpo", &e.to_string());
        }
        if self.dpo.learning_rate == 0.0 {
            err("dpo.learning_rate", "must be positive");
        }

        let e = &self.eval;
        if e.samples_per_prompt == 0 {
            err("eval.samples_per_prompt", "must be at least 1");
        }
        if e.bins < 2 {
            err("eval.bins", "must be at least 2");
        }
        if let Err(msg) = e.sampling().validate() {
            err("eval", msg);
        }

        let t = &self.theorem;
        for (i, g) in t.grid.iter().enumerate() {
            if let Err(e) = g.validate() {
                err(&format!("theorem.grid[{i}]"), &e.to_string());
            }
        }
        if t.l.iter().any(|&l| l == 0) {
            err("theorem.l", "entries must be at least 1");
        }
        if t.m.iter().any(|&m| m == 0) {
            err("theorem.m", "entries must be at least 1");
        }
        if t.trials == 0 {
            err("theorem.trials", "must be at least 1");
        }

        let cmp = &self.compare;
        if cmp.m_list.iter().any(|&m| m == 0) {
            err("compare.m_list", "entries must be at least 1");
        }
        if cmp.pair_list.iter().any(|&l| l == 0) {
            err("compare.pair_list", "entries must be at least 1");
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_empty_object_is_default() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"filter": {"a": 25}}"#).is_err());
    }

    #[test]
    fn zero_threshold_is_invalid() {
        let cfg = RunConfig::from_json(r#"{"filter": {"a_percent": 0}}"#).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("filter.a_percent"), "{err}");
    }

    #[test]
    fn resolution_makes_seeds_explicit_and_keeps_overrides() {
        let cfg = RunConfig::from_json(r#"{"seed": 5, "dpo": {"seed": 77}}"#).unwrap();
        let r = cfg.resolved();
        assert_eq!(r.dpo.seed, Some(77));
        assert_eq!(r.sft.seed, Some(StageSeed::Sft.derive(5)));
        assert_eq!(r.resolved(), r);
        assert_eq!(cfg.hash(), r.hash());
        assert_ne!(cfg.hash(), cfg.clone().with_root_seed(6).hash());
        let text = r.to_json();
        assert_eq!(RunConfig::from_json(&text).unwrap(), r);
    }
}
