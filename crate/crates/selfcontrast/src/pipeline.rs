//! Stage orchestration over a run directory.
//!
//! ```text
//! <run>/config.json                       resolved config, all seeds explicit
//! <run>/manifest.json                     stage -> files with SHA-256
//! <run>/corpus/{sft,dpo,eval}.jsonl       gen-corpus
//! <run>/sft/{model.json,loss.csv}         sft
//! <run>/sample/responses.jsonl            sample
//! <run>/filter/m<m>/preferences.jsonl     filter: Self-Contrast data at a%
//! <run>/filter/m<m>/diagnostics.csv       filter: similarity ranks
//! <run>/filter/m<m>/unfiltered.jsonl      filter: same m at a% = 100
//! <run>/filter/m<m>/oracle.jsonl          filter: oracle-labelled negatives
//! <run>/filter/report.json                filter: accuracy and KL per m
//! <run>/dpo/m<m>/{model.json,loss_trace.csv}        train-dpo
//! <run>/eval/<model>/{report.json,rows.csv}         eval (sft and m<m>)
//! <run>/summary.json                      eval: SFT vs Self-Contrast_m
//! <run>/theorem/simulation.csv            simulate-theorem
//! <run>/compare/{responses.jsonl,results.csv}       compare-negatives
//! ```
//!
//! Every stage reads its predecessors' files, so any stage can be re-run on
//! its own, and re-running with unchanged inputs rewrites identical bytes.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use selfcontrast_core::corpus::{gen_toy_corpus, PreferenceRecord, PromptRecord, ResponseSet, TaskSpec, Vocab};
use selfcontrast_core::dpo::{dpo_train, DpoConfig, TokenizedPreference};
use selfcontrast_core::eval::{
    data_accuracy, eval_prompt, negative_reward_kl, oracle_pairs, oracle_preference_dataset, EvalReport, OracleReward,
    PolicyResponder,
};
use selfcontrast_core::filter::{align_responses, filter_prompt, FilterConfig, FilterOutcome};
use selfcontrast_core::seed;
use selfcontrast_core::theorem::{
    lambda_of, min_negatives, multineg_validity, simulate_block, var_multineg, var_multipair, SimConfig, SimResult,
    Validity,
};
use selfcontrast_core::toylm::{sft_train, ModelParams, Sampling, SftExample};

use crate::checkpoint::{Checkpoint, SeedEntry};
use crate::config::{ConfigError, EvalSection, RunConfig, TheoremSection};
use crate::embed::{precompute, FileEmbedder};
use crate::formats::{read_json, read_jsonl, write_csv, write_diagnostics, write_eval_rows, write_json, write_jsonl, write_trace};
use crate::manifest::{timestamp, RunManifest, TOOL_VERSION};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// A pipeline stage, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    GenCorpus,
    Sft,
    Sample,
    Filter,
    TrainDpo,
    Eval,
}

pub const STAGES: [Stage; 6] = [Stage::GenCorpus, Stage::Sft, Stage::Sample, Stage::Filter, Stage::TrainDpo, Stage::Eval];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Sft => "sft",
            Stage::Sample => "sample",
            Stage::Filter => "filter",
            Stage::TrainDpo => "train-dpo",
            Stage::Eval => "eval",
        }
    }

    /// Files this stage reads.
    pub fn inputs(self, cfg: &RunConfig) -> Vec<String> {
        let ms = &cfg.filter.m;
        match self {
            Stage::GenCorpus => vec![],
            Stage::Sft => vec!["corpus/sft.jsonl".into()],
            Stage::Sample => vec!["corpus/dpo.jsonl".into(), "sft/model.json".into()],
            Stage::Filter => vec!["corpus/dpo.jsonl".into(), "sample/responses.jsonl".into()],
            Stage::TrainDpo => {
                let mut v = vec!["sft/model.json".to_string()];
                v.extend(ms.iter().map(|m| format!("filter/m{m}/preferences.jsonl")));
                v
            }
            Stage::Eval => {
                let mut v = vec!["corpus/eval.jsonl".to_string(), "sft/model.json".into(), "filter/report.json".into()];
                v.extend(ms.iter().map(|m| format!("dpo/m{m}/model.json")));
                v
            }
        }
    }

    /// Files this stage writes.
    pub fn outputs(self, cfg: &RunConfig) -> Vec<String> {
        let ms = &cfg.filter.m;
        match self {
            Stage::GenCorpus => vec!["corpus/sft.jsonl".into(), "corpus/dpo.jsonl".into(), "corpus/eval.jsonl".into()],
            Stage::Sft => vec!["sft/model.json".into(), "sft/loss.csv".into()],
            Stage::Sample => vec!["sample/responses.jsonl".into()],
            Stage::Filter => {
                let mut v: Vec<String> = ms
                    .iter()
                    .flat_map(|m| {
                        ["preferences.jsonl", "diagnostics.csv", "unfiltered.jsonl", "oracle.jsonl"]
                            .map(|f| format!("filter/m{m}/{f}"))
                    })
                    .collect();
                v.push("filter/report.json".into());
                v
            }
            Stage::TrainDpo => {
                ms.iter().flat_map(|m| [format!("dpo/m{m}/model.json"), format!("dpo/m{m}/loss_trace.csv")]).collect()
            }
            Stage::Eval => {
                let mut v: Vec<String> = eval_models(cfg)
                    .into_iter()
                    .flat_map(|(name, _)| [format!("eval/{name}/report.json"), format!("eval/{name}/rows.csv")])
                    .collect();
                v.push(SUMMARY_FILE.into());
                v
            }
        }
    }
}

/// `(name, checkpoint path)` of every evaluated model.
fn eval_models(cfg: &RunConfig) -> Vec<(String, String)> {
    let mut v = vec![("sft".to_string(), "sft/model.json".to_string())];
    v.extend(cfg.filter.m.iter().map(|m| (format!("m{m}"), format!("dpo/m{m}/model.json"))));
    v
}

#[derive(Debug, Error)]
#[error("stage {stage}: {message}")]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

fn msg<E: Display>(e: E) -> String {
    e.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLossRow {
    pub epoch: usize,
    pub mean_nll: f64,
}

/// Per-m filter statistics, written to `filter/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub m: usize,
    pub a_percent: f64,
    pub prompts: usize,
    pub records: usize,
    pub skipped: usize,
    pub short: usize,
    pub data_accuracy: Option<f64>,
    pub unfiltered_records: usize,
    pub data_accuracy_unfiltered: Option<f64>,
    /// `data_accuracy - data_accuracy_unfiltered`.
    pub accuracy_gap: Option<f64>,
    pub oracle_records: usize,
    /// KL of the true-negative reward histogram of the filtered data against
    /// the oracle-labelled data.
    pub negative_kl_vs_oracle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub win_rate: f64,
    pub avg_reward: f64,
}

/// Evaluation report as written to `eval/<model>/report.json`; the
/// per-prompt rows go to the CSV next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub model: String,
    pub win_rate: f64,
    pub avg_reward: f64,
    pub n_eval: usize,
    pub samples_per_prompt: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub m: usize,
    pub win_rate: f64,
    pub avg_reward: f64,
    /// Win rate minus the SFT win rate.
    pub win_rate_gain: f64,
    pub filter: FilterStats,
    pub filter_config: FilterConfig,
    pub dpo_config: DpoConfig,
}

/// Pipeline summary. Contains no timestamps, so identical configs give
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tool_version: String,
    pub config_hash: String,
    pub task: TaskSpec,
    pub n_sft: usize,
    pub n_dpo: usize,
    pub n_eval: usize,
    pub sft: ModelScore,
    pub self_contrast: Vec<VariantSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremRow {
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub lambda: Option<f64>,
    pub l: u64,
    pub m: u64,
    pub var_pair_closed: f64,
    pub var_neg_closed: f64,
    pub mse_pair_mc: f64,
    pub mse_neg_mc: Option<f64>,
    pub validity: Validity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    /// `sft`, `negatives` (one positive, k negatives) or `pairs` (k oracle
    /// pairs per prompt).
    pub scheme: String,
    pub k: usize,
    pub records: usize,
    /// Total (chosen, rejected) comparisons in the training data.
    pub comparisons: usize,
    pub win_rate: f64,
    pub avg_reward: f64,
}

/// Samples `r` responses per prompt. Prompt `i` gets set seed
/// `derive(seed, i)` and its response `j` is drawn with
/// `derive(set_seed, j)`.
pub fn sample_sets(
    model: &ModelParams,
    vocab: &Vocab,
    prompts: &[PromptRecord],
    r: usize,
    sampling: Sampling,
    max_len: usize,
    seed: u64,
) -> Result<Vec<ResponseSet>, String> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let set_seed = seed::derive(seed, i as u64);
            let prompt = vocab.tokenize(&p.prompt).map_err(|e| format!("{}: {e}", p.id))?;
            let responses = (0..r)
                .map(|j| {
                    let ids = model.sample(&prompt, sampling, max_len, seed::derive(set_seed, j as u64)).map_err(msg)?;
                    vocab.detokenize(&ids).map_err(msg)
                })
                .collect::<Result<Vec<_>, String>>()
                .map_err(|e| format!("{}: {e}", p.id))?;
            Ok(ResponseSet {
                id: p.id.clone(),
                responses,
                temperature: sampling.temperature,
                top_p: sampling.top_p,
                seed: set_seed,
            })
        })
        .collect()
}

/// Embeds every target and response once with `inner`.
pub fn embedding_table(
    inner: &dyn selfcontrast_core::filter::Embedder,
    dim: usize,
    prompts: &[PromptRecord],
    sets: &[ResponseSet],
) -> Result<FileEmbedder, String> {
    let texts = prompts.iter().map(|p| p.target.as_str()).chain(sets.iter().flat_map(|s| s.responses.iter().map(|r| r.as_str())));
    precompute(inner, texts, dim).map_err(|e| format!("embedding: {}", e.0))
}

/// Filters every prompt in parallel; results are in prompt order.
pub fn filter_all(
    prompts: &[PromptRecord],
    sets: &[ResponseSet],
    table: &FileEmbedder,
    config: &FilterConfig,
) -> Result<FilterOutcome, String> {
    config.validate().map_err(msg)?;
    let aligned = align_responses(prompts, sets).map_err(msg)?;
    let results = prompts
        .par_iter()
        .zip(aligned.par_iter())
        .enumerate()
        .map(|(i, (p, s))| filter_prompt(i, p, s, table, config))
        .collect::<Result<Vec<_>, _>>()
        .map_err(msg)?;
    Ok(FilterOutcome::from_prompts(results))
}

pub fn tokenize_preferences(vocab: &Vocab, records: &[PreferenceRecord]) -> Result<Vec<TokenizedPreference>, String> {
    records
        .iter()
        .map(|r| {
            let tok = |s: &str| vocab.tokenize(s).map_err(|e| format!("{}: {e}", r.id));
            Ok(TokenizedPreference {
                prompt: tok(&r.prompt)?,
                chosen: tok(&r.chosen)?,
                rejected: r.rejected.iter().map(|x| tok(x)).collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

/// Win rate and average reward of `model` on `prompts`, parallel over
/// prompts with the common-random-numbers seeding of [`eval_prompt`].
pub fn evaluate(model: &ModelParams, vocab: &Vocab, prompts: &[PromptRecord], eval: &EvalSection) -> Result<EvalReport, String> {
    let responder = PolicyResponder { params: model, vocab, sampling: eval.sampling() };
    let seed = eval.seed.ok_or("eval seed is not resolved")?;
    let rows = prompts
        .par_iter()
        .enumerate()
        .map(|(i, rec)| eval_prompt(&responder, rec, i, eval.samples_per_prompt, seed))
        .collect::<Result<Vec<_>, _>>()
        .map_err(msg)?;
    EvalReport::from_rows(rows, eval.samples_per_prompt).map_err(msg)
}

/// Closed-form and simulated variances for every grid point and `l`. When
/// `section.m` is empty the simulated `m` is `min_negatives(lambda, l)` and
/// points without a finite answer are skipped. Row `k` simulates with seed
/// `derive(section.seed, k)`.
pub fn theorem_rows(section: &TheoremSection) -> Result<Vec<TheoremRow>, String> {
    let root = section.seed.ok_or("theorem seed is not resolved")?;
    let mut jobs = Vec::new();
    for g in &section.grid {
        g.validate().map_err(msg)?;
        let lambda = lambda_of(g).ok();
        for &l in &section.l {
            if section.m.is_empty() {
                match lambda.map(|lam| min_negatives(lam, l)) {
                    Some(Ok(m)) => jobs.push((*g, lambda, l, m)),
                    Some(Err(e)) => warn!("sigma1={} sigma2={} rho={} l={l}: {e}, skipped", g.sigma1, g.sigma2, g.rho),
                    None => warn!("sigma1={} sigma2={} rho={}: lambda undefined, skipped", g.sigma1, g.sigma2, g.rho),
                }
            } else {
                jobs.extend(section.m.iter().map(|&m| (*g, lambda, l, m)));
            }
        }
    }
    let rows = jobs
        .into_iter()
        .enumerate()
        .map(|(k, (g, lambda, l, m))| {
            let sim = SimConfig { l, m, trials: section.trials, seed: seed::derive(root, k as u64) };
            sim.validate().map_err(msg)?;
            let blocks: Vec<_> = (0..sim.blocks()).into_par_iter().map(|b| simulate_block(&g, &sim, b)).collect();
            let res = SimResult::from_blocks(blocks);
            Ok(TheoremRow {
                sigma1: g.sigma1,
                sigma2: g.sigma2,
                rho: g.rho,
                lambda,
                l,
                m,
                var_pair_closed: var_multipair(&g, l),
                var_neg_closed: var_multineg(&g, m),
                mse_pair_mc: res.mse_multipair,
                mse_neg_mc: res.mse_multineg,
                validity: multineg_validity(&g, m),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(rows)
}

fn load_model(path: &Path) -> Result<(ModelParams, Vocab, Vec<SeedEntry>), String> {
    let ck = Checkpoint::load(path).map_err(msg)?;
    let params = ck.model()?;
    Ok((params, ck.vocab, ck.seed_lineage))
}

fn accuracy(records: &[PreferenceRecord], oracle: &OracleReward) -> Option<f64> {
    if records.is_empty() {
        None
    } else {
        data_accuracy(records, oracle).ok()
    }
}

/// A configured run rooted at a directory.
#[derive(Debug, Clone)]
pub struct Run {
    /// Resolved config.
    pub config: RunConfig,
    pub dir: PathBuf,
    /// Directory that relative paths in the config resolve against.
    pub base: PathBuf,
}

impl Run {
    /// Validates and resolves `config`. Nothing is written.
    pub fn new(config: RunConfig, dir: impl Into<PathBuf>, base: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        config.validate()?;
        let dir = dir.into();
        let dir = std::path::absolute(&dir).unwrap_or(dir);
        Ok(Run { config: config.resolved(), dir, base: base.into() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn need(&self, rel: &str) -> Result<PathBuf, String> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(format!("missing input {}", p.display()))
        }
    }

    /// Human-readable list of what `stages` would read and write.
    pub fn plan(&self, stages: &[Stage]) -> String {
        let mut out = format!("run directory {}\nconfig hash {}\n", self.dir.display(), self.config.hash());
        for (i, s) in stages.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, s.name()));
            for f in s.inputs(&self.config) {
                out.push_str(&format!("     reads  {f}\n"));
            }
            for f in s.outputs(&self.config) {
                out.push_str(&format!("     writes {f}\n"));
            }
        }
        out
    }

    /// Creates the run directory and writes `config.json`, or checks that an
    /// existing one matches this config.
    pub fn prepare(&self) -> Result<(), StageError> {
        let fail = |message: String| StageError { stage: "config".into(), message };
        let hash = self.config.hash();
        let path = self.path(CONFIG_FILE);
        if path.exists() {
            let existing = RunConfig::load(&path).map_err(|e| fail(e.to_string()))?;
            if existing.hash() != hash {
                return Err(fail(format!(
                    "{} holds a different config (hash {}, this run {hash}); use another --out",
                    self.dir.display(),
                    existing.hash()
                )));
            }
        } else {
            write_json(&path, &self.config).map_err(|e| fail(e.to_string()))?;
        }
        let mut manifest = RunManifest::load_or_new(&self.dir, &hash).map_err(|e| fail(e.to_string()))?;
        if manifest.config_hash != hash {
            return Err(fail(format!("manifest belongs to config {}", manifest.config_hash)));
        }
        if !manifest.stages.contains_key("config") {
            manifest.record(&self.dir, "config", timestamp(), &[path]).map_err(|e| fail(e.to_string()))?;
            manifest.save(&self.dir).map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }

    fn record(&self, stage: &str, started: String, files: &[PathBuf]) -> Result<(), StageError> {
        let fail = |e: crate::formats::FormatError| StageError { stage: stage.to_string(), message: e.to_string() };
        let mut manifest = RunManifest::load_or_new(&self.dir, &self.config.hash()).map_err(fail)?;
        manifest.record(&self.dir, stage, started, files).map_err(fail)?;
        manifest.save(&self.dir).map_err(fail)
    }

    /// Runs one stage and records its outputs in the manifest.
    pub fn run_stage(&self, stage: Stage) -> Result<(), StageError> {
        self.prepare()?;
        info!("stage {}", stage.name());
        let started = timestamp();
        let result = match stage {
            Stage::GenCorpus => self.gen_corpus(),
            Stage::Sft => self.sft(),
            Stage::Sample => self.sample(),
            Stage::Filter => self.filter(),
            Stage::TrainDpo => self.train_dpo(),
            Stage::Eval => self.eval(),
        };
        let files = result.map_err(|message| StageError { stage: stage.name().into(), message })?;
        self.record(stage.name(), started, &files)
    }

    /// Runs every stage in order and returns the summary.
    pub fn pipeline(&self) -> Result<Summary, StageError> {
        for stage in STAGES {
            self.run_stage(stage)?;
        }
        read_json(&self.path(SUMMARY_FILE)).map_err(|e| StageError { stage: "eval".into(), message: e.to_string() })
    }

    fn gen_corpus(&self) -> Result<Vec<PathBuf>, String> {
        let c = &self.config.corpus;
        let recs = gen_toy_corpus(&c.task, c.n, c.seed.expect("resolved")).map_err(msg)?;
        let (n_sft, n_dpo, _) = c.split_sizes();
        let parts = [("corpus/sft.jsonl", &recs[..n_sft]), ("corpus/dpo.jsonl", &recs[..n_dpo]), ("corpus/eval.jsonl", &recs[n_sft..])];
        let mut files = Vec::new();
        for (rel, part) in parts {
            let p = self.path(rel);
            write_jsonl(&p, part).map_err(msg)?;
            files.push(p);
        }
        info!("corpus: {n_sft} sft ({n_dpo} reused for dpo), {} eval", recs.len() - n_sft);
        Ok(files)
    }

    fn sft(&self) -> Result<Vec<PathBuf>, String> {
        let prompts: Vec<PromptRecord> = read_jsonl(&self.need("corpus/sft.jsonl")?).map_err(msg)?;
        let vocab = self.config.vocab()?;
        let examples = prompts
            .iter()
            .map(|p| {
                let prompt = vocab.tokenize(&p.prompt).map_err(|e| format!("{}: {e}", p.id))?;
                let target = vocab.tokenize(&p.target).map_err(|e| format!("{}: {e}", p.id))?;
                Ok(SftExample { prompt, target })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let init_seed = self.config.init_seed();
        let sft = self.config.sft_config();
        let init = ModelParams::init(self.config.model.dims(&vocab), init_seed).map_err(msg)?;
        let (model, losses) = sft_train(&init, &examples, &sft).map_err(msg)?;
        info!("sft: mean nll {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
        let lineage = vec![SeedEntry { stage: "init".into(), seed: init_seed }, SeedEntry { stage: "sft".into(), seed: sft.seed }];
        let model_path = self.path("sft/model.json");
        Checkpoint::new(&model, &vocab, lineage).save(&model_path).map_err(msg)?;
        let rows: Vec<SftLossRow> = losses.iter().enumerate().map(|(epoch, &mean_nll)| SftLossRow { epoch, mean_nll }).collect();
        let loss_path = self.path("sft/loss.csv");
        write_csv(&loss_path, &rows).map_err(msg)?;
        Ok(vec![model_path, loss_path])
    }

    fn sample(&self) -> Result<Vec<PathBuf>, String> {
        let prompts: Vec<PromptRecord> = read_jsonl(&self.need("corpus/dpo.jsonl")?).map_err(msg)?;
        let (model, vocab, _) = load_model(&self.need("sft/model.json")?)?;
        let s = &self.config.sample;
        let sets = sample_sets(&model, &vocab, &prompts, s.r, s.sampling(), self.config.max_len(), s.seed.expect("resolved"))?;
        let path = self.path("sample/responses.jsonl");
        write_jsonl(&path, &sets).map_err(msg)?;
        info!("sample: {} prompts x {} responses", sets.len(), s.r);
        Ok(vec![path])
    }

    fn filter(&self) -> Result<Vec<PathBuf>, String> {
        let cfg = &self.config;
        let prompts: Vec<PromptRecord> = read_jsonl(&self.need("corpus/dpo.jsonl")?).map_err(msg)?;
        let sets: Vec<ResponseSet> = read_jsonl(&self.need("sample/responses.jsonl")?).map_err(msg)?;
        let inner = cfg.filter.embedder.build(&self.base).map_err(msg)?;
        let table = embedding_table(inner.as_ref(), cfg.filter.embedder.dim(), &prompts, &sets)?;
        let oracle = OracleReward::new(cfg.corpus.task.clone());
        let a = cfg.filter.a_percent;
        let mut files = Vec::new();
        let mut stats = Vec::new();
        for &m in &cfg.filter.m {
            let fc = cfg.filter_config(a, m);
            let out = filter_all(&prompts, &sets, &table, &fc)?;
            let unfiltered = filter_all(&prompts, &sets, &table, &cfg.filter_config(100.0, m))?;
            let oracle_set = oracle_preference_dataset(&prompts, &sets, m, fc.seed).map_err(msg)?;

            let dir = format!("filter/m{m}");
            let prefs = self.path(&format!("{dir}/preferences.jsonl"));
            write_jsonl(&prefs, &out.records).map_err(msg)?;
            let diag = self.path(&format!("{dir}/diagnostics.csv"));
            write_diagnostics(&diag, &out.diagnostics).map_err(msg)?;
            let unf = self.path(&format!("{dir}/unfiltered.jsonl"));
            write_jsonl(&unf, &unfiltered.records).map_err(msg)?;
            let orc = self.path(&format!("{dir}/oracle.jsonl"));
            write_jsonl(&orc, &oracle_set).map_err(msg)?;
            files.extend([prefs, diag, unf, orc]);

            let acc = accuracy(&out.records, &oracle);
            let acc_unf = accuracy(&unfiltered.records, &oracle);
            let kl = if out.records.is_empty() || oracle_set.is_empty() {
                None
            } else {
                match negative_reward_kl(&out.records, &oracle_set, &oracle, cfg.eval.bins) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        warn!("m={m}: negative reward KL unavailable: {e}");
                        None
                    }
                }
            };
            let st = FilterStats {
                m,
                a_percent: a,
                prompts: prompts.len(),
                records: out.records.len(),
                skipped: out.skipped.len(),
                short: out.short.len(),
                data_accuracy: acc,
                unfiltered_records: unfiltered.records.len(),
                data_accuracy_unfiltered: acc_unf,
                accuracy_gap: acc.zip(acc_unf).map(|(x, y)| x - y),
                oracle_records: oracle_set.len(),
                negative_kl_vs_oracle: kl,
            };
            info!(
                "filter m={m}: {} records, {} skipped, {} short, accuracy {:?} (a%=100: {:?})",
                st.records, st.skipped, st.short, st.data_accuracy, st.data_accuracy_unfiltered
            );
            stats.push(st);
        }
        let report = self.path("filter/report.json");
        write_json(&report, &stats).map_err(msg)?;
        files.push(report);
        Ok(files)
    }

    fn train_dpo(&self) -> Result<Vec<PathBuf>, String> {
        let (sft, vocab, lineage) = load_model(&self.need("sft/model.json")?)?;
        let dpo = self.config.dpo_config();
        let inputs = self
            .config
            .filter
            .m
            .iter()
            .map(|&m| {
                let recs: Vec<PreferenceRecord> =
                    read_jsonl(&self.need(&format!("filter/m{m}/preferences.jsonl"))?).map_err(msg)?;
                Ok((m, tokenize_preferences(&vocab, &recs)?))
            })
            .collect::<Result<Vec<_>, String>>()?;
        let outcomes = inputs
            .par_iter()
            .map(|(m, data)| dpo_train(&sft, data, &dpo).map_err(|e| format!("m={m}: {e}")))
            .collect::<Result<Vec<_>, String>>()?;
        let mut files = Vec::new();
        for ((m, _), out) in inputs.iter().zip(outcomes) {
            let losses = out.epoch_losses();
            info!("train-dpo m={m}: epoch losses {losses:?}");
            let mut lin = lineage.clone();
            lin.push(SeedEntry { stage: format!("dpo/m{m}"), seed: dpo.seed });
            let model = self.path(&format!("dpo/m{m}/model.json"));
            Checkpoint::new(&out.params, &vocab, lin).save(&model).map_err(msg)?;
            let trace = self.path(&format!("dpo/m{m}/loss_trace.csv"));
            write_trace(&trace, &out.trace).map_err(msg)?;
            files.extend([model, trace]);
        }
        Ok(files)
    }

    fn eval(&self) -> Result<Vec<PathBuf>, String> {
        let cfg = &self.config;
        let prompts: Vec<PromptRecord> = read_jsonl(&self.need("corpus/eval.jsonl")?).map_err(msg)?;
        let stats: Vec<FilterStats> = read_json(&self.need("filter/report.json")?).map_err(msg)?;
        let mut files = Vec::new();
        let mut scores = Vec::new();
        for (name, rel) in eval_models(cfg) {
            let (model, vocab, _) = load_model(&self.need(&rel)?)?;
            let report = evaluate(&model, &vocab, &prompts, &cfg.eval)?;
            info!("eval {name}: win rate {:.4}, avg reward {:.4}", report.win_rate, report.avg_reward);
            let file = ReportFile {
                model: name.clone(),
                win_rate: report.win_rate,
                avg_reward: report.avg_reward,
                n_eval: report.n_eval,
                samples_per_prompt: report.samples_per_prompt,
                sampling: cfg.eval.sampling(),
                seed: cfg.eval.seed.expect("resolved"),
            };
            let rp = self.path(&format!("eval/{name}/report.json"));
            write_json(&rp, &file).map_err(msg)?;
            let rows = self.path(&format!("eval/{name}/rows.csv"));
            write_eval_rows(&rows, &report.rows).map_err(msg)?;
            files.extend([rp, rows]);
            scores.push(ModelScore { win_rate: report.win_rate, avg_reward: report.avg_reward });
        }
        let sft = scores[0].clone();
        let variants = cfg
            .filter
            .m
            .iter()
            .zip(&scores[1..])
            .map(|(&m, s)| {
                let filter = stats.iter().find(|st| st.m == m).cloned().ok_or(format!("filter/report.json has no entry for m={m}"))?;
                Ok(VariantSummary {
                    m,
                    win_rate: s.win_rate,
                    avg_reward: s.avg_reward,
                    win_rate_gain: s.win_rate - sft.win_rate,
                    filter,
                    filter_config: cfg.filter_config(cfg.filter.a_percent, m),
                    dpo_config: cfg.dpo_config(),
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let (n_sft, n_dpo, n_eval) = cfg.corpus.split_sizes();
        let summary = Summary {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: cfg.hash(),
            task: cfg.corpus.task.clone(),
            n_sft,
            n_dpo,
            n_eval,
            sft,
            self_contrast: variants,
        };
        let sp = self.path(SUMMARY_FILE);
        write_json(&sp, &summary).map_err(msg)?;
        files.push(sp);
        Ok(files)
    }

    /// Runs the theorem simulation and writes `theorem/simulation.csv`.
    pub fn simulate_theorem(&self) -> Result<Vec<TheoremRow>, StageError> {
        const STAGE: &str = "simulate-theorem";
        self.prepare()?;
        let started = timestamp();
        let fail = |message: String| StageError { stage: STAGE.into(), message };
        let rows = theorem_rows(&self.config.theorem).map_err(fail)?;
        let path = self.path("theorem/simulation.csv");
        write_csv(&path, &rows).map_err(|e| fail(e.to_string()))?;
        self.record(STAGE, started, &[path])?;
        Ok(rows)
    }

    /// Trains one model per entry of `m_list` (Self-Contrast with k
    /// negatives) and of `pair_list` (k oracle-labelled pairs per prompt) on
    /// a shared response pool, and evaluates each. Runs gen-corpus and sft
    /// first if their outputs are missing.
    pub fn compare_negatives(&self, m_list: &[usize], pair_list: &[usize]) -> Result<Vec<CompareRow>, StageError> {
        const STAGE: &str = "compare-negatives";
        self.prepare()?;
        for (stage, out) in [(Stage::GenCorpus, "corpus/eval.jsonl"), (Stage::Sft, "sft/model.json")] {
            if !self.path(out).exists() {
                self.run_stage(stage)?;
            }
        }
        let started = timestamp();
        let (rows, files) =
            self.compare_inner(m_list, pair_list).map_err(|message| StageError { stage: STAGE.into(), message })?;
        self.record(STAGE, started, &files)?;
        Ok(rows)
    }

    /// Responses per prompt used by compare-negatives: enough that `a%` of
    /// them covers the largest m, and enough to form the largest number of
    /// pairs.
    pub fn compare_pool_size(&self, m_list: &[usize], pair_list: &[usize]) -> usize {
        let a = self.config.filter.a_percent;
        let for_m = m_list.iter().map(|&m| (m as f64 * 100.0 / a - 1e-9).ceil() as usize).max().unwrap_or(0);
        let for_pairs = pair_list.iter().map(|&l| 2 * l).max().unwrap_or(0);
        self.config.sample.r.max(for_m).max(for_pairs)
    }

    fn compare_inner(&self, m_list: &[usize], pair_list: &[usize]) -> Result<(Vec<CompareRow>, Vec<PathBuf>), String> {
        if m_list.is_empty() || pair_list.is_empty() {
            return Err("m_list and pair_list must be nonempty".into());
        }
        let cfg = &self.config;
        let seed_root = cfg.compare.seed.expect("resolved");
        let prompts: Vec<PromptRecord> = read_jsonl(&self.need("corpus/dpo.jsonl")?).map_err(msg)?;
        let eval_prompts: Vec<PromptRecord> = read_jsonl(&self.need("corpus/eval.jsonl")?).map_err(msg)?;
        let (sft, vocab, _) = load_model(&self.need("sft/model.json")?)?;
        let r = self.compare_pool_size(m_list, pair_list);
        let sets =
            sample_sets(&sft, &vocab, &prompts, r, cfg.sample.sampling(), cfg.max_len(), seed::derive(seed_root, 0))?;
        let responses = self.path("compare/responses.jsonl");
        write_jsonl(&responses, &sets).map_err(msg)?;
        let inner = cfg.filter.embedder.build(&self.base).map_err(msg)?;
        let table = embedding_table(inner.as_ref(), cfg.filter.embedder.dim(), &prompts, &sets)?;
        let filter_seed = seed::derive(seed_root, 1);
        let pair_seed = seed::derive(seed_root, 2);

        let mut settings: Vec<(&str, usize)> = m_list.iter().map(|&m| ("negatives", m)).collect();
        settings.extend(pair_list.iter().map(|&l| ("pairs", l)));
        let dpo = cfg.dpo_config();
        let mut rows = vec![{
            let rep = evaluate(&sft, &vocab, &eval_prompts, &cfg.eval)?;
            CompareRow { scheme: "sft".into(), k: 0, records: 0, comparisons: 0, win_rate: rep.win_rate, avg_reward: rep.avg_reward }
        }];
        let trained = settings
            .par_iter()
            .map(|&(scheme, k)| {
                let records = if scheme == "negatives" {
                    let fc = FilterConfig { a_percent: cfg.filter.a_percent, m: k, r, seed: filter_seed };
                    filter_all(&prompts, &sets, &table, &fc)?.records
                } else {
                    oracle_pairs(&prompts, &sets, k, pair_seed).map_err(msg)?
                };
                let data = tokenize_preferences(&vocab, &records)?;
                let out = dpo_train(&sft, &data, &dpo).map_err(|e| format!("{scheme} k={k}: {e}"))?;
                let rep = evaluate(&out.params, &vocab, &eval_prompts, &cfg.eval)?;
                info!("compare {scheme} k={k}: {} records, win rate {:.4}", records.len(), rep.win_rate);
                Ok(CompareRow {
                    scheme: scheme.into(),
                    k,
                    records: records.len(),
                    comparisons: records.iter().map(|r| r.rejected.len()).sum(),
                    win_rate: rep.win_rate,
                    avg_reward: rep.avg_reward,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        rows.extend(trained);
        let results = self.path("compare/results.csv");
        write_csv(&results, &rows).map_err(msg)?;
        Ok((rows, vec![responses, results]))
    }
}
