//! Oracle-reward evaluation: win rate against the SFT target, data accuracy
//! of synthesized negatives, and the reward-histogram KL diagnostic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, PreferenceRecord, PromptRecord, ResponseSet, TaskKind, TaskSpec, Vocab};
use crate::filter::select_negatives;
use crate::seed;
use crate::toylm::{ModelError, ModelParams, Sampling};

/// Additive smoothing applied to histogram probabilities in [`negative_reward_kl`].
pub const KL_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("empty evaluation set")]
    Empty,
    #[error("{0} has no true negatives")]
    NoTrueNegatives(&'static str),
    #[error("bins must be at least 2")]
    TooFewBins,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("prompt {0} has no response set")]
    MissingResponses(String),
}

/// Task-bound reward in `[0, 1]`.
///
/// Exact match scores 1. Otherwise the score is the number of positions where
/// response and target agree divided by the longer of the two lengths. The
/// constant-refusal task is all-or-nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleReward {
    task: TaskSpec,
}

impl OracleReward {
    pub fn new(task: TaskSpec) -> Self {
        OracleReward { task }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn reward(&self, prompt: &str, response: &str) -> f64 {
        oracle_reward(&self.task, prompt, response)
    }
}

pub fn oracle_reward(task: &TaskSpec, prompt: &str, response: &str) -> f64 {
    let target = task.target(prompt);
    if response == target {
        return 1.0;
    }
    if task.kind == TaskKind::ConstantRefusal {
        return 0.0;
    }
    let t: Vec<char> = target.chars().collect();
    let r: Vec<char> = response.chars().collect();
    let denom = t.len().max(r.len());
    if denom == 0 {
        return 1.0;
    }
    let hits = t.iter().zip(&r).filter(|(a, b)| a == b).count();
    hits as f64 / denom as f64
}

/// Anything that answers a prompt given a seed.
pub trait Responder {
    fn respond(&self, record: &PromptRecord, seed: u64) -> Result<String, EvalError>;
}

impl<F> Responder for F
where
    F: Fn(&PromptRecord, u64) -> String,
{
    fn respond(&self, record: &PromptRecord, seed: u64) -> Result<String, EvalError> {
        Ok(self(record, seed))
    }
}

/// Samples from a toy policy, capping length at the task's maximum.
#[derive(Debug, Clone, Copy)]
pub struct PolicyResponder<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocab,
    pub sampling: Sampling,
}

impl Responder for PolicyResponder<'_> {
    fn respond(&self, record: &PromptRecord, seed: u64) -> Result<String, EvalError> {
        let prompt = self.vocab.tokenize(&record.prompt)?;
        let ids = self.params.sample(&prompt, self.sampling, record.task.max_response_len(), seed)?;
        Ok(self.vocab.detokenize(&ids)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub reward_target: f64,
    /// Mean reward over this prompt's samples.
    pub reward_response: f64,
    /// Mean win score (1 win, 0.5 tie, 0 loss) over this prompt's samples.
    pub win: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub win_rate: f64,
    pub avg_reward: f64,
    pub n_eval: usize,
    pub samples_per_prompt: usize,
    pub rows: Vec<EvalRow>,
}

/// Scores `samples_per_prompt` responses to the `index`-th evaluation prompt.
/// Sample `j` uses seed `derive2(seed, index, j)`, so two policies evaluated
/// with the same seed share random numbers.
pub fn eval_prompt(
    responder: &dyn Responder,
    record: &PromptRecord,
    index: usize,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<EvalRow, EvalError> {
    if samples_per_prompt == 0 {
        return Err(EvalError::Empty);
    }
    let oracle = OracleReward::new(record.task.clone());
    let reward_target = oracle.reward(&record.prompt, &record.target);
    let (mut reward_sum, mut win_sum) = (0.0, 0.0);
    for j in 0..samples_per_prompt {
        let response = responder.respond(record, seed::derive2(seed, index as u64, j as u64))?;
        let r = oracle.reward(&record.prompt, &response);
        reward_sum += r;
        win_sum += if r > reward_target {
            1.0
        } else if r == reward_target {
            0.5
        } else {
            0.0
        };
    }
    let k = samples_per_prompt as f64;
    Ok(EvalRow { id: record.id.clone(), reward_target, reward_response: reward_sum / k, win: win_sum / k })
}

impl EvalReport {
    /// Aggregates per-prompt rows (in evaluation order).
    pub fn from_rows(rows: Vec<EvalRow>, samples_per_prompt: usize) -> Result<Self, EvalError> {
        if rows.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = rows.len() as f64;
        Ok(EvalReport {
            win_rate: rows.iter().map(|r| r.win).sum::<f64>() / n,
            avg_reward: rows.iter().map(|r| r.reward_response).sum::<f64>() / n,
            n_eval: rows.len(),
            samples_per_prompt,
            rows,
        })
    }
}

/// Win rate of sampled responses against the reference targets; see
/// [`eval_prompt`] for the seeding scheme.
pub fn win_rate(
    responder: &dyn Responder,
    eval: &[PromptRecord],
    samples_per_prompt: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if eval.is_empty() || samples_per_prompt == 0 {
        return Err(EvalError::Empty);
    }
    let rows = eval
        .iter()
        .enumerate()
        .map(|(i, rec)| eval_prompt(responder, rec, i, samples_per_prompt, seed))
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::from_rows(rows, samples_per_prompt)
}

/// Fraction of `(chosen, rejected_k)` pairs whose rejected reward is strictly
/// below the chosen reward.
pub fn data_accuracy(dataset: &[PreferenceRecord], oracle: &OracleReward) -> Result<f64, EvalError> {
    let (mut good, mut total) = (0usize, 0usize);
    for rec in dataset {
        let chosen = oracle.reward(&rec.prompt, &rec.chosen);
        for r in &rec.rejected {
            total += 1;
            if oracle.reward(&rec.prompt, r) < chosen {
                good += 1;
            }
        }
    }
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(good as f64 / total as f64)
}

fn true_negative_rewards(dataset: &[PreferenceRecord], oracle: &OracleReward) -> Vec<f64> {
    let mut out = Vec::new();
    for rec in dataset {
        let chosen = oracle.reward(&rec.prompt, &rec.chosen);
        out.extend(rec.rejected.iter().map(|r| oracle.reward(&rec.prompt, r)).filter(|&r| r < chosen));
    }
    out
}

fn histogram(rewards: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = alloc::vec![0usize; bins];
    for &r in rewards {
        let b = libm::floor(r.clamp(0.0, 1.0) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = rewards.len() as f64;
    let norm = 1.0 + bins as f64 * KL_SMOOTHING;
    counts.into_iter().map(|c| (c as f64 / n + KL_SMOOTHING) / norm).collect()
}

/// `KL(selected || reference)` between reward histograms of true negatives on
/// `[0, 1]` with `bins` equal-width bins (reward 1 falls in the last bin).
pub fn negative_reward_kl(
    selected: &[PreferenceRecord],
    reference: &[PreferenceRecord],
    oracle: &OracleReward,
    bins: usize,
) -> Result<f64, EvalError> {
    if bins < 2 {
        return Err(EvalError::TooFewBins);
    }
    let a = true_negative_rewards(selected, oracle);
    let b = true_negative_rewards(reference, oracle);
    if a.is_empty() {
        return Err(EvalError::NoTrueNegatives("selected"));
    }
    if b.is_empty() {
        return Err(EvalError::NoTrueNegatives("reference"));
    }
    let (p, q) = (histogram(&a, bins), histogram(&b, bins));
    Ok(p.iter().zip(&q).map(|(&pi, &qi)| pi * libm::log(pi / qi)).sum::<f64>().max(0.0))
}

fn response_index<'a>(sets: &'a [ResponseSet]) -> BTreeMap<&'a str, &'a ResponseSet> {
    sets.iter().map(|s| (s.id.as_str(), s)).collect()
}

/// Reward-model-style filtering with the oracle: rejected are `m` distinct
/// responses scoring strictly below the target. Prompts without any are
/// skipped.
pub fn oracle_preference_dataset(
    prompts: &[PromptRecord],
    response_sets: &[ResponseSet],
    m: usize,
    seed: u64,
) -> Result<Vec<PreferenceRecord>, EvalError> {
    let by_id = response_index(response_sets);
    let mut out = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let set = by_id.get(p.id.as_str()).ok_or_else(|| EvalError::MissingResponses(p.id.clone()))?;
        let oracle = OracleReward::new(p.task.clone());
        let target_reward = oracle.reward(&p.prompt, &p.target);
        let negatives: Vec<&str> = set
            .responses
            .iter()
            .map(|s| s.as_str())
            .filter(|r| oracle.reward(&p.prompt, r) < target_reward)
            .collect();
        if let Ok(sel) = select_negatives(&negatives, m, seed::derive(seed, i as u64)) {
            out.push(PreferenceRecord {
                id: p.id.clone(),
                prompt: p.prompt.clone(),
                chosen: p.target.clone(),
                rejected: sel.negatives,
            });
        }
    }
    Ok(out)
}

/// Standard 1:1 preference pairs labeled by the oracle: up to `l` pairs per
/// prompt, each from two sampled responses with different rewards, the
/// higher-reward one chosen. Pair `k` of a prompt has id `<id>/pair-<k>`.
pub fn oracle_pairs(
    prompts: &[PromptRecord],
    response_sets: &[ResponseSet],
    l: usize,
    seed: u64,
) -> Result<Vec<PreferenceRecord>, EvalError> {
    let by_id = response_index(response_sets);
    let mut out = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let set = by_id.get(p.id.as_str()).ok_or_else(|| EvalError::MissingResponses(p.id.clone()))?;
        let oracle = OracleReward::new(p.task.clone());
        let mut pool: Vec<&str> = set.responses.iter().map(|s| s.as_str()).collect();
        pool.shuffle(&mut seed::rng(seed::derive(seed, i as u64)));
        let mut made = 0;
        for pair in pool.chunks_exact(2) {
            if made == l {
                break;
            }
            let (ra, rb) = (oracle.reward(&p.prompt, pair[0]), oracle.reward(&p.prompt, pair[1]));
            if ra == rb {
                continue;
            }
            let (chosen, rejected) = if ra > rb { (pair[0], pair[1]) } else { (pair[1], pair[0]) };
            out.push(PreferenceRecord {
                id: format!("{}/pair-{}", p.id, made),
                prompt: p.prompt.clone(),
                chosen: chosen.to_string(),
                rejected: alloc::vec![rejected.to_string()],
            });
            made += 1;
        }
    }
    Ok(out)
}
