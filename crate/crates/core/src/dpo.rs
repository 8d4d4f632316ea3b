//! Direct preference optimization with one chosen and many rejected responses.
//!
//! For a pair `(x, p, n)` the margin is `z = r(x,p) - r(x,n)` with implicit
//! reward `r(x,y) = beta * (log pi(y|x) - log pi_ref(y|x))`, and the loss is
//! `softplus(-z) = -log sigmoid(z)`. Its gradient is
//!
//! ```text
//! -beta * sigmoid(r(x,n) - r(x,p)) * (grad log pi(p|x) - grad log pi(n|x))
//! ```
//!
//! A record with `m` rejected responses contributes the mean of its `m` pair
//! losses, so each `(chosen, rejected_k)` is an independent pair that shares
//! the chosen response.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{Optimizer, OptimizerKind};
use crate::seed;
use crate::toylm::{FlatGradient, ModelError, ModelParams};

/// Margins beyond this magnitude use the asymptotic forms of softplus.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("record {0} has no rejected responses")]
    EmptyNegatives(usize),
    #[error("record {record}: rejected responses {first} and {second} are identical")]
    DuplicateNegative { record: usize, first: usize, second: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("reference policy changed during training")]
    ReferenceMutated,
    #[error("invalid DPO config: {0}")]
    InvalidConfig(&'static str),
    #[error("empty preference dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Prompts per optimizer step; all rejected responses of a prompt always
    /// land in the same step.
    pub batch_prompts: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.1, learning_rate: 1e-3, epochs: 1, batch_prompts: 8, seed: 0, optimizer: OptimizerKind::Sgd }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(DpoError::InvalidConfig("beta must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DpoError::InvalidConfig("learning_rate must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(DpoError::InvalidConfig("epochs must be at least 1"));
        }
        if self.batch_prompts == 0 {
            return Err(DpoError::InvalidConfig("batch_prompts must be at least 1"));
        }
        Ok(())
    }
}

/// Frozen copy of the SFT policy.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot {
    params: ModelParams,
    fingerprint: u64,
}

impl ReferenceSnapshot {
    pub fn new(params: &ModelParams) -> Self {
        ReferenceSnapshot { fingerprint: params.fingerprint(), params: params.clone() }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn verify(&self) -> Result<(), DpoError> {
        if self.params.fingerprint() == self.fingerprint {
            Ok(())
        } else {
            Err(DpoError::ReferenceMutated)
        }
    }
}

/// `z = r(x, chosen) - r(x, rejected)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PairMargin(pub f64);

/// Tokenized preference record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPreference {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<Vec<usize>>,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_LINEAR_THRESHOLD {
        x
    } else if x < -SOFTPLUS_LINEAR_THRESHOLD {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn implicit_reward(
    policy: &ModelParams,
    reference: &ModelParams,
    prompt: &[usize],
    response: &[usize],
    beta: f64,
) -> Result<f64, DpoError> {
    Ok(beta * (policy.logprob(prompt, response)? - reference.logprob(prompt, response)?))
}

pub fn pair_margin(
    policy: &ModelParams,
    reference: &ModelParams,
    prompt: &[usize],
    chosen: &[usize],
    rejected: &[usize],
    beta: f64,
) -> Result<PairMargin, DpoError> {
    let z = implicit_reward(policy, reference, prompt, chosen, beta)?
        - implicit_reward(policy, reference, prompt, rejected, beta)?;
    if !z.is_finite() {
        return Err(DpoError::NonFinite("pair margin"));
    }
    Ok(PairMargin(z))
}

pub fn pair_loss(
    policy: &ModelParams,
    reference: &ModelParams,
    prompt: &[usize],
    chosen: &[usize],
    rejected: &[usize],
    beta: f64,
) -> Result<f64, DpoError> {
    let PairMargin(z) = pair_margin(policy, reference, prompt, chosen, rejected, beta)?;
    Ok(softplus(-z))
}

/// Exact gradient of [`pair_loss`] with respect to the policy parameters.
pub fn pair_grad(
    policy: &ModelParams,
    reference: &ModelParams,
    prompt: &[usize],
    chosen: &[usize],
    rejected: &[usize],
    beta: f64,
) -> Result<FlatGradient, DpoError> {
    let PairMargin(z) = pair_margin(policy, reference, prompt, chosen, rejected, beta)?;
    let mut grad = FlatGradient::zeros(policy.as_slice().len());
    if chosen == rejected {
        return Ok(grad);
    }
    let coef = -beta * sigmoid(-z);
    policy.accumulate_grad_logprob(prompt, chosen, coef, &mut grad.0)?;
    policy.accumulate_grad_logprob(prompt, rejected, -coef, &mut grad.0)?;
    Ok(grad)
}

fn check_negatives(record: usize, negatives: &[Vec<usize>]) -> Result<(), DpoError> {
    if negatives.is_empty() {
        return Err(DpoError::EmptyNegatives(record));
    }
    for (i, a) in negatives.iter().enumerate() {
        if let Some(j) = negatives[i + 1..].iter().position(|b| b == a) {
            return Err(DpoError::DuplicateNegative { record, first: i, second: i + 1 + j });
        }
    }
    Ok(())
}

pub fn multi_neg_loss(
    policy: &ModelParams,
    reference: &ModelParams,
    prompt: &[usize],
    chosen: &[usize],
    negatives: &[Vec<usize>],
    beta: f64,
) -> Result<f64, DpoError> {
    check_negatives(0, negatives)?;
    let mut total = 0.0;
    for n in negatives {
        total += pair_loss(policy, reference, prompt, chosen, n, beta)?;
    }
    Ok(total / negatives.len() as f64)
}

/// Loss, gradient and mean margin of one multi-negative record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordObjective {
    pub loss: f64,
    pub mean_margin: f64,
    pub grad: FlatGradient,
}

/// Reference log-probabilities of one record: chosen first, then each rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLogprobs {
    pub chosen: f64,
    pub rejected: Vec<f64>,
}

impl ReferenceLogprobs {
    pub fn compute(reference: &ModelParams, record: &TokenizedPreference) -> Result<Self, DpoError> {
        Ok(ReferenceLogprobs {
            chosen: reference.logprob(&record.prompt, &record.chosen)?,
            rejected: record
                .rejected
                .iter()
                .map(|n| reference.logprob(&record.prompt, n))
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Mean-of-pairs loss and its gradient, computing `grad log pi(chosen)` once.
/// Adds `scale * grad` into `grad_out` and returns `(loss, mean_margin)`.
fn accumulate_record(
    policy: &ModelParams,
    record: &TokenizedPreference,
    refs: &ReferenceLogprobs,
    beta: f64,
    scale: f64,
    grad_out: &mut [f64],
) -> Result<(f64, f64), DpoError> {
    let m = record.rejected.len() as f64;
    let mut neg_lps = Vec::with_capacity(record.rejected.len());
    for n in &record.rejected {
        neg_lps.push(policy.logprob(&record.prompt, n)?);
    }
    let chosen_lp = policy.logprob(&record.prompt, &record.chosen)?;
    let r_chosen = beta * (chosen_lp - refs.chosen);
    let mut loss = 0.0;
    let mut margin = 0.0;
    let mut chosen_coef = 0.0;
    let mut neg_coefs = Vec::with_capacity(neg_lps.len());
    for (lp, ref_lp) in neg_lps.iter().zip(&refs.rejected) {
        let z = r_chosen - beta * (lp - ref_lp);
        if !z.is_finite() {
            return Err(DpoError::NonFinite("pair margin"));
        }
        loss += softplus(-z);
        margin += z;
        let coef = -beta * sigmoid(-z) / m;
        chosen_coef += coef;
        neg_coefs.push(-coef);
    }
    policy.accumulate_grad_logprob(&record.prompt, &record.chosen, scale * chosen_coef, grad_out)?;
    for (n, c) in record.rejected.iter().zip(neg_coefs) {
        policy.accumulate_grad_logprob(&record.prompt, n, scale * c, grad_out)?;
    }
    Ok((loss / m, margin / m))
}

pub fn multi_neg_objective(
    policy: &ModelParams,
    reference: &ModelParams,
    record: &TokenizedPreference,
    beta: f64,
) -> Result<RecordObjective, DpoError> {
    check_negatives(0, &record.rejected)?;
    let refs = ReferenceLogprobs::compute(reference, record)?;
    let mut grad = FlatGradient::zeros(policy.as_slice().len());
    let (loss, mean_margin) = accumulate_record(policy, record, &refs, beta, 1.0, &mut grad.0)?;
    Ok(RecordObjective { loss, mean_margin, grad })
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub mean_margin: f64,
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub reference_fingerprint: u64,
}

impl DpoOutcome {
    /// Mean of the trace losses per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<f64> = self.trace.iter().filter(|r| r.epoch == e).map(|r| r.mean_loss).collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            })
            .collect()
    }
}

/// Aligns a copy of `sft` on `data`, keeping `sft` itself as the frozen
/// reference. Prompts are shuffled per epoch from `config.seed`; within a step
/// gradients are accumulated in record order.
pub fn dpo_train(sft: &ModelParams, data: &[TokenizedPreference], config: &DpoConfig) -> Result<DpoOutcome, DpoError> {
    config.validate()?;
    if data.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    for (i, r) in data.iter().enumerate() {
        check_negatives(i, &r.rejected)?;
    }
    let reference = ReferenceSnapshot::new(sft);
    let ref_lps: Vec<ReferenceLogprobs> = data
        .iter()
        .map(|r| ReferenceLogprobs::compute(reference.params(), r))
        .collect::<Result<_, _>>()?;

    let mut policy = sft.clone();
    let n_params = policy.as_slice().len();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, n_params);
    let mut rng = seed::rng(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; n_params];
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_prompts) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let (mut loss, mut margin) = (0.0, 0.0);
            for &i in batch {
                let (l, z) = accumulate_record(&policy, &data[i], &ref_lps[i], config.beta, scale, &mut grad)?;
                loss += l;
                margin += z;
            }
            let mean_loss = loss * scale;
            if !mean_loss.is_finite() {
                return Err(DpoError::NonFiniteLoss { epoch, step, loss: mean_loss });
            }
            trace.push(TraceRow { epoch, step, mean_loss, mean_margin: margin * scale });
            opt.step(policy.as_mut_slice(), &grad);
            step += 1;
        }
    }
    reference.verify()?;
    if policy.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(DpoError::NonFinite("aligned parameters"));
    }
    Ok(DpoOutcome { params: policy, trace, reference_fingerprint: reference.fingerprint() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::Dims;
    use core::f64::consts::LN_2;

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(Dims { vocab: 13, context: 6, embed: 3, hidden: 4 }, seed).unwrap()
    }

    #[test]
    fn softplus_matches_direct_formula() {
        for &x in &[-40.0, -5.0, 0.0, 1e-3, 5.0, 29.9, 31.0] {
            let direct = if x <= 0.0 { libm::log1p(libm::exp(x)) } else { x + libm::log1p(libm::exp(-x)) };
            assert!((softplus(x) - direct).abs() <= 1e-12 * direct, "x={x}");
        }
        assert!((softplus(-5.0) - 0.006715348489117967).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_policies_give_ln2_and_zero_reward() {
        let m = model(1);
        assert_eq!(implicit_reward(&m, &m, &[3, 4], &[5], 0.1).unwrap(), 0.0);
        assert_eq!(pair_loss(&m, &m, &[3, 4], &[5], &[6, 7], 0.1).unwrap(), LN_2);
        let negs = vec![vec![6], vec![7, 8], vec![9]];
        assert_eq!(multi_neg_loss(&m, &m, &[3, 4], &[5], &negs, 0.1).unwrap(), LN_2);
    }

    #[test]
    fn reward_is_linear_in_beta() {
        let (p, r) = (model(1), model(2));
        let a = implicit_reward(&p, &r, &[3], &[4, 5], 0.1).unwrap();
        let b = implicit_reward(&p, &r, &[3], &[4, 5], 0.2).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-14);
    }

    #[test]
    fn swapped_pairs_sum_at_least_2ln2() {
        let (p, r) = (model(3), model(4));
        let a = pair_loss(&p, &r, &[3], &[4, 5], &[6], 0.5).unwrap();
        let b = pair_loss(&p, &r, &[3], &[6], &[4, 5], 0.5).unwrap();
        assert!(a + b > 2.0 * LN_2);
    }

    #[test]
    fn equal_responses_give_zero_gradient() {
        let (p, r) = (model(3), model(4));
        let g = pair_grad(&p, &r, &[3], &[4, 5], &[4, 5], 0.1).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_at_reference_has_half_beta_coefficient() {
        let p = model(3);
        let beta = 0.3;
        let g = pair_grad(&p, &p, &[3], &[4, 5], &[6], beta).unwrap();
        let mut expect = p.grad_logprob(&[3], &[4, 5]).unwrap();
        expect.axpy(-1.0, &p.grad_logprob(&[3], &[6]).unwrap());
        expect.scale(-beta / 2.0);
        assert!(g.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn multi_neg_rejects_empty_and_duplicates() {
        let m = model(1);
        assert_eq!(multi_neg_loss(&m, &m, &[3], &[4], &[], 0.1), Err(DpoError::EmptyNegatives(0)));
        assert!(matches!(
            multi_neg_loss(&m, &m, &[3], &[4], &[vec![5], vec![6], vec![5]], 0.1),
            Err(DpoError::DuplicateNegative { first: 0, second: 2, .. })
        ));
    }

    #[test]
    fn objective_matches_pairwise_route() {
        let (p, r) = (model(5), model(6));
        let rec = TokenizedPreference { prompt: vec![3, 4], chosen: vec![5, 6], rejected: vec![vec![7], vec![8, 9], vec![]] };
        let obj = multi_neg_objective(&p, &r, &rec, 0.2).unwrap();
        let mut mean_grad = FlatGradient::zeros(p.as_slice().len());
        let mut mean_loss = 0.0;
        for n in &rec.rejected {
            mean_grad.axpy(1.0 / 3.0, &pair_grad(&p, &r, &rec.prompt, &rec.chosen, n, 0.2).unwrap());
            mean_loss += pair_loss(&p, &r, &rec.prompt, &rec.chosen, n, 0.2).unwrap() / 3.0;
        }
        assert!((obj.loss - mean_loss).abs() < 1e-12);
        assert!(obj.grad.max_abs_diff(&mean_grad) < 1e-12);
    }

    #[test]
    fn zero_lr_training_is_noop() {
        let sft = model(7);
        let data = vec![TokenizedPreference { prompt: vec![3], chosen: vec![4], rejected: vec![vec![5], vec![6]] }];
        let cfg = DpoConfig { learning_rate: 0.0, ..Default::default() };
        let out = dpo_train(&sft, &data, &cfg).unwrap();
        assert!(out.params.as_slice().iter().zip(sft.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(out.trace.last().unwrap().mean_loss, LN_2);
        assert_eq!(out.reference_fingerprint, sft.fingerprint());
    }

    #[test]
    fn config_validation() {
        assert!(DpoConfig { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(DpoConfig { batch_prompts: 0, ..Default::default() }.validate().is_err());
        assert!(DpoConfig::default().validate().is_ok());
    }
}
