//! A tiny fixed-context autoregressive policy.
//!
//! At each step the last `context` tokens of `prompt ++ [BOS] ++ generated`
//! (left-padded with PAD) are embedded, concatenated, passed through one tanh
//! hidden layer and a linear read-out over the whole vocabulary:
//!
//! ```text
//! x      = concat(E[c_1], ..., E[c_K])            (K*d)
//! hidden = tanh(x W1 + b1)                         (h)
//! logits = hidden W2 + b2                          (V)
//! ```
//!
//! BOS separates the prompt from the response; EOS terminates the response.
//! All parameters live in one flat `f64` vector with the canonical layout
//! `E (V x d) | W1 (K*d x h) | b1 (h) | W2 (h x V) | b2 (V)`, matrices row-major.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BOS, EOS, PAD, RESERVED};
use crate::optim::{Optimizer, OptimizerKind};
use crate::seed;

/// Hard cap on response length accepted by [`ModelParams::logprob`].
pub const MAX_RESPONSE_TOKENS: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(&'static str),
    #[error("parameter vector has {got} entries, dimensions need {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("parameter {index} is not finite")]
    NonFiniteParam { index: usize },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("prompt of {prompt} tokens does not fit a context of {context} (one slot is BOS)")]
    PromptTooLong { prompt: usize, context: usize },
    #[error("response of {0} tokens exceeds the limit of {MAX_RESPONSE_TOKENS}")]
    ResponseTooLong(usize),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
}

/// Model shape. Keys: `vocab`, `context`, `embed`, `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub vocab: usize,
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

impl Dims {
    /// Default toy shape: K=8, d=8, h=32.
    pub fn toy(vocab: usize) -> Self {
        Dims { vocab, context: 8, embed: 8, hidden: 32 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab <= RESERVED {
            return Err(ModelError::InvalidDims("vocab must exceed the reserved tokens"));
        }
        if self.context < 2 || self.embed == 0 || self.hidden == 0 {
            return Err(ModelError::InvalidDims("context >= 2, embed >= 1, hidden >= 1 required"));
        }
        Ok(())
    }

    /// `V*d + K*d*h + h + h*V + V`.
    pub fn param_count(&self) -> usize {
        let Dims { vocab: v, context: k, embed: d, hidden: h } = *self;
        v * d + k * d * h + h + h * v + v
    }

    pub fn layout(&self) -> Layout {
        let Dims { vocab: v, context: k, embed: d, hidden: h } = *self;
        let e = 0..v * d;
        let w1 = e.end..e.end + k * d * h;
        let b1 = w1.end..w1.end + h;
        let w2 = b1.end..b1.end + h * v;
        let b2 = w2.end..w2.end + v;
        Layout { embedding: e, w1, b1, w2, b2 }
    }
}

/// Gradient aligned with the canonical parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient(pub Vec<f64>);

impl FlatGradient {
    pub fn zeros(len: usize) -> Self {
        FlatGradient(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &FlatGradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|a| *a *= alpha);
    }

    pub fn max_abs_diff(&self, other: &FlatGradient) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| libm::fabs(a - b)).fold(0.0, f64::max)
    }
}

/// Dense parameters of the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: Dims,
    values: Vec<f64>,
}

/// Activations of one decoding step, kept for the backward pass.
struct StepCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ModelParams {
    /// Weights uniform in `[-s, s]` with `s = 1/sqrt(fan_in)` (fan-in 1 for the
    /// embedding table, `K*d` for W1, `h` for W2); biases zero. Entries are
    /// drawn in canonical order.
    pub fn init(dims: Dims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let layout = dims.layout();
        let mut rng = seed::rng(seed);
        let mut values = vec![0.0; dims.param_count()];
        let mut fill = |range: Range<usize>, fan_in: usize| {
            let s = 1.0 / libm::sqrt(fan_in as f64);
            for v in &mut values[range] {
                *v = (2.0 * rng.random::<f64>() - 1.0) * s;
            }
        };
        fill(layout.embedding, 1);
        fill(layout.w1, dims.context * dims.embed);
        fill(layout.w2, dims.hidden);
        Ok(ModelParams { dims, values })
    }

    /// All-zero parameters: a uniform next-token distribution everywhere.
    pub fn zeros(dims: Dims) -> Result<Self, ModelError> {
        dims.validate()?;
        Ok(ModelParams { dims, values: vec![0.0; dims.param_count()] })
    }

    pub fn from_flat(dims: Dims, values: Vec<f64>) -> Result<Self, ModelError> {
        dims.validate()?;
        if values.len() != dims.param_count() {
            return Err(ModelError::WrongLength { expected: dims.param_count(), got: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteParam { index });
        }
        Ok(ModelParams { dims, values })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the flat vector; callers must keep entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// 64-bit FNV-1a over the bit patterns of all entries and the dimensions.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |word: u64| {
            for byte in word.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let d = self.dims;
        for w in [d.vocab, d.context, d.embed, d.hidden] {
            eat(w as u64);
        }
        for v in &self.values {
            eat(v.to_bits());
        }
        h
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        match tokens.iter().find(|&&t| t >= self.dims.vocab) {
            Some(&token) => Err(ModelError::TokenOutOfRange { token, vocab: self.dims.vocab }),
            None => Ok(()),
        }
    }

    fn check_sequence(&self, prompt: &[usize], response: &[usize]) -> Result<(), ModelError> {
        self.check_tokens(prompt)?;
        self.check_tokens(response)?;
        if prompt.len() + 1 > self.dims.context {
            return Err(ModelError::PromptTooLong { prompt: prompt.len(), context: self.dims.context });
        }
        if response.len() > MAX_RESPONSE_TOKENS {
            return Err(ModelError::ResponseTooLong(response.len()));
        }
        Ok(())
    }

    /// Context window ending just before response position `t`.
    fn context_at(&self, prompt: &[usize], response: &[usize], t: usize) -> Vec<usize> {
        let k = self.dims.context;
        let seq_len = prompt.len() + 1 + t;
        let mut ctx = vec![PAD; k];
        let take = seq_len.min(k);
        for slot in 0..take {
            let pos = seq_len - take + slot;
            ctx[k - take + slot] = if pos < prompt.len() {
                prompt[pos]
            } else if pos == prompt.len() {
                BOS
            } else {
                response[pos - prompt.len() - 1]
            };
        }
        ctx
    }

    fn forward(&self, ctx: &[usize]) -> StepCache {
        let Dims { vocab: v, embed: d, hidden: h, .. } = self.dims;
        let layout = self.dims.layout();
        let emb = &self.values[layout.embedding];
        let w1 = &self.values[layout.w1];
        let b1 = &self.values[layout.b1];
        let w2 = &self.values[layout.w2];
        let b2 = &self.values[layout.b2];

        let mut x = Vec::with_capacity(ctx.len() * d);
        for &tok in ctx {
            x.extend_from_slice(&emb[tok * d..(tok + 1) * d]);
        }
        let mut pre = b1.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w1[i * h..(i + 1) * h];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += xi * w;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&a| libm::tanh(a)).collect();
        let mut logits = b2.to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            let row = &w2[j * v..(j + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += hj * w;
            }
        }
        let log_probs = log_softmax(&logits);
        StepCache { x, hidden, log_probs }
    }

    /// Adds `scale * d log p(target | ctx) / d params` into `grad`.
    fn backward(&self, ctx: &[usize], cache: &StepCache, target: usize, scale: f64, grad: &mut [f64]) {
        let Dims { vocab: v, embed: d, hidden: h, .. } = self.dims;
        let layout = self.dims.layout();
        // d log p / d logits = onehot(target) - softmax
        let mut dlogits: Vec<f64> = cache.log_probs.iter().map(|&lp| -scale * libm::exp(lp)).collect();
        dlogits[target] += scale;

        for (g, dl) in grad[layout.b2.clone()].iter_mut().zip(&dlogits) {
            *g += dl;
        }
        let w2 = &self.values[layout.w2.clone()];
        let mut dpre = vec![0.0; h];
        {
            let gw2 = &mut grad[layout.w2.clone()];
            for j in 0..h {
                let hj = cache.hidden[j];
                let row = &w2[j * v..(j + 1) * v];
                let grow = &mut gw2[j * v..(j + 1) * v];
                let mut dh = 0.0;
                for c in 0..v {
                    grow[c] += hj * dlogits[c];
                    dh += row[c] * dlogits[c];
                }
                dpre[j] = dh * (1.0 - hj * hj);
            }
        }
        for (g, dp) in grad[layout.b1.clone()].iter_mut().zip(&dpre) {
            *g += dp;
        }
        let w1 = &self.values[layout.w1.clone()];
        let mut dx = vec![0.0; cache.x.len()];
        {
            let gw1 = &mut grad[layout.w1.clone()];
            for (i, &xi) in cache.x.iter().enumerate() {
                let row = &w1[i * h..(i + 1) * h];
                let grow = &mut gw1[i * h..(i + 1) * h];
                let mut acc = 0.0;
                for j in 0..h {
                    grow[j] += xi * dpre[j];
                    acc += row[j] * dpre[j];
                }
                dx[i] = acc;
            }
        }
        let ge = &mut grad[layout.embedding];
        for (slot, &tok) in ctx.iter().enumerate() {
            for k in 0..d {
                ge[tok * d + k] += dx[slot * d + k];
            }
        }
    }

    /// Exact next-token log-probabilities after `prompt ++ [BOS] ++ generated`.
    pub fn next_token_log_probs(&self, prompt: &[usize], generated: &[usize]) -> Result<Vec<f64>, ModelError> {
        self.check_sequence(prompt, generated)?;
        let ctx = self.context_at(prompt, generated, generated.len());
        Ok(self.forward(&ctx).log_probs)
    }

    /// `log p(response ++ [EOS] | prompt)`, summed over every response
    /// position including the terminating EOS.
    pub fn logprob(&self, prompt: &[usize], response: &[usize]) -> Result<f64, ModelError> {
        self.check_sequence(prompt, response)?;
        let mut total = 0.0;
        for t in 0..=response.len() {
            let ctx = self.context_at(prompt, response, t);
            let target = response.get(t).copied().unwrap_or(EOS);
            total += self.forward(&ctx).log_probs[target];
        }
        Ok(total)
    }

    /// Adds `scale * grad log p(response | prompt)` into `grad` and returns the
    /// log-probability.
    pub fn accumulate_grad_logprob(
        &self,
        prompt: &[usize],
        response: &[usize],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        self.check_sequence(prompt, response)?;
        debug_assert_eq!(grad.len(), self.values.len());
        let mut total = 0.0;
        for t in 0..=response.len() {
            let ctx = self.context_at(prompt, response, t);
            let target = response.get(t).copied().unwrap_or(EOS);
            let cache = self.forward(&ctx);
            total += cache.log_probs[target];
            self.backward(&ctx, &cache, target, scale, grad);
        }
        Ok(total)
    }

    /// Log-probability together with its analytic gradient.
    pub fn logprob_and_grad(&self, prompt: &[usize], response: &[usize]) -> Result<(f64, FlatGradient), ModelError> {
        let mut grad = FlatGradient::zeros(self.values.len());
        let lp = self.accumulate_grad_logprob(prompt, response, 1.0, &mut grad.0)?;
        Ok((lp, grad))
    }

    pub fn grad_logprob(&self, prompt: &[usize], response: &[usize]) -> Result<FlatGradient, ModelError> {
        self.logprob_and_grad(prompt, response).map(|(_, g)| g)
    }

    /// Greedy decoding: argmax at every step, lowest token id on ties.
    pub fn greedy(&self, prompt: &[usize], max_len: usize) -> Result<Vec<usize>, ModelError> {
        self.decode(prompt, max_len, |lp| argmax(lp))
    }

    /// Ancestral sampling. Logits are divided by the temperature, then the
    /// nucleus is the shortest prefix (descending probability, ties by lower
    /// id) whose mass reaches `top_p`. A temperature of exactly zero selects
    /// greedy decoding. Generation stops at `max_len` tokens or when a reserved
    /// token is drawn (EOS, or BOS/PAD which the policy can in principle emit).
    pub fn sample(
        &self,
        prompt: &[usize],
        sampling: Sampling,
        max_len: usize,
        seed: u64,
    ) -> Result<Vec<usize>, ModelError> {
        if sampling.temperature == 0.0 {
            return self.greedy(prompt, max_len);
        }
        let mut rng = seed::rng(seed);
        self.decode(prompt, max_len, |lp| {
            let nucleus = nucleus(lp, sampling.temperature, sampling.top_p);
            let mass: f64 = nucleus.iter().map(|&(_, p)| p).sum();
            let mut u = rng.random::<f64>() * mass;
            for &(tok, p) in &nucleus {
                if u < p {
                    return tok;
                }
                u -= p;
            }
            nucleus.last().map(|&(t, _)| t).unwrap_or(EOS)
        })
    }

    fn decode(
        &self,
        prompt: &[usize],
        max_len: usize,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> Result<Vec<usize>, ModelError> {
        self.check_sequence(prompt, &[])?;
        let mut out: Vec<usize> = Vec::new();
        while out.len() < max_len.min(MAX_RESPONSE_TOKENS) {
            let ctx = self.context_at(prompt, &out, out.len());
            let tok = pick(&self.forward(&ctx).log_probs);
            if tok < RESERVED {
                break;
            }
            out.push(tok);
        }
        Ok(out)
    }
}

/// Decoding temperature and nucleus mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { temperature: 1.0, top_p: 1.0 }
    }
}

impl Sampling {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err("temperature must be finite and non-negative (0 selects greedy)");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err("top_p must lie in (0, 1]");
        }
        Ok(())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| libm::exp(l - max)).sum();
    let lse = max + libm::log(sum);
    logits.iter().map(|&l| l - lse).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Tempered nucleus as `(token, unnormalized probability)` in descending
/// probability order, ties by lower token id.
pub fn nucleus(log_probs: &[f64], temperature: f64, top_p: f64) -> Vec<(usize, f64)> {
    let scaled: Vec<f64> = log_probs.iter().map(|&lp| lp / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(libm::exp).collect();
    let mut order: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if top_p >= 1.0 {
        return order;
    }
    let mut cum = 0.0;
    let mut keep = order.len();
    for (i, &(_, p)) in order.iter().enumerate() {
        cum += p;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    order
}

/// One tokenized (prompt, target) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 30, batch_size: 16, learning_rate: 1e-2, seed: 0, optimizer: OptimizerKind::Sgd }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Mean over examples of the sequence negative log-likelihood
/// `-log p(target ++ [EOS] | prompt)`.
pub fn mean_nll(params: &ModelParams, data: &[SftExample]) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut total = 0.0;
    for ex in data {
        total -= params.logprob(&ex.prompt, &ex.target)?;
    }
    Ok(total / data.len() as f64)
}

/// Supervised fine-tuning by mini-batch descent on the mean sequence NLL.
/// Returns the trained parameters and, per epoch, the mean NLL over the
/// batches seen in that epoch (each measured before its update).
pub fn sft_train(
    params: &ModelParams,
    data: &[SftExample],
    config: &SftConfig,
) -> Result<(ModelParams, Vec<f64>), ModelError> {
    config.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut model = params.clone();
    let n_params = model.values.len();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, n_params);
    let mut rng = seed::rng(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut grad = vec![0.0; n_params];
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = -1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &data[i];
                batch_loss -= model.accumulate_grad_logprob(&ex.prompt, &ex.target, scale, &mut grad)?;
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, step, loss: batch_loss });
            }
            epoch_total += batch_loss;
            opt.step(&mut model.values, &grad);
            step += 1;
        }
        epoch_losses.push(epoch_total / data.len() as f64);
    }
    if let Some(index) = model.values.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteParam { index });
    }
    Ok((model, epoch_losses))
}
