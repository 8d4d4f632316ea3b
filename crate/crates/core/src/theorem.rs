//! Variance algebra of multi-pair versus multi-negative gradient estimators.
//!
//! Gradients contributed by a positive and a negative sample are modeled as a
//! bivariate normal `(g_p, g_n) ~ N(mu1, mu2; sigma1^2, sigma2^2; rho)` in one
//! gradient coordinate. The target gradient is `mu1 - mu2`.
//!
//! - Multi-pair estimator: mean of `g_p_i - g_n_i` over `l` independent pairs,
//!   variance `(sigma1^2 + sigma2^2 - 2 sigma1 sigma2 rho) / l`.
//! - Multi-negative estimator: `g_p0 - mean(g_n_i)` over one positive and `m`
//!   negatives, variance `sigma1^2 + sigma2^2 / m - 2 sigma1 sigma2 rho`.
//!
//! The negative exploiting potential is
//! `lambda = sigma2^2 / (sigma1^2 + sigma2^2 - 2 sigma1 sigma2 rho)`, and for
//! `l < 1/(1 - lambda)` any `m >= lambda / (lambda + 1/l - 1)` makes the
//! multi-negative variance no larger than the multi-pair one.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Trials per independently seeded block in [`simulate_mse`].
pub const SIM_BLOCK: u64 = 4096;

/// Relative slack absorbed before rounding the real-valued bound up.
const BOUND_ROUNDING_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoremError {
    #[error("invalid gradient model: {0}")]
    InvalidModel(&'static str),
    #[error("degenerate pair variance sigma1^2 + sigma2^2 - 2 sigma1 sigma2 rho = {0}")]
    Degenerate(f64),
    #[error("no finite bound: requires l < 1/(1 - lambda), got lambda = {lambda}, l = {l}")]
    Precondition { lambda: f64, l: u64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(&'static str),
}

/// Keys: `mu1`, `mu2`, `sigma1`, `sigma2`, `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientModel {
    #[serde(default)]
    pub mu1: f64,
    #[serde(default)]
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    #[serde(default)]
    pub rho: f64,
}

impl GradientModel {
    pub fn new(sigma1: f64, sigma2: f64, rho: f64) -> Self {
        GradientModel { mu1: 0.0, mu2: 0.0, sigma1, sigma2, rho }
    }

    pub fn with_means(mut self, mu1: f64, mu2: f64) -> Self {
        self.mu1 = mu1;
        self.mu2 = mu2;
        self
    }

    /// `sigma1^2 + sigma2^2 - 2 sigma1 sigma2 rho`, the variance of one pair
    /// difference.
    pub fn pair_variance(&self) -> f64 {
        self.sigma1 * self.sigma1 + self.sigma2 * self.sigma2 - 2.0 * self.sigma1 * self.sigma2 * self.rho
    }

    pub fn target(&self) -> f64 {
        self.mu1 - self.mu2
    }

    pub fn validate(&self) -> Result<(), TheoremError> {
        if ![self.mu1, self.mu2, self.sigma1, self.sigma2, self.rho].iter().all(|v| v.is_finite()) {
            return Err(TheoremError::InvalidModel("all parameters must be finite"));
        }
        if self.sigma1 < 0.0 || self.sigma2 < 0.0 {
            return Err(TheoremError::InvalidModel("standard deviations must be non-negative"));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(TheoremError::InvalidModel("rho must lie in [-1, 1]"));
        }
        let pv = self.pair_variance();
        if pv <= 0.0 {
            return Err(TheoremError::Degenerate(pv));
        }
        Ok(())
    }
}

/// Negative exploiting potential `sigma2^2 / pair_variance`.
pub fn lambda_of(model: &GradientModel) -> Result<f64, TheoremError> {
    model.validate()?;
    Ok(model.sigma2 * model.sigma2 / model.pair_variance())
}

/// Smallest integer `m >= lambda / (lambda + 1/l - 1)`; requires
/// `lambda + 1/l - 1 > 0`.
pub fn min_negatives(lambda: f64, l: u64) -> Result<u64, TheoremError> {
    if l == 0 {
        return Err(TheoremError::InvalidConfig("l must be at least 1"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(TheoremError::InvalidModel("lambda must be positive and finite"));
    }
    let denom = lambda + 1.0 / l as f64 - 1.0;
    if denom <= 0.0 {
        return Err(TheoremError::Precondition { lambda, l });
    }
    let bound = lambda / denom;
    let m = libm::ceil(bound - BOUND_ROUNDING_SLACK * bound.max(1.0));
    Ok((m as u64).max(1))
}

/// Variance of the mean over `l` independent pair differences.
pub fn var_multipair(model: &GradientModel, l: u64) -> f64 {
    model.pair_variance() / l as f64
}

/// Variance of one positive minus the mean of `m` negatives.
pub fn var_multineg(model: &GradientModel, m: u64) -> f64 {
    let s1 = model.sigma1;
    let s2 = model.sigma2;
    s1 * s1 + s2 * s2 / m as f64 - 2.0 * s1 * s2 * model.rho
}

/// Effective number of pairs reachable with unboundedly many negatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairLimit {
    Finite(f64),
    Infinite,
}

pub fn upper_limit_pairs(lambda: f64) -> PairLimit {
    if lambda >= 1.0 {
        PairLimit::Infinite
    } else {
        PairLimit::Finite(1.0 / (1.0 - lambda))
    }
}

/// Keys: `l`, `m`, `trials`, `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub l: u64,
    pub m: u64,
    pub trials: u64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), TheoremError> {
        if self.l == 0 || self.m == 0 || self.trials == 0 {
            return Err(TheoremError::InvalidConfig("l, m and trials must be at least 1"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> u64 {
        self.trials.div_ceil(SIM_BLOCK)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Validity {
    Valid,
    Invalid,
}

/// The joint law with `Cov(p0, n_i) = sigma1 sigma2 rho` and uncorrelated
/// negatives exists only when `m rho^2 <= 1`.
pub fn multineg_validity(model: &GradientModel, m: u64) -> Validity {
    if m as f64 * model.rho * model.rho <= 1.0 + 1e-12 {
        Validity::Valid
    } else {
        Validity::Invalid
    }
}

/// Running sums of estimator errors `e = estimate - target`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorMoments {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
    pub sum_quad: f64,
}

impl ErrorMoments {
    fn push(&mut self, e: f64) {
        let e2 = e * e;
        self.n += 1;
        self.sum += e;
        self.sum_sq += e2;
        self.sum_quad += e2 * e2;
    }

    pub fn merge(&mut self, other: &ErrorMoments) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.sum_quad += other.sum_quad;
    }

    /// Mean squared error.
    pub fn mse(&self) -> f64 {
        self.sum_sq / self.n as f64
    }

    /// Mean error (bias).
    pub fn bias(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Sample variance of the estimator.
    pub fn variance(&self) -> f64 {
        let n = self.n as f64;
        let mean = self.bias();
        (self.sum_sq - n * mean * mean) / (n - 1.0).max(1.0)
    }

    /// Standard error of [`Self::mse`].
    pub fn mse_std_error(&self) -> f64 {
        let n = self.n as f64;
        let mse = self.mse();
        let var_e2 = (self.sum_quad / n - mse * mse).max(0.0);
        libm::sqrt(var_e2 / n)
    }

    /// Standard error of [`Self::bias`].
    pub fn mean_std_error(&self) -> f64 {
        libm::sqrt(self.variance() / self.n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMoments {
    pub multipair: ErrorMoments,
    pub multineg: Option<ErrorMoments>,
}

/// Trials `[block * SIM_BLOCK, min((block + 1) * SIM_BLOCK, trials))`. Each
/// block and scheme draws from its own stream `derive2(seed, scheme, block)`,
/// so results do not depend on how blocks are scheduled.
pub fn simulate_block(model: &GradientModel, config: &SimConfig, block: u64) -> BlockMoments {
    let start = block * SIM_BLOCK;
    let count = SIM_BLOCK.min(config.trials.saturating_sub(start));
    let target = model.target();
    let (s1, s2, rho) = (model.sigma1, model.sigma2, model.rho);
    let resid = libm::sqrt((1.0 - rho * rho).max(0.0));

    let mut pair = ErrorMoments::default();
    let mut rng = seed::rng(seed::derive2(config.seed, 0, block));
    for _ in 0..count {
        let mut acc = 0.0;
        for _ in 0..config.l {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let gp = model.mu1 + s1 * z1;
            let gn = model.mu2 + s2 * (rho * z1 + resid * z2);
            acc += gp - gn;
        }
        pair.push(acc / config.l as f64 - target);
    }

    let multineg = match multineg_validity(model, config.m) {
        Validity::Invalid => None,
        Validity::Valid => {
            // p0 = mu1 + s1 (rho * sum_i w_i + sqrt(1 - m rho^2) z0), n_i = mu2 + s2 w_i
            // gives Var p0 = s1^2, Cov(p0, n_i) = s1 s2 rho, Cov(n_i, n_j) = 0.
            let m = config.m as f64;
            let own = libm::sqrt((1.0 - m * rho * rho).max(0.0));
            let mut neg = ErrorMoments::default();
            let mut rng = seed::rng(seed::derive2(config.seed, 1, block));
            for _ in 0..count {
                let mut w_sum = 0.0;
                for _ in 0..config.m {
                    let w: f64 = rng.sample(StandardNormal);
                    w_sum += w;
                }
                let z0: f64 = rng.sample(StandardNormal);
                let gp0 = model.mu1 + s1 * (rho * w_sum + own * z0);
                let mean_gn = model.mu2 + s2 * w_sum / m;
                neg.push(gp0 - mean_gn - target);
            }
            Some(neg)
        }
    };
    BlockMoments { multipair: pair, multineg }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimResult {
    pub mse_multipair: f64,
    pub mse_multineg: Option<f64>,
    pub sampling_validity: Validity,
    pub multipair: ErrorMoments,
    pub multineg: Option<ErrorMoments>,
}

impl SimResult {
    /// Merges per-block moments in block order.
    pub fn from_blocks(blocks: impl IntoIterator<Item = BlockMoments>) -> Self {
        let mut pair = ErrorMoments::default();
        let mut neg: Option<ErrorMoments> = None;
        let mut valid = true;
        for b in blocks {
            pair.merge(&b.multipair);
            match b.multineg {
                Some(m) => neg.get_or_insert_with(ErrorMoments::default).merge(&m),
                None => valid = false,
            }
        }
        let neg = if valid { neg } else { None };
        SimResult {
            mse_multipair: pair.mse(),
            mse_multineg: neg.map(|n| n.mse()),
            sampling_validity: if valid { Validity::Valid } else { Validity::Invalid },
            multipair: pair,
            multineg: neg,
        }
    }

    /// Whether `mse_multineg <= mse_multipair` holds within `k` combined
    /// standard errors. `None` when the multi-negative law is invalid.
    pub fn multineg_not_worse(&self, k: f64) -> Option<bool> {
        let neg = self.multineg?;
        let (a, b) = (neg.mse_std_error(), self.multipair.mse_std_error());
        let se = libm::sqrt(a * a + b * b);
        Some(neg.mse() <= self.multipair.mse() + k * se)
    }
}

/// Monte Carlo estimate of both estimators' mean squared error against
/// `mu1 - mu2`. Deterministic in the config.
pub fn simulate_mse(model: &GradientModel, config: &SimConfig) -> Result<SimResult, TheoremError> {
    model.validate()?;
    config.validate()?;
    Ok(SimResult::from_blocks((0..config.blocks()).map(|b| simulate_block(model, config, b))))
}
