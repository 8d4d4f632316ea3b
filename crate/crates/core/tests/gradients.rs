//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfcontrast_core::dpo::{multi_neg_loss, multi_neg_objective, pair_grad, pair_loss, TokenizedPreference};
use selfcontrast_core::toylm::{Dims, ModelParams};

const STEP: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1)`: relative for coordinates of order one and
/// above, absolute below that.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn central_diff(params: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let mut work = params.clone();
    (0..params.as_slice().len())
        .map(|i| {
            let x = params.as_slice()[i];
            work.as_mut_slice()[i] = x + STEP;
            let up = f(&work);
            work.as_mut_slice()[i] = x - STEP;
            let down = f(&work);
            work.as_mut_slice()[i] = x;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (ModelParams, Vec<usize>, Vec<usize>) {
    let dims = Dims {
        vocab: rng.random_range(5..9),
        context: rng.random_range(3..6),
        embed: rng.random_range(1..4),
        hidden: rng.random_range(2..6),
    };
    let mut params = ModelParams::init(dims, rng.random()).unwrap();
    // Non-zero biases so every block is exercised.
    for v in params.as_mut_slice().iter_mut() {
        *v += 0.1 * (rng.random::<f64>() - 0.5);
    }
    let plen = rng.random_range(1..dims.context);
    let prompt = (0..plen).map(|_| rng.random_range(3..dims.vocab)).collect();
    let rlen = rng.random_range(0..6);
    let response = (0..rlen).map(|_| rng.random_range(3..dims.vocab)).collect();
    (params, prompt, response)
}

fn perturbed(params: &ModelParams, rng: &mut ChaCha8Rng, scale: f64) -> ModelParams {
    let mut p = params.clone();
    for v in p.as_mut_slice() {
        *v += scale * (rng.random::<f64>() - 0.5);
    }
    p
}

#[test]
fn grad_logprob_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..120 {
        let (params, prompt, response) = random_instance(&mut rng);
        let analytic = params.grad_logprob(&prompt, &response).unwrap();
        let numeric = central_diff(&params, |p| p.logprob(&prompt, &response).unwrap());
        for (a, n) in analytic.as_slice().iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    assert!(worst <= MAX_REL_ERR, "max relative error {worst:e}");
}

#[test]
fn pair_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (reference, prompt, chosen) = random_instance(&mut rng);
        let policy = perturbed(&reference, &mut rng, 0.4);
        let vocab = reference.dims().vocab;
        let rejected: Vec<usize> = (0..rng.random_range(0..5)).map(|_| rng.random_range(3..vocab)).collect();
        let beta = rng.random_range(0.05..2.0);
        let analytic = pair_grad(&policy, &reference, &prompt, &chosen, &rejected, beta).unwrap();
        let numeric = central_diff(&policy, |p| pair_loss(p, &reference, &prompt, &chosen, &rejected, beta).unwrap());
        for (a, n) in analytic.as_slice().iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    assert!(worst <= MAX_REL_ERR, "max relative error {worst:e}");
}

#[test]
fn multi_neg_grad_matches_finite_differences_and_pair_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_fd: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for _ in 0..60 {
        let (reference, prompt, chosen) = random_instance(&mut rng);
        let policy = perturbed(&reference, &mut rng, 0.4);
        let vocab = reference.dims().vocab;
        let m = rng.random_range(1..5);
        let mut rejected: Vec<Vec<usize>> = Vec::new();
        while rejected.len() < m {
            let cand: Vec<usize> = (0..rng.random_range(0..5)).map(|_| rng.random_range(3..vocab)).collect();
            if !rejected.contains(&cand) {
                rejected.push(cand);
            }
        }
        let beta = rng.random_range(0.05..1.0);
        let record = TokenizedPreference { prompt: prompt.clone(), chosen: chosen.clone(), rejected: rejected.clone() };
        let obj = multi_neg_objective(&policy, &reference, &record, beta).unwrap();

        let numeric = central_diff(&policy, |p| multi_neg_loss(p, &reference, &prompt, &chosen, &rejected, beta).unwrap());
        for (a, n) in obj.grad.as_slice().iter().zip(&numeric) {
            worst_fd = worst_fd.max(rel_err(*a, *n));
        }

        let mut mean = vec![0.0; obj.grad.len()];
        for n in &rejected {
            let g = pair_grad(&policy, &reference, &prompt, &chosen, n, beta).unwrap();
            for (acc, v) in mean.iter_mut().zip(g.as_slice()) {
                *acc += v / m as f64;
            }
        }
        for (a, b) in obj.grad.as_slice().iter().zip(&mean) {
            worst_identity = worst_identity.max((a - b).abs());
        }
        let direct = multi_neg_loss(&policy, &reference, &prompt, &chosen, &rejected, beta).unwrap();
        assert!((obj.loss - direct).abs() < 1e-12);
    }
    assert!(worst_fd <= MAX_REL_ERR, "finite-difference error {worst_fd:e}");
    assert!(worst_identity <= 1e-12, "mean-of-pairs identity error {worst_identity:e}");
}
