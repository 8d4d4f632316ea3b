use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfcontrast_core::dpo::{
    dpo_train, implicit_reward, multi_neg_loss, pair_loss, pair_margin, DpoConfig, PairMargin, TokenizedPreference,
};
use selfcontrast_core::optim::OptimizerKind;
use selfcontrast_core::toylm::{Dims, ModelParams};

fn dims() -> Dims {
    Dims { vocab: 10, context: 5, embed: 4, hidden: 8 }
}

fn random_seq(rng: &mut ChaCha8Rng, max: usize) -> Vec<usize> {
    (0..rng.random_range(1..=max)).map(|_| rng.random_range(3..10)).collect()
}

fn dataset(n: usize, m: usize, seed: u64) -> Vec<TokenizedPreference> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let prompt = random_seq(&mut rng, 3);
            let chosen = random_seq(&mut rng, 4);
            let mut rejected: Vec<Vec<usize>> = Vec::new();
            while rejected.len() < m {
                let r = random_seq(&mut rng, 4);
                if r != chosen && !rejected.contains(&r) {
                    rejected.push(r);
                }
            }
            TokenizedPreference { prompt, chosen, rejected }
        })
        .collect()
}

#[test]
fn loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in 0..50 {
        let sft = ModelParams::init(dims(), s).unwrap();
        let mut policy = sft.clone();
        for v in policy.as_mut_slice() {
            *v += 0.3 * (rng.random::<f64>() - 0.5);
        }
        let rec = &dataset(1, 1, s)[0];
        let beta = rng.random_range(0.05..1.0);
        let at_reference = pair_loss(&sft, &sft, &rec.prompt, &rec.chosen, &rec.rejected[0], beta).unwrap();
        assert!((at_reference - LN_2).abs() <= 1e-12);
        let single = multi_neg_loss(&policy, &sft, &rec.prompt, &rec.chosen, &rec.rejected, beta).unwrap();
        let pair = pair_loss(&policy, &sft, &rec.prompt, &rec.chosen, &rec.rejected[0], beta).unwrap();
        assert!((single - pair).abs() <= 1e-12);
    }
}

#[test]
fn implicit_reward_is_scaled_log_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sft = ModelParams::init(dims(), 3).unwrap();
    let mut policy = sft.clone();
    for v in policy.as_mut_slice() {
        *v += 0.5 * (rng.random::<f64>() - 0.5);
    }
    for _ in 0..100 {
        let (x, y) = (random_seq(&mut rng, 3), random_seq(&mut rng, 5));
        let beta = rng.random_range(0.01..2.0);
        let direct = beta * (policy.logprob(&x, &y).unwrap() - sft.logprob(&x, &y).unwrap());
        assert!((implicit_reward(&policy, &sft, &x, &y, beta).unwrap() - direct).abs() <= 1e-12);
    }
}

#[test]
fn zero_learning_rate_is_bitwise_noop() {
    let sft = ModelParams::init(dims(), 8).unwrap();
    let data = dataset(20, 3, 8);
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::adamw()] {
        let cfg = DpoConfig { learning_rate: 0.0, epochs: 3, batch_prompts: 4, optimizer, ..DpoConfig::default() };
        let out = dpo_train(&sft, &data, &cfg).unwrap();
        let same = out.params.as_slice().iter().zip(sft.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }
}

#[test]
fn single_record_margin_grows_every_step() {
    let sft = ModelParams::init(dims(), 2).unwrap();
    let data = dataset(1, 1, 2);
    let rec = &data[0];
    let mut prev = PairMargin(0.0);
    for epochs in 1..=10 {
        let cfg = DpoConfig { learning_rate: 0.5, epochs, batch_prompts: 1, ..DpoConfig::default() };
        let out = dpo_train(&sft, &data, &cfg).unwrap();
        let z = pair_margin(&out.params, &sft, &rec.prompt, &rec.chosen, &rec.rejected[0], cfg.beta).unwrap();
        assert!(z > prev, "epoch {epochs}: {z:?} <= {prev:?}");
        prev = z;
    }
}

#[test]
fn reference_stays_frozen_and_loss_falls() {
    let sft = ModelParams::init(dims(), 4).unwrap();
    let before: Vec<u64> = sft.as_slice().iter().map(|v| v.to_bits()).collect();
    let data = dataset(64, 4, 4);
    let cfg = DpoConfig { beta: 0.5, learning_rate: 0.2, epochs: 12, batch_prompts: 8, seed: 3, ..DpoConfig::default() };
    let out = dpo_train(&sft, &data, &cfg).unwrap();
    let after: Vec<u64> = sft.as_slice().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert_eq!(out.reference_fingerprint, sft.fingerprint());

    let losses = out.epoch_losses();
    assert_eq!(losses.len(), 12);
    assert!((losses[0] - LN_2).abs() < 0.05, "first epoch starts near ln 2: {}", losses[0]);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "loss rose by more than 5%: {losses:?}");
    }
    assert!(losses[11] < losses[0]);
}

#[test]
fn training_is_deterministic() {
    let sft = ModelParams::init(dims(), 6).unwrap();
    let data = dataset(30, 2, 6);
    let cfg = DpoConfig { learning_rate: 0.05, epochs: 2, batch_prompts: 4, seed: 11, ..DpoConfig::default() };
    let a = dpo_train(&sft, &data, &cfg).unwrap();
    let b = dpo_train(&sft, &data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.trace, b.trace);
}
