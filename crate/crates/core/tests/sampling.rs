use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfcontrast_core::corpus::RESERVED;
use selfcontrast_core::seed;
use selfcontrast_core::toylm::{log_softmax, Dims, ModelParams, Sampling};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn peaked_model(vocab: usize, seed: u64) -> ModelParams {
    let dims = Dims { vocab, context: 4, embed: 3, hidden: 6 };
    let mut params = ModelParams::init(dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.as_mut_slice() {
        *v += 1.5 * (rng.random::<f64>() - 0.5);
    }
    params
}

/// Target distribution over outcome classes for a single decoding step:
/// class 0 merges every reserved token (they all stop generation), class
/// `t - RESERVED + 1` is symbol `t`.
fn tempered_classes(log_probs: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let scaled: Vec<f64> = log_probs.iter().map(|lp| lp / temperature).collect();
    let p: Vec<f64> = log_softmax(&scaled).iter().map(|x| x.exp()).collect();
    // Nucleus by brute force: sort descending, ties by id, keep the shortest
    // prefix reaching top_p, renormalize.
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut kept = vec![false; p.len()];
    let mut cum = 0.0;
    for &i in &order {
        kept[i] = true;
        cum += p[i];
        if cum >= top_p {
            break;
        }
    }
    let mass: f64 = (0..p.len()).filter(|&i| kept[i]).map(|i| p[i]).sum();
    let mut classes = vec![0.0; p.len() - RESERVED + 1];
    for i in 0..p.len() {
        if kept[i] {
            let c = if i < RESERVED { 0 } else { i - RESERVED + 1 };
            classes[c] += p[i] / mass;
        }
    }
    classes
}

fn chi_square_p_value(counts: &[u64], expected_probs: &[f64], n: u64) -> f64 {
    let mut stat = 0.0;
    let mut df = 0usize;
    for (&c, &p) in counts.iter().zip(expected_probs) {
        if p == 0.0 {
            assert_eq!(c, 0, "outcome outside the support was sampled");
            continue;
        }
        let e = p * n as f64;
        stat += (c as f64 - e).powi(2) / e;
        df += 1;
    }
    let dist = ChiSquared::new((df - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn empirical_classes(params: &ModelParams, prompt: &[usize], sampling: Sampling, n: u64, root: u64) -> Vec<u64> {
    let mut counts = vec![0u64; params.dims().vocab - RESERVED + 1];
    for i in 0..n {
        let out = params.sample(prompt, sampling, 1, seed::derive(root, i)).unwrap();
        match out.first() {
            None => counts[0] += 1,
            Some(&t) => counts[t - RESERVED + 1] += 1,
        }
    }
    counts
}

#[test]
fn first_token_frequencies_pass_chi_square() {
    let params = peaked_model(9, 11);
    let prompt = [3, 5, 4];
    let lp = params.next_token_log_probs(&prompt, &[]).unwrap();
    let n = 100_000;
    for (k, sampling) in [
        Sampling { temperature: 1.0, top_p: 1.0 },
        Sampling { temperature: 0.7, top_p: 1.0 },
        Sampling { temperature: 1.3, top_p: 0.8 },
    ]
    .into_iter()
    .enumerate()
    {
        let expected = tempered_classes(&lp, sampling.temperature, sampling.top_p);
        let counts = empirical_classes(&params, &prompt, sampling, n, 1000 + k as u64);
        let p = chi_square_p_value(&counts, &expected, n);
        assert!(p > 0.01, "{sampling:?}: chi-square p-value {p}");
    }
}

#[test]
fn frequencies_within_three_sigma() {
    let params = peaked_model(7, 5);
    let prompt = [4, 4];
    let lp = params.next_token_log_probs(&prompt, &[]).unwrap();
    let expected = tempered_classes(&lp, 1.0, 1.0);
    let n = 100_000u64;
    let counts = empirical_classes(&params, &prompt, Sampling::default(), n, 77);
    for (c, p) in counts.iter().zip(&expected) {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sd + 1.0, "count {c} vs expectation {}", n as f64 * p);
    }
}

#[test]
fn next_token_distributions_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let vocab = rng.random_range(4..30);
        let params = peaked_model(vocab, trial);
        let prompt: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(RESERVED..vocab)).collect();
        let generated: Vec<usize> = (0..rng.random_range(0..8)).map(|_| rng.random_range(RESERVED..vocab)).collect();
        let lp = params.next_token_log_probs(&prompt, &generated).unwrap();
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() <= 1e-12, "sum {total}");
    }
}

#[test]
fn zero_temperature_and_tiny_nucleus_are_greedy() {
    let params = peaked_model(12, 8);
    let prompt = [5, 6, 7];
    let greedy = params.greedy(&prompt, 10).unwrap();
    for s in 0..20 {
        let cold = params.sample(&prompt, Sampling { temperature: 0.0, top_p: 1.0 }, 10, s).unwrap();
        assert_eq!(cold, greedy);
        let narrow = params.sample(&prompt, Sampling { temperature: 1.0, top_p: 1e-9 }, 10, s).unwrap();
        assert_eq!(narrow, greedy);
    }
}

#[test]
fn sequence_logprob_matches_sampling_frequency() {
    // Two-step outcomes: compare the empirical frequency of a full response
    // with exp(logprob).
    let params = peaked_model(5, 21);
    let prompt = [3, 4];
    let n = 100_000u64;
    let mut hits = std::collections::BTreeMap::<Vec<usize>, u64>::new();
    for i in 0..n {
        let out = params.sample(&prompt, Sampling::default(), 8, seed::derive(9, i)).unwrap();
        *hits.entry(out).or_default() += 1;
    }
    let (resp, count) = hits.iter().max_by_key(|(_, c)| **c).unwrap();
    // Stopping is driven by any reserved token, so the probability of
    // `resp` is the product of symbol steps times the stop mass at the end.
    let mut logp = 0.0;
    for t in 0..resp.len() {
        logp += params.next_token_log_probs(&prompt, &resp[..t]).unwrap()[resp[t]];
    }
    let stop: f64 = params.next_token_log_probs(&prompt, resp).unwrap()[..RESERVED].iter().map(|x| x.exp()).sum();
    let p = logp.exp() * stop;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((*count as f64 - n as f64 * p).abs() <= 4.0 * sd, "{count} vs {}", n as f64 * p);
}
