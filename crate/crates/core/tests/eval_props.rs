use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selfcontrast_core::corpus::{gen_toy_corpus, PreferenceRecord, PromptRecord, TaskKind, TaskSpec};
use selfcontrast_core::eval::{data_accuracy, negative_reward_kl, oracle_reward, win_rate, OracleReward};

fn reverse() -> TaskSpec {
    TaskSpec::new(TaskKind::Reverse, 4)
}

fn record(i: usize, prompt: &str, rejected: Vec<String>) -> PreferenceRecord {
    let task = reverse();
    PreferenceRecord { id: format!("r{i}"), prompt: prompt.into(), chosen: task.target(prompt), rejected }
}

fn records() -> impl Strategy<Value = Vec<PreferenceRecord>> {
    prop::collection::vec(("[a-d]{4}", prop::collection::vec("[a-d]{0,5}", 1..5)), 1..12)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (p, r))| record(i, &p, r)).collect())
}

proptest! {
    #[test]
    fn data_accuracy_ignores_record_order(data in records(), seed in any::<u64>()) {
        let oracle = OracleReward::new(reverse());
        let acc = data_accuracy(&data, &oracle).unwrap();
        let mut shuffled = data.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for r in &mut shuffled {
            r.rejected.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        }
        prop_assert_eq!(acc, data_accuracy(&shuffled, &oracle).unwrap());
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn reward_is_bounded_and_exact_on_target(prompt in "[a-j]{1,6}", response in "[a-j]{0,8}") {
        let task = TaskSpec::new(TaskKind::Reverse, prompt.len());
        let r = oracle_reward(&task, &prompt, &response);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r == 1.0, response == task.target(&prompt));
    }

    #[test]
    fn kl_is_zero_on_itself_and_nonnegative(a in records(), b in records()) {
        let oracle = OracleReward::new(reverse());
        if let Ok(kl) = negative_reward_kl(&a, &a, &oracle, 20) {
            prop_assert!(kl.abs() < 1e-12);
        }
        if let Ok(kl) = negative_reward_kl(&a, &b, &oracle, 20) {
            prop_assert!(kl >= 0.0);
        }
    }
}

#[test]
fn accuracy_counts_strictly_worse_only() {
    let oracle = OracleReward::new(reverse());
    let data = vec![record(0, "abcd", vec!["dcba".into(), "dcbb".into(), "".into(), "aaaa".into()])];
    assert_eq!(data_accuracy(&data, &oracle).unwrap(), 0.75);
}

#[test]
fn win_rate_scores_ties_as_half() {
    let eval: Vec<PromptRecord> = gen_toy_corpus(&reverse(), 40, 1).unwrap();
    let perfect = |r: &PromptRecord, _seed: u64| r.target.clone();
    let wrong = |_: &PromptRecord, _seed: u64| String::from("zz");
    let coin = |r: &PromptRecord, seed: u64| if seed % 2 == 0 { r.target.clone() } else { String::new() };
    assert_eq!(win_rate(&perfect, &eval, 3, 0).unwrap().win_rate, 0.5);
    assert_eq!(win_rate(&wrong, &eval, 3, 0).unwrap().win_rate, 0.0);
    let c = win_rate(&coin, &eval, 50, 0).unwrap();
    assert!((c.win_rate - 0.25).abs() < 0.03, "{}", c.win_rate);
    assert_eq!(c.rows.len(), 40);
}
