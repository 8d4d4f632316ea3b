//! JSONL round-trips for every record type.

use std::path::Path;

use proptest::prelude::*;

use selfcontrast::formats::{parse_jsonl, read_jsonl, to_jsonl, write_jsonl, FormatError};
use selfcontrast_core::corpus::{PreferenceRecord, PromptRecord, ResponseSet, TaskKind, TaskSpec};

fn text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-j0-9 \"\\\\é✓\n\t]{0,12}").unwrap()
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![any::<f64>().prop_filter("finite", |x| x.is_finite()), Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE), Just(5e-324)]
}

fn response_sets() -> impl Strategy<Value = Vec<ResponseSet>> {
    prop::collection::vec((prop::collection::vec(text(), 0..6), finite(), finite(), any::<u64>()), 0..6).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (responses, temperature, top_p, seed))| ResponseSet { id: format!("r{i}"), responses, temperature, top_p, seed })
            .collect()
    })
}

fn preferences() -> impl Strategy<Value = Vec<PreferenceRecord>> {
    prop::collection::vec((text(), text(), prop::collection::btree_set(text(), 1..5)), 0..6).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (prompt, chosen, rejected))| PreferenceRecord {
                id: format!("p{i}"),
                prompt,
                chosen,
                rejected: rejected.into_iter().collect(),
            })
            .collect()
    })
}

fn prompts() -> impl Strategy<Value = Vec<PromptRecord>> {
    (prop::sample::select(vec![TaskKind::Reverse, TaskKind::Copy, TaskKind::SumMod10, TaskKind::ConstantRefusal]), 1usize..5, 1usize..20, any::<u64>())
        .prop_map(|(kind, len, n, seed)| {
            let task = TaskSpec::new(kind, len);
            let n = n.min(task.distinct_prompts() as usize);
            selfcontrast_core::corpus::gen_toy_corpus(&task, n, seed).unwrap()
        })
}

fn bit_identical(a: &[ResponseSet], b: &[ResponseSet]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.id == y.id
                && x.responses == y.responses
                && x.seed == y.seed
                && x.temperature.to_bits() == y.temperature.to_bits()
                && x.top_p.to_bits() == y.top_p.to_bits()
        })
}

proptest! {
    #[test]
    fn response_sets_round_trip_bit_exactly(sets in response_sets()) {
        let text = to_jsonl(&sets).unwrap();
        let back: Vec<ResponseSet> = parse_jsonl(&text, Path::new("mem")).unwrap();
        prop_assert!(bit_identical(&sets, &back));
        prop_assert_eq!(to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn preferences_round_trip(recs in preferences()) {
        let text = to_jsonl(&recs).unwrap();
        prop_assert_eq!(text.lines().count(), recs.len());
        let back: Vec<PreferenceRecord> = parse_jsonl(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn prompts_round_trip_through_files(recs in prompts()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<PromptRecord> = read_jsonl(&path).unwrap();
        prop_assert_eq!(&back, &recs);
        write_jsonl(&path, &back).unwrap();
        prop_assert_eq!(std::fs::read_to_string(&path).unwrap(), to_jsonl(&recs).unwrap());
    }
}

#[test]
fn semantic_checks_run_on_read() {
    let bad_target = r#"{"id":"a","prompt":"abc","target":"abc","task":{"kind":"reverse","input_length":3,"alphabet":"abcdefghij"}}"#;
    let err = parse_jsonl::<PromptRecord>(&format!("{bad_target}\n"), Path::new("x.jsonl")).unwrap_err();
    assert!(matches!(err, FormatError::Parse { line: 1, .. }), "{err}");

    let dup_rejected = r#"{"id":"a","prompt":"ab","chosen":"ba","rejected":["x","x"]}"#;
    assert!(parse_jsonl::<PreferenceRecord>(dup_rejected, Path::new("x")).is_err());
    let no_rejected = r#"{"id":"a","prompt":"ab","chosen":"ba","rejected":[]}"#;
    assert!(parse_jsonl::<PreferenceRecord>(no_rejected, Path::new("x")).is_err());
    let unknown_key = r#"{"id":"a","responses":[],"temperature":1.0,"top_p":1.0,"seed":1,"extra":0}"#;
    assert!(parse_jsonl::<ResponseSet>(unknown_key, Path::new("x")).is_err());
}

#[test]
fn missing_file_names_the_path() {
    let err = read_jsonl::<ResponseSet>(Path::new("/nonexistent/r.jsonl")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/r.jsonl"));
}
