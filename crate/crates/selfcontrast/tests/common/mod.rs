#![allow(dead_code)]

use selfcontrast::config::RunConfig;

/// A config small enough that the whole pipeline runs in well under a second.
pub fn small_config() -> RunConfig {
    RunConfig::from_json(
        r#"{
            "seed": 11,
            "corpus": {"n": 120, "eval_fraction": 0.25},
            "sft": {"epochs": 3},
            "sample": {"r": 8},
            "filter": {"a_percent": 50, "m": [1, 2]},
            "dpo": {"epochs": 1},
            "eval": {"samples_per_prompt": 2},
            "theorem": {"trials": 5000, "l": [1, 5]},
            "compare": {"m_list": [1, 2], "pair_list": [1]}
        }"#,
    )
    .expect("small config parses")
}
