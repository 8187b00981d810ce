#![allow(dead_code)]

use std::path::Path;

use crosslm::config::RunConfig;

/// A configuration small enough to run the whole pipeline in seconds.
pub fn small_json(seed: u64) -> serde_json::Value {
    serde_json::json!({
        "seed": seed,
        "task": {"train_size": 400, "test_size": 200},
        "corpus": {"pretrain_lines": 300, "heldout_lines": 50},
        "lm": {"layers": 1, "d_model": 16, "heads": 2, "context": 32},
        "pretrain": {"epochs": 1, "minibatch": 16, "lr": 3e-3},
        "clients": {"count": 2, "local": {"epochs": 1, "minibatch": 16, "lr": 1e-2}},
        "sampling": {"max_len": 12},
        "llm_round": {"llm_epochs": 1, "gen_batch": 16, "minibatch": 8},
        "enhance_batch": 16,
        "eval": {"nlg_samples": 40}
    })
}

pub fn small(seed: u64) -> RunConfig {
    serde_json::from_value(small_json(seed)).expect("valid small config")
}

pub fn write_config(dir: &Path, value: &serde_json::Value) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(value).expect("json")).expect("write config");
    p
}
