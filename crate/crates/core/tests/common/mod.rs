#![allow(dead_code)]

use std::path::Path;

use poisonbench::harness::config::parse_pairs;
use poisonbench::harness::{ExperimentConfig, Workspace};

/// A corpus small enough to train in well under a second.
pub const TINY: &str = "
synth_seed = 4
users = 30
news = 60
candidates = 10
title_len = 6
vocab_size = 80
topics = 4
min_history = 3
max_history = 6
dim = 8
offline_models = meanpool_lr@1, tiny_mlp:3@2
offline_weights = 0.5, 0.5
online_model = meanpool_lr@3
train_epochs = 60
newton_steps = 10
budget = 10
horizon = 6
episodes = 20
checkpoint_every = 5
hidden = 8
head = 16
targets = 3
sweep_budgets = 2, 10
sweep_horizons = 0, 3
risk_budget = 4
timing_samples = 2
";

pub fn tiny_config(out: &Path, extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut pairs = parse_pairs(TINY).unwrap();
    pairs.push(("output".into(), out.display().to_string()));
    pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    ExperimentConfig::from_pairs(&pairs).unwrap()
}

pub fn tiny_workspace(out: &Path) -> Workspace {
    Workspace::load(&tiny_config(out, &[])).unwrap()
}

/// Writes TINY plus `extra` lines as `dir/tiny.conf`, with the output
/// relative to `dir`.
pub fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("tiny.conf");
    let text = format!("{TINY}\noutput = out\n{extra}\n");
    std::fs::write(&path, text).unwrap();
    path
}
