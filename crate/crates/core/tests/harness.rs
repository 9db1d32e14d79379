mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use poisonbench::harness::{cmd_attack, cmd_eval, cmd_sweep, cmd_train, parse_eval_rows, Method, Workspace};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poisonbench"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Relative path to contents for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    common::write_config(dir.path(), "");
    let ok = cli(dir.path(), &["synth", "--config", "tiny.conf"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("out/corpus").is_dir());

    let missing = cli(dir.path(), &["train", "--config", "nope.conf"]);
    assert_eq!(code(&missing), 2);
    let unknown = cli(dir.path(), &["train", "--config", "tiny.conf", "--bogus_key", "1"]);
    assert_eq!(code(&unknown), 2);
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("bogus_key"));
    let bad = cli(dir.path(), &["attack", "--config", "tiny.conf", "--budget=-1"]);
    assert_eq!(code(&bad), 2);
    let method = cli(dir.path(), &["attack", "--config", "tiny.conf", "--method", "fancy"]);
    assert_eq!(code(&method), 2);
    assert_eq!(code(&cli(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&cli(dir.path(), &["--help"])), 0);

    // runtime failure: nothing trained yet
    let eval = cli(dir.path(), &["eval", "--config", "tiny.conf"]);
    assert_eq!(code(&eval), 3);
    assert!(String::from_utf8_lossy(&eval.stderr).contains("missing artifact"));
}

fn pipeline(dir: &Path) {
    common::write_config(dir, "");
    let steps: &[&[&str]] = &[
        &["synth"],
        &["train"],
        &["attack", "--method", "none"],
        &["attack", "--method", "random"],
        &["attack", "--method", "effective"],
        &["attack", "--method", "tdp-cp"],
        &["eval"],
        &["deviation"],
        &["sweep"],
        &["ablate", "--ablate", "hs"],
        &["ablate", "--ablate", "risk"],
    ];
    for s in steps {
        let mut args = vec![s[0], "--config", "tiny.conf", "--jobs", "2"];
        args.extend(&s[1..]);
        let out = cli(dir, &args);
        assert_eq!(code(&out), 0, "{s:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn every_stage_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let sa = snapshot(&a.path().join("out"));
    let sb = snapshot(&b.path().join("out"));
    for f in [
        "corpus/news.tsv",
        "models/online.model",
        "attack/tdp-cp/summary.csv",
        "eval/per_target.csv",
        "deviation/deviation.csv",
        "sweep/effective.csv",
        "ablate/hs.csv",
        "ablate/risk.csv",
    ] {
        assert!(sa.contains_key(f), "{f} not written; have {:?}", sa.keys().collect::<Vec<_>>());
    }
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        // wall-clock measurements
        if k == "timings.csv" || k == "eval/timing.csv" {
            continue;
        }
        assert!(v == &sb[k], "{k} differs between runs");
    }
}

#[test]
fn no_attack_scores_the_clean_mrr() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::load(&common::tiny_config(dir.path(), &[])).unwrap();
    cmd_train(&ws).unwrap();
    cmd_attack(&ws, Method::None).unwrap();
    let out = cmd_eval(&ws).unwrap();
    assert_eq!(out.rows.len(), ws.targets.len());
    for r in &out.rows {
        assert_eq!(r.method, Method::None);
        assert_eq!(r.offline_mrr, r.clean_offline);
        assert_eq!(r.online_mrr, r.clean_online);
        assert_eq!(r.estimated_gain, 0.0);
    }
    let text = std::fs::read_to_string(dir.path().join("eval/per_target.csv")).unwrap();
    assert_eq!(parse_eval_rows(&text).unwrap(), out.rows);
}

#[test]
fn stored_models_are_reused_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::load(&common::tiny_config(dir.path(), &[])).unwrap();
    let fitted = cmd_train(&ws).unwrap();
    let loaded = ws.load_models().unwrap();
    assert_eq!(fitted.offline, loaded.offline);
    assert_eq!(fitted.online, loaded.online);
    let other = Workspace::load(&common::tiny_config(dir.path(), &[("online_model", "meanpool_lr@4")])).unwrap();
    assert!(other.load_models().is_err());
}

#[test]
fn sweep_zero_horizon_row_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::load(&common::tiny_config(dir.path(), &[])).unwrap();
    cmd_train(&ws).unwrap();
    let cells = cmd_sweep(&ws).unwrap();
    assert_eq!(cells.len(), 4);
    for c in &cells {
        if c.horizon == 0 {
            assert_eq!(c.mrr_gain, 0.0);
        }
    }
    let text = std::fs::read_to_string(dir.path().join("sweep/effective.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + cells.len());
}

#[test]
fn targets_follow_the_seeded_choice() {
    let dir = tempfile::tempdir().unwrap();
    let a = Workspace::load(&common::tiny_config(dir.path(), &[])).unwrap();
    let b = Workspace::load(&common::tiny_config(dir.path(), &[])).unwrap();
    assert_eq!(a.targets, b.targets);
    let ids: Vec<String> = a.targets.iter().map(|&n| a.target_id(n).to_string()).collect();
    let listed = Workspace::load(&common::tiny_config(dir.path(), &[("targets", &ids.join(","))])).unwrap();
    assert_eq!(listed.targets, a.targets);
    assert!(a.targets.iter().all(|n| a.data.candidates().contains(n)));
}
