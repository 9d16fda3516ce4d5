use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"{
    "schema_version": 1,
    "topology": {
        "nodes": [{"id": 0}, {"id": 1}, {"id": 2}],
        "links": [{"id": 0, "endpoints": [0, 1]}, {"id": 1, "endpoints": [0, 2]}, {"id": 2, "endpoints": [1, 2]}]
    },
    "workload": {"arrival_rate": [0.3]},
    "env": {"slices": [{"node": 0, "link": 0}, {"node": 0, "link": 0}], "weights": {"alpha": 0.5, "beta": 0.5}, "horizon": 15},
    "agent": {"algorithm": "maddpg", "maddpg": {"actor_hidden": [8], "critic_hidden": [8], "warmup": 16, "batch": 8}},
    "training": {"episodes": 5, "eval_every": 5, "eval_episodes": 1, "seeds": [3]}
}"#;

fn netslice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netslice")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn three_slices(text: &str) -> String {
    text.replace(
        r#""slices": [{"node": 0, "link": 0}, {"node": 0, "link": 0}]"#,
        r#""slices": [{"node": 0, "link": 0}, {"node": 0, "link": 0}, {"node": 0, "link": 0}]"#,
    )
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_a_reproducible_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.json", SMOKE);
    let out = dir.path().join("run");
    let o = netslice(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "seeds.json", "version.json", "seed_3/curve.jsonl", "seed_3/metrics.jsonl", "seed_3/checkpoint/manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let curve = netslice_core::metrics::read_curve(&out.join("seed_3/curve.jsonl")).unwrap();
    let train = curve.iter().filter(|p| p.kind == netslice_core::metrics::CurveKind::Train).count();
    assert_eq!(train, 5);
    // The snapshot alone reproduces the run.
    let again = dir.path().join("again");
    let snap = out.join("config.json");
    let o = netslice(&["train", "--config", snap.to_str().unwrap(), "--seed", "3", "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("seed_3/metrics.jsonl")).unwrap(),
        std::fs::read(again.join("seed_3/metrics.jsonl")).unwrap()
    );
}

#[test]
fn bad_weights_exit_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &SMOKE.replace(r#""alpha": 0.5, "beta": 0.5"#, r#""alpha": 0.6, "beta": 0.5"#));
    let o = netslice(&["train", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("env.weights"), "{}", stderr(&o));
}

#[test]
fn unknown_field_and_missing_file_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo.json", &SMOKE.replace(r#""horizon": 15"#, r#""horizon": 15, "horizn": 3"#));
    let o = netslice(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizn"));
    let o = netslice(&["train", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_and_compare_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.json", SMOKE);
    let run = dir.path().join("run");
    let o = netslice(&["train", "--config", &cfg, "--episodes", "0", "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("seed_3/checkpoint");

    let eval_dir = dir.path().join("eval");
    let o = netslice(&["evaluate", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3", "--out", eval_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table: Vec<netslice_core::metrics::SummaryRow> =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(table.len(), 1);
    assert!(table[0].mean_reward > 0.0 && table[0].mean_reward <= 1.0);
    assert_eq!(table[0].episodes, 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("std"));

    let cmp_dir = dir.path().join("cmp");
    let o = netslice(&["compare", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--seed", "1,2", "--episodes", "2", "--out", cmp_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table: Vec<netslice_core::metrics::SummaryRow> =
        serde_json::from_str(&std::fs::read_to_string(cmp_dir.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(table.iter().map(|r| r.policy.as_str()).collect::<Vec<_>>(), ["random", "full", "static", "maddpg"]);
    assert!(table.iter().all(|r| r.seeds == 2));

    let three = write_config(dir.path(), "three.json", &three_slices(SMOKE));
    let o = netslice(&["evaluate", "--config", &three, "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("slices"), "{}", stderr(&o));
}

#[test]
fn transfer_with_zero_episodes_writes_expanded_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke.json", SMOKE);
    let run = dir.path().join("run");
    assert!(netslice(&["train", "--config", &cfg, "--episodes", "1", "--out", run.to_str().unwrap()]).status.success());
    let three = write_config(dir.path(), "three.json", &three_slices(SMOKE));
    let out = dir.path().join("grown");
    let ckpt = run.join("seed_3/checkpoint");
    let o = netslice(&["transfer", "--config", &three, "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = netslice_core::agents::PopulationManifest::load(&out.join("seed_3/expanded")).unwrap();
    assert_eq!(manifest.slices, 3);
    assert!(!out.join("seed_3/checkpoint").exists());

    // Same slice count is not a transfer.
    let o = netslice(&["transfer", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "0", "--out", dir.path().join("same").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn report_action_space() {
    let o = netslice(&["report-action-space", "--slices", "3", "--levels", "10"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["dqn_joint_actions"], 1_000_000);
    assert_eq!(v["maddpg_action_dims"], 6);
    assert_eq!(netslice(&["report-action-space", "--levels", "0"]).status.code(), Some(2));
}
