use std::path::Path;
use std::process::{Command, Output};

fn imoe(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imoe")).current_dir(cwd).env_remove("IMOE_OUTPUT_ROOT").args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_deterministic_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let args = ["gen", "--kind", "synergy-xor", "--n", "2000", "--dims", "8,8", "--sigma", "0.2", "--seed", "0", "--out"];
    ok(&imoe(root, &[&args[..], &["a"]].concat()));
    ok(&imoe(root, &[&args[..], &["b"]].concat()));
    for f in ["m1.csv", "m2.csv", "labels.csv"] {
        assert_eq!(std::fs::read(root.join("a").join(f)).unwrap(), std::fs::read(root.join("b").join(f)).unwrap(), "{f}");
    }
    assert!(root.join("a/manifest.json").exists());
    assert!(root.join("a/run_manifest.json").exists());

    let again = imoe(root, &[&args[..], &["a"]].concat());
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&imoe(root, &[&args[..], &["a", "--force"]].concat()));

    ok(&imoe(root, &["gen", "--kind", "mixture", "--proportions", "0.25,0.25,0.25,0.25", "--n", "100", "--out", "mix"]));
    assert!(root.join("mix/tags.csv").exists());
}

#[test]
fn unknown_flags_and_missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = imoe(dir.path(), &["train", "--data", "d", "--out", "o", "--no_such_flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = imoe(dir.path(), &["eval", "--checkpoint", "missing.json", "--data", "d"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn train_eval_interpret_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&imoe(root, &["gen", "--kind", "redundant", "--n", "200", "--dims", "3,3", "--out", "d"]));
    std::fs::write(root.join("run.cfg"), "# small run\ntrain_epochs = 2\nbatch_size = 16\n").unwrap();
    ok(&imoe(
        root,
        &["train", "--data", "d", "--out", "r", "--config", "run.cfg", "--seeds", "0,1,2", "--lr", "0.0001", "--interaction_loss_weight", "0.5", "--temperature_rw", "2.0"],
    ));
    let manifest = json(&root.join("r/run_manifest.json"));
    assert_eq!(manifest["config"]["config"]["lr"], 0.0001);
    assert_eq!(manifest["config"]["config"]["train_epochs"], 2);
    assert_eq!(manifest["seeds"], serde_json::json!([0, 1, 2]));
    assert!(manifest["finished_unix_s"].is_number());
    let summary = json(&root.join("r/summary.json"));
    assert_eq!(summary["test"]["runs"], 3);
    assert!(summary["test"]["accuracy"]["std"].is_number());
    for s in 0..3 {
        let seed = root.join(format!("r/seed_{s}"));
        for f in ["checkpoint.json", "epochs.csv", "metrics.json"] {
            assert!(seed.join(f).exists(), "{f}");
        }
    }
    let header = std::fs::read_to_string(root.join("r/seed_0/epochs.csv")).unwrap();
    assert!(header.starts_with("epoch,task_loss,int_loss_expert_0,int_loss_expert_1,int_loss_expert_2,int_loss_expert_3,train_acc,val_acc,seconds"));

    let eval = imoe(root, &["eval", "--checkpoint", "r/seed_0/checkpoint.json", "--data", "d", "--out", "e"]);
    ok(&eval);
    let printed: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(printed, json(&root.join("e/metrics.json")));
    assert_eq!(printed, json(&root.join("r/seed_0/metrics.json"))["test"]);

    ok(&imoe(root, &["interpret", "--checkpoint", "r/seed_0/checkpoint.json", "--data", "d", "--out", "i"]));
    for f in ["local.jsonl", "global.json", "agreement.json", "experts.csv", "weights_long.csv", "run_manifest.json"] {
        assert!(root.join("i").join(f).exists(), "{f}");
    }
    let experts = std::fs::read_to_string(root.join("i/experts.csv")).unwrap();
    assert_eq!(experts.lines().count(), 6);

    ok(&imoe(root, &["train", "--data", "d", "--out", "na", "--ablation", "no-interaction", "--train_epochs", "1"]));
    let manifest = json(&root.join("na/run_manifest.json"));
    assert_eq!(manifest["config"]["config"]["ablation"], "no-interaction");
}

#[test]
fn output_root_override() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_imoe"))
        .current_dir(dir.path())
        .env("IMOE_OUTPUT_ROOT", &root)
        .args(["gen", "--kind", "unique", "--k", "2", "--n", "50", "--out", "d"])
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("d/manifest.json").exists());
    assert!(!dir.path().join("d").exists());
}

#[test]
fn pid_ablate_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("xor.csv"), "x1,x2,t,p\n0,0,0,0.25\n0,1,1,0.25\n1,0,1,0.25\n1,1,0,0.25\n").unwrap();
    let out = imoe(root, &["pid", "--joint", "xor.csv"]);
    ok(&out);
    let pid: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for (key, want) in [("redundancy", 0.0), ("unique1", 0.0), ("unique2", 0.0), ("synergy", 1.0)] {
        assert!((pid[key].as_f64().unwrap() - want).abs() < 1e-9, "{key}");
    }

    ok(&imoe(root, &["gen", "--kind", "mixture", "--proportions", "0.25,0.25,0.25,0.25", "--n", "120", "--dims", "3,3", "--out", "d"]));
    ok(&imoe(root, &["ablate", "--data", "d", "--out", "a", "--variants", "all", "--seeds", "0,1", "--train_epochs", "1"]));
    let csv = std::fs::read_to_string(root.join("a/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
    assert!(csv.starts_with("variant,seed,accuracy,delta"));

    ok(&imoe(root, &["bench", "--data", "d", "--out", "b", "--train_epochs", "1", "--seeds", "0"]));
    let overhead = std::fs::read_to_string(root.join("b/overhead.csv")).unwrap();
    assert!(overhead.starts_with("model,train_s_per_epoch,inference_s,params,expert_params"));
    assert_eq!(overhead.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(root.join("b/masking.csv")).unwrap().lines().count(), 4);
}
