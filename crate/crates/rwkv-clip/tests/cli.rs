use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rwkv-clip"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn every_subcommand_has_help() {
    for args in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["eval", "--help"],
        vec!["bench", "--help"],
        vec!["gradcheck", "--help"],
        vec!["data", "--help"],
        vec!["data", "gen-toy", "--help"],
        vec!["data", "fuse", "--help"],
        vec!["data", "stats", "--help"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(stdout(&o).contains("Usage"), "{args:?}");
    }
}

#[test]
fn config_errors_exit_two_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"train\": {\n    \"epochs\": 1,\n  }\n}\n").unwrap();
    let out = dir.path().join("run");
    let o = bin().args(["train", "--config"]).arg(&bad).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");

    std::fs::write(&bad, r#"{"train": {"epochz": 1}}"#).unwrap();
    let o = bin().args(["train", "--config"]).arg(&bad).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    let o = bin().args(["train", "--config", "/nonexistent/run.json", "--out"]).arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

fn count_lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn toy_pipeline_generate_fuse_stats_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let toy = d.join("toy");
    let o = bin().args(["--seed", "4", "data", "gen-toy", "--n", "40", "--out"]).arg(&toy).output().unwrap();
    assert!(o.status.success());
    let records = toy.join("records.jsonl");
    assert_eq!(count_lines(&records), 40);
    assert!(toy.join("images/toy-4-00039.png").exists());

    // strip generated descriptions, then refill them offline
    let text = std::fs::read_to_string(&records).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("generated_description");
            format!("{v}\n")
        })
        .collect();
    let bare = toy.join("bare.jsonl");
    std::fs::write(&bare, stripped).unwrap();
    let fused = toy.join("fused.jsonl");
    let o = bin().args(["data", "fuse", "--mock", "--in"]).arg(&bare).arg("--out").arg(&fused).output().unwrap();
    assert!(o.status.success());
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["filled"], 40);
    for line in std::fs::read_to_string(&fused).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["generated_description"], format!("fused: {}", v["raw_text"].as_str().unwrap()));
    }

    let o = bin().args(["data", "stats", "--in"]).arg(&fused).output().unwrap();
    assert!(o.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["records"], 40);
    assert_eq!(stats["by_kind"]["generated"]["count"], 40);

    let cfg = d.join("run.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 1, "batch_size": 8}}"#).unwrap();
    let run_dir = d.join("run");
    let o = bin()
        .args(["--seed", "2", "train", "-q", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&fused)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "epoch.ckpt", "metrics.csv", "loss.png", "config.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,epoch,loss,lr,grad_norm"));
    assert_eq!(metrics.lines().count(), 1 + 5);

    let ckpt = run_dir.join("model.ckpt");
    let report = d.join("eval.json");
    let o = bin().args(["eval", "--checkpoint"]).arg(&ckpt).arg("--data").arg(&fused).arg("--out").arg(&report).output().unwrap();
    assert!(o.status.success());
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let mut keys: Vec<&String> = rep.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["groups", "image_to_text", "null_r1_mean", "null_r1_std", "records", "text_to_image"]);
    for dir in ["image_to_text", "text_to_image"] {
        for k in ["r1", "r5", "r10"] {
            assert!(rep[dir][k].is_f64());
        }
    }

    let o = bin().args(["data", "stats", "--context", "32", "--in"]).arg(&fused).arg("--checkpoint").arg(&ckpt).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let sim = stats["by_kind"]["raw"]["mean_similarity"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&sim));

    // one label: every scored image gets it
    let labels = d.join("labels.txt");
    let templates = d.join("templates.txt");
    std::fs::write(&labels, "red circle\n").unwrap();
    std::fs::write(&templates, "a photo of a {label}.\n").unwrap();
    let o = bin()
        .args(["eval", "--mode", "zeroshot", "--toy", "64", "--checkpoint"])
        .arg(&ckpt)
        .arg("--labels")
        .arg(&labels)
        .arg("--templates")
        .arg(&templates)
        .output()
        .unwrap();
    assert!(o.status.success());
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["accuracy"], 1.0);
    assert_eq!(rep["scored"], 2);

    // a dataset whose images do not match the checkpoint is refused
    let small = d.join("small");
    assert!(bin().args(["data", "gen-toy", "--n", "4", "--size", "16", "--out"]).arg(&small).status().unwrap().success());
    let o = bin().args(["eval", "--checkpoint"]).arg(&ckpt).arg("--data").arg(small.join("records.jsonl")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_emits_one_row_per_kernel_and_length() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["bench", "--T", "16,32,64,128", "--scan-reps", "3", "--naive-reps", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("kernel,T,d,H,median_ns"));
    assert_eq!(csv.lines().count(), 1 + 8);
    assert_eq!(std::fs::read_to_string(dir.path().join("bench.csv")).unwrap(), csv);
    assert!(dir.path().join("bench.png").exists());
}

#[test]
fn gradcheck_lists_every_check_and_exits_zero() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for name in ["matmul", "layer_norm", "wkv", "clip_loss", "encoder_image", "encoder_text"] {
        assert!(out.contains(name), "{name} missing from\n{out}");
    }
    assert!(out.contains(" 0 failed"));
}
