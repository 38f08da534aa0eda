use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatelora"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_config(train: &str, val: &str, steps: usize) -> Value {
    json!({
        "model": {
            "image_size": 8, "channels": 1, "patch_size": 4, "dim": 8,
            "heads": 2, "layers": 2, "mlp_ratio": 2, "num_classes": 4
        },
        "optim": {"kind": "adamw", "lr": 0.01, "weight_decay": 0.0},
        "schedule": {"warmup_steps": 2},
        "steps": steps,
        "eval_every": 5,
        "batch_size": 8,
        "seed": 3,
        "data": {"train": train, "val": val}
    })
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn src(split: &str) -> String {
    format!("synth:source?seed=2&split={split}&n=6&noise=0.5")
}

fn tgt(split: &str) -> String {
    format!("synth:target?seed=2&split={split}&n=6&noise=0.5")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Pretrain once and return the checkpoint path plus a fine-tune config path.
fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let pre_cfg = dir.join("pre.json");
    write_json(&pre_cfg, &tiny_config(&src("train"), &src("val"), 10));
    let pre = dir.join("pre");
    let out = bin(&["pretrain", "--config", s(&pre_cfg), "--out", s(&pre)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut ft = tiny_config(&tgt("train"), &tgt("val"), 10);
    ft["adapter"] = json!({"kind": "lora", "rank": 2, "alpha": 8.0});
    ft["optim"] = json!({"kind": "sgd_momentum", "lr": 0.05});
    ft["reg"] = json!({"kind": "l1", "lambda": 0.0});
    let ft_cfg = dir.join("ft.json");
    write_json(&ft_cfg, &ft);
    (pre, ft_cfg)
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (pre, ft_cfg) = setup(d);
    assert!(pre.join("manifest.json").is_file());
    let metrics = fs::read_to_string(pre.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("step,lr,task_loss,reg_loss,val_acc,active_pct")
    );
    assert_eq!(metrics.lines().count(), 11);

    let runs = d.join("runs");
    for (i, lambda) in ["0", "2"].iter().enumerate() {
        let out_dir = runs.join(format!("run{i}"));
        let out = bin(&[
            "finetune",
            "--config",
            s(&ft_cfg),
            "--init",
            s(&pre),
            "--out",
            s(&out_dir),
            "--lambda",
            lambda,
            "--rank",
            "2",
            "--reg",
            "l1",
            "--seed",
            "7",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["sites"], 12);
        assert!(out_dir.join("gates.csv").is_file());
        assert!(out_dir.join("final").join("manifest.json").is_file());
    }
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(runs.join("run1/final/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["run"]["seed"], 7);
    assert_eq!(manifest["run"]["reg"]["lambda"], 2.0);
    assert!(
        manifest["adapters"]
            .as_array()
            .unwrap()
            .iter()
            .all(|a| a["active"] == false),
        "{}",
        manifest["adapters"]
    );

    let ft = runs.join("run0");
    let out = bin(&["eval", "--ckpt", s(&ft), "--data", &tgt("val"), "--metric", "top1"]);
    assert_eq!(code(&out), 0);
    let acc: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let out = bin(&[
        "eval",
        "--ckpt",
        s(&ft),
        "--data",
        &src("val"),
        "--metric",
        "knn",
        "--k",
        "5",
        "--train",
        &src("train"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin(&["eval", "--ckpt", s(&ft), "--data", &src("val"), "--metric", "knn"]);
    assert_eq!(code(&out), 2);

    let flops = |mode: &str| -> Value {
        let out = bin(&["flops", "--ckpt", s(&ft), "--mode", mode, "--tokens", "5"]);
        assert_eq!(code(&out), 0);
        serde_json::from_slice(&out.stdout).unwrap()
    };
    let (un, me) = (flops("unmerged"), flops("merged"));
    assert_eq!(me["total"], me["base_flops"]);
    assert!(un["total"].as_u64().unwrap() > un["base_flops"].as_u64().unwrap());

    let merged = d.join("merged");
    assert_eq!(code(&bin(&["merge", "--ckpt", s(&ft), "--out", s(&merged)])), 0);
    let m: Value = serde_json::from_str(&fs::read_to_string(merged.join("manifest.json")).unwrap()).unwrap();
    assert!(m["adapters"].as_array().unwrap().is_empty());

    let pruned = d.join("pruned");
    let off = runs.join("run1/final");
    assert_eq!(code(&bin(&["prune", "--ckpt", s(&off), "--out", s(&pruned)])), 0);
    let before = fs::metadata(off.join("tensors.bin")).unwrap().len();
    let after = fs::metadata(pruned.join("tensors.bin")).unwrap().len();
    assert!(after < before);

    let csv = d.join("report/act.csv");
    let out = bin(&["report", "activations", "--runs", s(&runs), "--out", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("site,0,1"));
    assert_eq!(text.lines().count(), 7);
    assert!(fs::read_to_string(csv.with_extension("svg"))
        .unwrap()
        .starts_with("<svg"));

    let base_out = d.join("baseline");
    let out = bin(&[
        "baseline",
        "random",
        "--n",
        "3",
        "--seed",
        "4",
        "--config",
        s(&ft_cfg),
        "--init",
        s(&pre),
        "--out",
        s(&base_out),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["final_active"], 3);
    let out = bin(&[
        "baseline",
        "random",
        "--n",
        "13",
        "--seed",
        "4",
        "--config",
        s(&ft_cfg),
        "--init",
        s(&pre),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let mut bad = tiny_config(&src("train"), &src("val"), 5);
    bad["surprise"] = json!(true);
    let bad_cfg = d.join("bad.json");
    write_json(&bad_cfg, &bad);
    let out = bin(&["pretrain", "--config", s(&bad_cfg), "--out", s(&d.join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));

    let missing = d.join("missing.json");
    assert_eq!(
        code(&bin(&["pretrain", "--config", s(&missing), "--out", s(&d.join("x"))])),
        2
    );

    let nodata = d.join("nodata.json");
    write_json(&nodata, &tiny_config("synth:nowhere", &src("val"), 5));
    assert_eq!(
        code(&bin(&["pretrain", "--config", s(&nodata), "--out", s(&d.join("x"))])),
        3
    );

    let mut blowup = tiny_config(&src("train"), &src("val"), 5);
    blowup["optim"] = json!({"kind": "sgd_momentum", "lr": 1e300, "momentum": 0.0});
    let blowup_cfg = d.join("blowup.json");
    write_json(&blowup_cfg, &blowup);
    let out = bin(&["pretrain", "--config", s(&blowup_cfg), "--out", s(&d.join("x"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));

    assert_eq!(
        code(&bin(&["eval", "--ckpt", s(&d.join("none")), "--data", &src("val")])),
        3
    );
    assert_eq!(code(&bin(&["flops", "--mode", "sideways", "--ckpt", "x"])), 2);
}
