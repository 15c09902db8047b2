use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn vdformer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vdformer"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config() -> Value {
    json!({
        "seed": 5,
        "data": {
            "train": 2, "val": 1, "test": 1,
            "synth": {
                "depth": 16, "height": 16, "width": 16,
                "lesions": [1, 1], "lesion_radius": [2.0, 2.5],
                "tubes": [1, 1], "tube_radius": [2.0, 2.0], "tube_min_length": 8, "tube_jitter": 0.15,
                "background": 0.2, "background_amplitude": 0.03, "noise": 0.05, "max_retries": 200
            }
        },
        "model": {
            "backbone": {
                "in_channels": 3, "patch": 1, "depths": [1, 1, 1, 1], "widths": [4, 8, 16, 32],
                "heads": [1, 1, 2, 2], "window": 2, "mlp_ratio": 1.0, "use_relative_bias": true, "fpn_channels": 4
            },
            "fusion": "vdformer",
            "slices": 3,
            "attention": { "heads": 2, "window": 2, "mlp_ratio": 1.0, "use_relative_bias": true },
            "head": { "tower_channels": 4, "prior": 0.01 },
            "score_threshold": 0.05,
            "nms_iou": 0.5
        },
        "optimizer": { "name": "adamw", "lr": 0.001, "weight_decay": 0.05 },
        "train": { "epochs": 1, "slices_per_volume": 1 },
        "paths": { "data_dir": "data", "run_dir": "run" }
    })
}

fn write_config(dir: &Path, v: &Value) -> String {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_train_eval_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let d = dir.path();

    let o = vdformer(&["gen", "--config", &cfg], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("data/manifest.json").exists());
    assert!(d.join("data/test/gt.jsonl").exists());

    let o = vdformer(&["train", "--config", &cfg, "--fusion", "none"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = d.join("run/checkpoint-epoch001.ckpt");
    assert!(ck.exists());
    let log = fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    let header: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["model"]["fusion"], "none");
    assert_eq!(log.lines().count(), 3);

    // eval without --config uses the checkpoint's configuration
    let o = vdformer(&["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "test"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("run/eval-test.json")).unwrap()).unwrap();
    assert_eq!(printed, report["metrics"]);
    assert_eq!(report["config"]["model"]["fusion"], "none");

    let o = vdformer(&["bench", "--out", "bench"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(d.join("bench/cost.csv")).unwrap().starts_with("# version: "));
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_config();
    v["model"]["slices"] = 2.into();
    v["optimizer"]["lr"] = (-1.0).into();
    let cfg = write_config(dir.path(), &v);
    let o = vdformer(&["gen", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("model.slices") && err.contains("optimizer.lr"), "{err}");
    assert!(!dir.path().join("data").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_config();
    v["train"]["epoch"] = 3.into();
    let cfg = write_config(dir.path(), &v);
    let o = vdformer(&["bench", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epoch"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_and_missing_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!vdformer(&["eval", "--checkpoint", "x.ckpt", "--split", "dev"], d).status.success());
    assert!(!vdformer(&["gen", "--fusion", "conv4d"], d).status.success());
    let o = vdformer(&["eval", "--checkpoint", "missing.ckpt"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.ckpt"), "{}", stderr(&o));
    let o = vdformer(&["train"], d);
    assert_eq!(o.status.code(), Some(1));
}
