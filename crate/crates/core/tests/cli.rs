use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ssada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssada"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ssada")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(root: &Path) -> PathBuf {
    let spec = root.join("spec.json");
    fs::write(
        &spec,
        r#"{"image_height":64,"image_width":64,"num_classes":6,"source_count":12,
            "target_count":16,"target_val_count":4,"rare_class_ids":[5],"rare_fraction":0.25,
            "shift":{"hue_offset":30.0,"noise_sigma":5.0,"blur_radius":1},"seed":3}"#,
    )
    .unwrap();
    let data = root.join("data");
    let o = ssada(&["gen", "--out", s(&data), "--spec", s(&spec)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn tiny_train(data: &Path, out: &Path, epochs: &str, triggers: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--mode", "ss_ada", "--dataset", s(data), "--out", s(out), "--epochs", epochs,
        "--triggers", triggers, "--batch-size", "4", "--budget", "0.25", "--init-fraction", "0.0625",
    ];
    args.extend_from_slice(extra);
    ssada(&args)
}

#[test]
fn pipeline_gen_train_score_weights_eval_report() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let run = tmp.path().join("runs/a");
    let o = tiny_train(&data, &run, "4", "1,2", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "summary.json", "metrics.csv", "selection_log.csv", "weights_log.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let ckpt = run.join("checkpoints/final.ckpt");

    let scores = tmp.path().join("scores.csv");
    let o = ssada(&["score", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&scores)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&scores).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample_id,strategy,score,rank"));
    let ranks: Vec<usize> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ranks.len(), 16);
    assert_eq!(ranks, (1..=16).collect::<Vec<_>>());

    let labels = data.join("labels");
    let weights = tmp.path().join("weights.csv");
    let o = ssada(&[
        "weights", "--pred", s(&labels), "--gt", s(&labels), "--num-classes", "6", "--u", "3",
        "--out", s(&weights),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&weights).unwrap();
    assert!(text.starts_with("epoch,class_id,iou,weight\n"));
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2].parse::<f64>().unwrap(), 1.0);
        assert_eq!(cols[3].parse::<f64>().unwrap(), 1.0);
    }

    let eval = tmp.path().join("eval.csv");
    let o = ssada(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--out", s(&eval)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&eval).unwrap();
    assert!(text.starts_with("epoch,split,miou,iou_0,iou_1,iou_2,iou_3,iou_4,iou_5\n"));
    assert!(text.lines().nth(1).unwrap().starts_with("4,target_val,"));

    let report = tmp.path().join("report");
    let o = ssada(&["report", s(&tmp.path().join("runs")), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_dir(&report).unwrap().count() > 0);
}

#[test]
fn trigger_past_half_exits_one() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let run = tmp.path().join("run");
    let o = ssada(&[
        "train", "--dataset", s(&data), "--out", s(&run), "--epochs", "10", "--triggers", "2,6",
    ]);
    assert_eq!(code(&o), 1);
    assert!(!run.join("metrics.csv").exists());
}

#[test]
fn refuses_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let o = ssada(&["gen", "--out", s(&data)]);
    assert_eq!(code(&o), 1);
    let run = tmp.path().join("run");
    assert_eq!(code(&tiny_train(&data, &run, "2", "1", &[])), 0);
    assert_eq!(code(&tiny_train(&data, &run, "2", "1", &[])), 1);
    assert_eq!(code(&tiny_train(&data, &run, "2", "1", &["--force"])), 0);
}

#[test]
fn missing_inputs_exit_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope");
    let o = ssada(&[
        "eval", "--checkpoint", s(&missing.join("x.ckpt")), "--dataset", s(&missing), "--out",
        s(&tmp.path().join("e.csv")),
    ]);
    assert_eq!(code(&o), 2);
    let o = ssada(&["train", "--config", s(&missing.join("c.json")), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_usage_exits_one_and_help_zero() {
    assert_eq!(code(&ssada(&["train", "--epochs", "many"])), 1);
    assert_eq!(code(&ssada(&["frobnicate"])), 1);
    assert_eq!(code(&ssada(&["--help"])), 0);
}

#[test]
fn print_config_applies_overrides() {
    let o = ssada(&["train", "--mode", "semi_random", "--u", "4", "--triggers", "5,10", "--print-config", "--out", "x"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["mode"], "semi_random");
    assert_eq!(v["u"], 4.0);
    assert_eq!(v["triggers"], serde_json::json!([5, 10]));
}
