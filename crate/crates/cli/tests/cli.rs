use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cleftnet::data::{write_vol1, Volume, Vol1, Vol1Data};

const SMALL: &str = r#"
[model]
channels = [2, 3, 4, 5]
bottom_channels = 6
divisor = 1
patch = [2, 16, 16]

[synth]
extent = [10, 32, 32]
n_clefts = 6

[train]
batch_size = 1
iterations = 6
eval_interval = 3
"#;

fn cleftnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cleftnet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let o = cleftnet(&["synth", "--config", s(&cfg), "--out", s(&dir.join("data"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    cfg
}

#[test]
fn synth_train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d);
    for f in ["train.raw.vol1", "train.labels.vol1", "val.raw.vol1", "val.labels.vol1", "manifest.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let run = d.join("run");
    let o = cleftnet(&["train", "--config", s(&cfg), "--data", s(&d.join("data")), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(run.join("history.tsv")).unwrap();
    assert_eq!(history.lines().filter(|l| !l.starts_with("eval")).count(), 6);
    assert_eq!(history.lines().filter(|l| l.starts_with("eval")).count(), 2);
    assert!(run.join("checkpoint.ckpt1").exists() && run.join("best.ckpt1").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");

    let pred = d.join("pred");
    let o = cleftnet(&[
        "infer", "--config", s(&cfg), "--checkpoint", s(&run.join("checkpoint.ckpt1")),
        "--volume", s(&d.join("data/val")), "--out", s(&pred),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let seg = cleftnet::data::read_vol1(&pred.join("segmentation.vol1")).unwrap();
    assert_eq!(seg.data.shape(), &[2, 32, 32]);

    let eval = d.join("eval");
    let o = cleftnet(&[
        "eval", "--pred", s(&pred.join("segmentation.vol1")), "--gt", s(&d.join("data/val")),
        "--sweep", "0.3,0.7", "--slices", "2", "--out", s(&eval),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    for k in ["TP", "FP", "FN", "TN", "precision", "recall", "F1", "AUC", "ADGT", "ADF", "CREMI-score"] {
        assert!(report.get(k).is_some(), "{k}");
    }
    assert!(eval.join("report_t0.3.json").exists() && eval.join("report_t0.7.txt").exists());
    assert_eq!(fs::read_dir(eval.join("slices")).unwrap().count(), 2);
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = setup(d);
    let data = d.join("data");
    let train = |out: &str, extra: &[&str]| {
        let out = d.join(out);
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = cleftnet(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let straight = train("straight", &[]);
    let first = train("first", &["--iterations", "3"]);
    let resume_from = first.join("checkpoint.ckpt1");
    let second = train("second", &["--resume", s(&resume_from)]);
    assert_eq!(
        fs::read(straight.join("checkpoint.ckpt1")).unwrap(),
        fs::read(second.join("checkpoint.ckpt1")).unwrap()
    );
    let joined = fs::read_to_string(first.join("history.tsv")).unwrap() + &fs::read_to_string(second.join("history.tsv")).unwrap();
    assert_eq!(joined, fs::read_to_string(straight.join("history.tsv")).unwrap());
    // A repeated run reproduces the history byte for byte.
    let again = train("again", &[]);
    assert_eq!(fs::read(again.join("history.tsv")).unwrap(), fs::read(straight.join("history.tsv")).unwrap());
}

#[test]
fn unknown_config_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate_typo = 3\n").unwrap();
    let o = cleftnet(&["config", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate_typo"), "{}", stderr(&o));
    let o = cleftnet(&["train", "--variant", "unet++"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_data_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    let o = cleftnet(&["train", "--data", s(&nowhere), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn evaluating_the_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let gt = Volume::load(&d.join("data/val")).unwrap();
    let field = gt.labels.map(|m| if m { 1.0f32 } else { 0.0 });
    let spacing = gt.spacing.map(|v| v as f32);
    write_vol1(&d.join("perfect.vol1"), &Vol1 { data: Vol1Data::Field(field), spacing }).unwrap();
    let o = cleftnet(&["eval", "--pred", s(&d.join("perfect.vol1")), "--gt", s(&d.join("data/val")), "--out", s(&d.join("eval"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["F1"], 1.0);
    assert_eq!(report["CREMI-score"], 0.0);
    assert_eq!(report["AUC"], 1.0);
}

#[test]
fn gradcheck_passes_and_a_corrupted_rule_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = cleftnet(&["gradcheck", "--out", s(&dir.path().join("ok"))]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("\tPASS\t")).count(), 10, "{stdout}");
    assert!(fs::read_to_string(dir.path().join("ok/gradcheck.txt")).unwrap().contains("max_rel_error"));
    let bad = cleftnet(&["gradcheck", "--fault", "conv3d", "--out", s(&dir.path().join("bad"))]);
    assert_eq!(code(&bad), 4);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
