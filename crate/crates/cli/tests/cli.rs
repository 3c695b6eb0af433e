use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn moemba(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moemba")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn kv(out: &Output) -> BTreeMap<String, String> {
    stdout(out)
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Two subjects with short recordings keep the end-to-end runs fast.
const SMALL: [&str; 4] = ["--set", "synth.subjects=2", "--set", "synth.samples=400"];

fn synth(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", name];
    args.extend(SMALL);
    args.extend(extra);
    let out = moemba(&args, dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn synth_is_deterministic_and_summarized() {
    let dir = tempfile::tempdir().unwrap();
    let a = kv(&synth(dir.path(), "a.memd", &["--seed", "7"]));
    let b = kv(&synth(dir.path(), "b.memd", &["--seed", "7"]));
    let c = kv(&synth(dir.path(), "c.memd", &["--seed", "8"]));
    assert_eq!(a["sha256"], b["sha256"]);
    assert_ne!(a["sha256"], c["sha256"]);
    assert_eq!(a["recordings"], "32");
    assert_eq!(a["classes"], "8");
    let bytes = std::fs::metadata(dir.path().join("a.memd")).unwrap().len();
    assert_eq!(a["bytes"], bytes.to_string());
    assert_eq!(std::fs::read(dir.path().join("a.memd")).unwrap(), std::fs::read(dir.path().join("b.memd")).unwrap());
}

#[test]
fn synth_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = moemba(&["synth", "--classes", "1", "--out", "x.memd"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("x.memd").exists());
}

#[test]
fn count_prints_key_value_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = moemba(&["count", "--compare-paper"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    for line in stdout(&out).lines() {
        assert!(line.split_once('=').is_some_and(|(k, v)| !k.is_empty() && !v.is_empty()), "{line}");
    }
    let m = kv(&out);
    assert_eq!(m["paper_params"], "455003");
    let params: f64 = m["params"].parse().unwrap();
    let dev: f64 = m["params_deviation_pct"].parse().unwrap();
    assert!((dev - 100.0 * (params - 455_003.0) / 455_003.0).abs() < 0.01);
    assert!(m.contains_key("flops_deviation_pct"));
}

#[test]
fn count_matches_hand_sum_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let sets = [
        "model.electrodes=4",
        "model.classes=3",
        "model.wtfm_channels=2",
        "model.value_channels=2",
        "model.attn_reduction=1",
        "model.d_model=8",
        "model.state=4",
        "model.expand=2",
    ];
    let mut args = vec!["count"];
    for s in &sets {
        args.extend(["--set", s]);
    }
    let m = kv(&moemba(&args, dir.path()));

    // wavelet stage: 3x3 and 7x7 kernels per channel, two attention
    // projections, one value embedding row per electrode
    let wtfm = 2 * 9 + 2 * 49 + 2 * 2 + 2 * 4;
    // six feature maps pooled over electrodes, then a linear map to d_model
    let embed = 6 * 4 + 6 * 8 + 8;
    // in-projection 8->32, depthwise conv width 4 with bias, B/C/delta
    // projections, A (16x4), skip D, out-projection 16->8
    let block = 8 * 32 + 16 * 4 + 16 + 16 * 4 + 2 * 4 * 16 + 16 + 16 + 16 * 8;
    let gate = 2 * 8 * 2;
    let head = 2 * 8 + 8 * 3 + 3;
    assert_eq!(m["params"], (wtfm + embed + 2 * block + gate + head).to_string());
    assert_eq!(m["electrodes"], "4");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(moemba(&["count", "--set", "model.d_modle=8"], dir.path()).status.code(), Some(1));
    assert_eq!(moemba(&["count", "--set", "nokey"], dir.path()).status.code(), Some(1));
    assert_eq!(moemba(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(moemba(&["--help"], dir.path()).status.code(), Some(0));
    std::fs::write(dir.path().join("nested.json"), r#"{"model": {"d_model": 8}}"#).unwrap();
    assert_eq!(moemba(&["count", "--config", "nested.json"], dir.path()).status.code(), Some(1));
}

#[test]
fn bad_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.memd"), b"not a container").unwrap();
    let out = moemba(&["preprocess", "--data", "junk.memd", "--out", "pp"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    assert_eq!(moemba(&["preprocess", "--data", "missing.memd", "--out", "pp"], dir.path()).status.code(), Some(2));
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s.memd", &[]);
    let out = moemba(
        &["train", "--data", "s.memd", "--preset", "desk", "--set", "train.epochs=1", "--set", "train.lr0=1e200", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.memd", &["--seed", "3"]);

    let pre = kv(&moemba(&["preprocess", "--data", "s.memd", "--out", "pp"], d));
    assert_eq!(pre["protocol"], "inter-session");
    assert_eq!(pre["train_recordings"], "16");
    assert!(d.join("pp/split.csv").exists());

    let out = moemba(&["train", "--data", "s.memd", "--preset", "desk", "--set", "train.epochs=2", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.memc", "history.csv", "config.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(d.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,lr,train_loss,train_acc,val_acc"));

    let out = moemba(&["eval", "--model", "run/model.memc", "--data", "s.memd", "--out", "ev"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["classes"], 8);
    let matrix = report["confusion"]["matrix"].as_array().unwrap();
    assert_eq!(matrix.len(), 8);
    for (class, row) in matrix.iter().enumerate() {
        let n: u64 = row.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert!(n > 0, "class {class} missing from the held-out side");
    }
    for f in ["confusion.csv", "patch_confusion.csv", "roc.csv", "config.json"] {
        assert!(d.join("ev").join(f).exists(), "{f}");
    }

    let out = moemba(&["report", "--eval", "ev", "--history", "run/history.csv"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("balanced accuracy"));
    assert!(d.join("ev/report.md").exists());
}

#[test]
fn eval_with_mismatched_classes_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.memd", &[]);
    synth(d, "g3.memd", &["--classes", "3"]);
    let out = moemba(&["train", "--data", "s.memd", "--preset", "desk", "--set", "train.epochs=1", "--out", "run"], d);
    assert_eq!(out.status.code(), Some(0));
    let out = moemba(&["eval", "--model", "run/model.memc", "--data", "g3.memd", "--out", "ev"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn intra_session_protocol_switches_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.memd", &["--set", "synth.trials_per_class=2"]);
    let inter = kv(&moemba(&["preprocess", "--data", "s.memd", "--out", "a"], d));
    let intra = kv(&moemba(&["preprocess", "--data", "s.memd", "--protocol", "intra-session", "--out", "b"], d));
    assert_eq!(intra["protocol"], "intra-session");
    assert_eq!(inter["train_recordings"], intra["train_recordings"]);
    let a = std::fs::read_to_string(d.join("a/split.csv")).unwrap();
    let b = std::fs::read_to_string(d.join("b/split.csv")).unwrap();
    assert_ne!(a, b);
    // intra-session keeps both sessions on the training side
    let train_sessions: std::collections::BTreeSet<&str> =
        b.lines().skip(1).filter(|l| l.contains(",train,")).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(train_sessions.len(), 2);

    let out = moemba(
        &["train", "--data", "s.memd", "--preset", "desk", "--protocol", "intra-session", "--set", "train.epochs=1", "--out", "run"],
        d,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["protocol"], "intra-session");
}

#[test]
fn resume_continues_and_rejects_model_changes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.memd", &[]);
    let out = moemba(&["train", "--data", "s.memd", "--preset", "desk", "--set", "train.epochs=2", "--out", "full"], d);
    assert_eq!(out.status.code(), Some(0));

    let more = moemba(&["train", "--resume", "full/model.memc", "--data", "s.memd", "--set", "train.epochs=3", "--out", "more"], d);
    assert_eq!(more.status.code(), Some(0), "{}", String::from_utf8_lossy(&more.stderr));
    let history = std::fs::read_to_string(d.join("more/history.csv")).unwrap();
    assert!(history.lines().last().unwrap().starts_with("3,"), "{history}");

    let bad = moemba(&["train", "--resume", "full/model.memc", "--data", "s.memd", "--set", "model.d_model=16", "--out", "x"], d);
    assert_eq!(bad.status.code(), Some(1));
    let preset = moemba(&["train", "--resume", "full/model.memc", "--data", "s.memd", "--preset", "paper", "--out", "y"], d);
    assert_eq!(preset.status.code(), Some(1));
}

#[test]
fn directory_of_csv_recordings_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let csv = d.join("csv");
    std::fs::create_dir(&csv).unwrap();
    // one subject, two sessions, three classes, four channels
    for session in 0..2 {
        for label in 0..3 {
            let mut text = String::new();
            for t in 0..300 {
                let row: Vec<String> = (0..4).map(|c| format!("{:.6}", ((t * (c + 1 + label)) as f64 * 0.05).sin())).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            let name = format!("r{session}_{label}.csv");
            std::fs::write(csv.join(&name), text).unwrap();
            std::fs::write(csv.join(format!("{name}.meta")), format!("label={label} subject=0 session={session}\n")).unwrap();
        }
    }
    let out = moemba(&["preprocess", "--data", "csv", "--out", "pp"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(kv(&out)["train_recordings"], "3");

    std::fs::write(csv.join("r0_0.csv.meta"), "label=0 subject=0\n").unwrap();
    let out = moemba(&["preprocess", "--data", "csv", "--out", "pp2"], d);
    assert_eq!(out.status.code(), Some(2));
}
