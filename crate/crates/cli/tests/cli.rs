use std::path::Path;
use std::process::{Command, Output};

use ttrack_core::report::EvalReport;

fn ttrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = r#"
[model.backbone]
widths = [8, 16, 24, 24, 16]

[model.transformer]
channels = 12
heads = 6

[synth]
frames = 5

[train]
epochs = 2
freeze_epochs = 0
batch_size = 1
jitter = 0.0
"#;

fn toy_setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let seq = dir.join("seq");
    let out = ttrack(&[
        "synth",
        "--config",
        s(&cfg),
        "--seed",
        "4",
        "--out",
        s(&seq),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (s(&cfg).to_owned(), s(&seq).to_owned())
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = ttrack(&["eval-offline", "--no-such-flag"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn zero_latency_report_matches_offline() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, seq) = toy_setup(dir.path());
    let off_path = dir.path().join("off.json");
    let on_path = dir.path().join("on.json");
    let off = ttrack(&[
        "eval-offline",
        "--config",
        &cfg,
        "--seq-dir",
        &seq,
        "--report",
        s(&off_path),
    ]);
    assert!(
        off.status.success(),
        "{}",
        String::from_utf8_lossy(&off.stderr)
    );
    let on = ttrack(&[
        "eval-online",
        "--config",
        &cfg,
        "--seq-dir",
        &seq,
        "--latency",
        "constant:0",
        "--report",
        s(&on_path),
    ]);
    assert!(
        on.status.success(),
        "{}",
        String::from_utf8_lossy(&on.stderr)
    );
    let a = EvalReport::from_json(&std::fs::read_to_string(&off_path).unwrap()).unwrap();
    let b = EvalReport::from_json(&std::fs::read_to_string(&on_path).unwrap()).unwrap();
    assert!(a.same_scores(&b));
    assert_eq!(a.pairing, b.pairing);
    assert_eq!(a.metrics.frames, 5);
    assert!(String::from_utf8_lossy(&off.stdout).contains("success AUC"));
}

#[test]
fn slow_online_run_lags_and_fifo_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, seq) = toy_setup(dir.path());
    let path = dir.path().join("slow.json");
    let out = ttrack(&[
        "eval-online",
        "--config",
        &cfg,
        "--seq-dir",
        &seq,
        "--latency",
        "constant:70",
        "--scheduling",
        "fifo",
        "--report",
        s(&path),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = EvalReport::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(r.pairing[0].prediction_frame, None);
    assert_eq!(r.config.latency.as_deref(), Some("constant:70"));
}

#[test]
fn bad_latency_spec_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, seq) = toy_setup(dir.path());
    let out = ttrack(&[
        "eval-online",
        "--config",
        &cfg,
        "--seq-dir",
        &seq,
        "--latency",
        "constant:-3",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latency"));
}

#[test]
fn track_starts_at_the_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, seq) = toy_setup(dir.path());
    let out = ttrack(&["track", "--config", &cfg, "--seq-dir", &seq]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    let gt = std::fs::read_to_string(Path::new(&seq).join("groundtruth.txt")).unwrap();
    let first: Vec<f64> = lines[0].split(',').map(|v| v.parse().unwrap()).collect();
    let want: Vec<f64> = gt
        .lines()
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    for (a, b) in first.iter().zip(&want) {
        assert!((a - b).abs() < 1e-9, "{first:?} vs {want:?}");
    }
}

#[test]
fn gradcheck_and_selftest_pass() {
    let g = ttrack(&["gradcheck"]);
    assert!(g.status.success());
    assert!(!String::from_utf8_lossy(&g.stdout).contains("FAIL"));
    let t = ttrack(&["selftest"]);
    assert!(t.status.success());
    let table = String::from_utf8_lossy(&t.stdout);
    assert!(
        table.lines().count() >= 7 && table.lines().all(|l| l.starts_with("PASS")),
        "{table}"
    );
}

#[test]
fn train_then_evaluate_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, seq) = toy_setup(dir.path());
    let ckpt = dir.path().join("m.ttck");
    let out = ttrack(&["train", "--config", &cfg, "--clips", "2", "--out", s(&ckpt)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        String::from_utf8_lossy(&out.stdout)
            .matches("epoch")
            .count(),
        2
    );
    let ev = ttrack(&[
        "eval-offline",
        "--config",
        &cfg,
        "--seq-dir",
        &seq,
        "--checkpoint",
        s(&ckpt),
    ]);
    assert!(
        ev.status.success(),
        "{}",
        String::from_utf8_lossy(&ev.stderr)
    );
    // The default widths do not fit a toy checkpoint.
    let bad = ttrack(&["eval-offline", "--seq-dir", &seq, "--checkpoint", s(&ckpt)]);
    assert!(!bad.status.success());
}

#[test]
fn malformed_groundtruth_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, seq) = toy_setup(dir.path());
    let gt = Path::new(&seq).join("groundtruth.txt");
    let mut text = std::fs::read_to_string(&gt).unwrap();
    text = text.replacen('\n', "\n1,2,3\n", 1);
    std::fs::write(&gt, text).unwrap();
    let out = ttrack(&["eval-offline", "--config", &cfg, "--seq-dir", &seq]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}
