use std::fs;
use std::path::Path;

use roinet_cli::{render_report, run_command, summarize, METRICS_JSON, METRICS_TXT};
use roinet_core::loss_metrics::{ConfusionCounts, F1Report};
use roinet_core::training::{Evaluation, TrainConfig, CHECKPOINT_FILE};

/// Exit code, stdout and stderr of one invocation.
fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["roinet"];
    argv.extend_from_slice(args);
    let code = run_command(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn cli_ok(args: &[&str]) -> String {
    let (code, out, err) = cli(args);
    assert_eq!(code, 0, "{args:?}\n{err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_data(root: &Path) -> String {
    let data = root.join("data");
    cli_ok(&["synth", "--out", p(&data), "--seed", "4", "--subjects", "3", "--sessions", "1", "--frames", "20"]);
    data.display().to_string()
}

#[test]
fn help_and_version_succeed() {
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["synth", "train", "eval", "gradcheck", "report"] {
        assert!(out.contains(sub), "{out}");
    }
    assert_eq!(cli(&["train", "--help"]).0, 0);
    assert_eq!(cli(&["--version"]).0, 0);
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let out = dir.path().join("run");
    let out = p(&out);
    assert_eq!(cli(&["frobnicate"]).0, 1);
    assert_eq!(cli(&["train", "--data", &data, "--out", out, "--bogus"]).0, 1);
    assert_eq!(cli(&["train", "--data", &data, "--out", out, "--mode", "cnn"]).0, 1);
    assert_eq!(cli(&["train", "--data", &data, "--out", out, "--lr", "0"]).0, 1);
    assert_eq!(cli(&["train", "--data", &data, "--out", out, "--fold", "3", "--folds", "3"]).0, 1);
    assert_eq!(cli(&["gradcheck", "--seeds", "0"]).0, 1);
    let (code, _, err) = cli(&["eval", "--checkpoint", "x.ckpt", "--data", &data, "--threshold", "1.5"]);
    assert_eq!(code, 1);
    assert!(err.contains("threshold"), "{err}");
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = dir.path().join("run");
    let (code, _, err) = cli(&["train", "--data", p(&missing), "--out", p(&out), "--iterations", "1"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"), "{err}");
    let data = tiny_data(dir.path());
    assert_eq!(cli(&["eval", "--checkpoint", p(&missing), "--data", &data]).0, 2);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let file = dir.path().join("train.json");
    let base = TrainConfig {
        lr: 0.01,
        batch_size: 3,
        max_iterations: 2,
        seed: 9,
        ..Default::default()
    };
    fs::write(&file, serde_json::to_string(&base).unwrap()).unwrap();
    let run = dir.path().join("run");
    let out = cli_ok(&[
        "train", "--config", p(&file), "--data", &data, "--out", p(&run), "--lr", "0.002", "--fold", "1", "--folds",
        "3",
    ]);
    let line = out.lines().find_map(|l| l.strip_prefix("config: ")).unwrap();
    let used: TrainConfig = serde_json::from_str(line).unwrap();
    let expected = TrainConfig {
        lr: 0.002,
        fold: Some(1),
        folds: 3,
        ..base
    };
    assert_eq!(used, expected);
    assert!(out.lines().any(|l| l == "seed: 9"), "{out}");
    assert!(run.join(CHECKPOINT_FILE).is_file());
}

#[test]
fn eval_writes_a_per_au_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let run = dir.path().join("run");
    cli_ok(&["train", "--data", &data, "--out", p(&run), "--mode", "fvgg", "--fold", "0", "--folds", "3", "--iterations", "2"]);
    let out = cli_ok(&["eval", "--checkpoint", p(&run.join(CHECKPOINT_FILE)), "--data", &data]);
    assert!(out.lines().any(|l| l.starts_with("config: ")) && out.lines().any(|l| l.starts_with("seed: ")));
    let table = fs::read_to_string(run.join(METRICS_TXT)).unwrap();
    assert!(out.ends_with(&table));
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 13, "{table}");
    assert!(rows[12].starts_with("Avg"));
    let e: Evaluation = serde_json::from_str(&fs::read_to_string(run.join(METRICS_JSON)).unwrap()).unwrap();
    // the checkpoint remembers its fold: one held-out subject of three
    assert_eq!((e.mode.as_str(), e.fold, e.frames), ("fvgg", Some(0), 20));
    assert_eq!(e.report.per_au.len(), 12);
}

fn evaluation(mode: &str, fold: usize, per_au: [f64; 2]) -> Evaluation {
    Evaluation {
        mode: mode.into(),
        fold: Some(fold),
        seed: 0,
        aus: vec![1, 2],
        frames: 10,
        report: F1Report {
            per_au: per_au.to_vec(),
            average: (per_au[0] + per_au[1]) / 2.0,
            counts: vec![ConfusionCounts::default(); 2],
            threshold: 0.5,
        },
    }
}

#[test]
fn report_averages_runs_unweighted() {
    let dir = tempfile::tempdir().unwrap();
    let evals = [
        evaluation("roi", 0, [0.5, 0.7]),
        evaluation("roi", 1, [0.9, 0.1]),
        evaluation("roi", 2, [0.4, 0.4]),
        evaluation("fvgg", 0, [0.2, 0.2]),
    ];
    for (i, e) in evals.iter().enumerate() {
        let d = dir.path().join(format!("runs/r{i}"));
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join(METRICS_JSON), serde_json::to_string(e).unwrap()).unwrap();
    }
    let summary = summarize(&evals).unwrap();
    let roi = summary.iter().find(|s| s.mode == "roi").unwrap();
    assert_eq!(roi.runs, 3);
    assert!((roi.per_au[0] - 0.6).abs() < 1e-12 && (roi.per_au[1] - 0.4).abs() < 1e-12);
    assert!((roi.average - 0.5).abs() < 1e-12);

    let file = dir.path().join("report.txt");
    let out = cli_ok(&["report", "--runs", p(&dir.path().join("runs")), "--out", p(&file)]);
    let text = fs::read_to_string(&file).unwrap();
    assert!(out.ends_with(&text));
    assert_eq!(text, render_report(&evals).unwrap());
    let avg = text.lines().find(|l| l.starts_with("Avg")).unwrap();
    assert_eq!(avg.split_whitespace().collect::<Vec<_>>(), ["Avg", "20.0", "50.0"]);
    assert!(text.contains("+30.0 points"), "{text}");
    assert!(text.contains("66.1") && text.contains("51.3"));
}

#[test]
fn report_rejects_mixed_thresholds() {
    let mut other = evaluation("roi", 1, [0.1, 0.1]);
    other.report.threshold = 0.3;
    assert!(summarize(&[evaluation("roi", 0, [0.1, 0.1]), other]).is_err());
}

#[test]
fn gradcheck_passes_for_a_fixed_seed() {
    let out = cli_ok(&["gradcheck", "--seed", "7"]);
    assert!(out.contains("all gradient checks passed"));
}
