//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so every line shows up in the
//! normal `cargo test` output. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 2 5`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roinet_cli::{collect_evaluations, run_command, summarize, ModeSummary};
use roinet_core::data_synth::{synthesize, Dataset, SynthConfig};
use roinet_core::loss_metrics::{
    f1_per_label, multilabel_loss, multilabel_loss_node, offset_loss_term, subject_kfold_split, LabelMatrix,
    ProbMatrix,
};
use roinet_core::lstm::{cell_step, LstmLayerNodes, LstmLayerParams, LstmState};
use roinet_core::model::{region_prefix, roi_forward, AuModel, ModelConfig};
use roinet_core::roi_geometry::{map_to_feature_grid, GridSize, ImageSize, Point, NUM_REGIONS};
use roinet_core::tensor_core::{Graph, Tensor};
use roinet_core::training::{gradient_suite, train_run, TrainConfig, TrainMode, GRAD_TOLERANCE};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Outcome;

const CRITERIA: [(u32, &str, Check); 9] = [
    (1, "gradient correctness", gradients),
    (2, "LSTM oracle equivalence", lstm_oracle),
    (3, "loss law", loss_law),
    (4, "metric oracle and folds", metric_oracle),
    (5, "geometry robustness", geometry),
    (6, "region locality", region_locality),
    (7, "directional ablations", ablations),
    (8, "determinism", determinism),
    (9, "overfit sanity", overfit),
];

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (n, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        println!(
            "criterion {n} {:<26} {}  {} [{:.1}s]",
            name,
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("roinet-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("roinet").chain(args.iter().copied());
    let code = run_command(argv, &mut out, &mut err);
    let text = String::from_utf8_lossy(&out).into_owned() + &String::from_utf8_lossy(&err);
    (code, text)
}

fn cli_ok(args: &[&str]) -> String {
    let (code, text) = cli(args);
    assert_eq!(code, 0, "roinet {} failed:\n{text}", args.join(" "));
    text
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut checks = 0;
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    let mut failures = Vec::new();
    for seed in 0..20 {
        for row in gradient_suite(seed).unwrap() {
            checks += 1;
            worst = worst.max(row.max_rel_error);
            kinks += row.kink_crossings;
            if !row.passed {
                failures.push(format!("{} (seed {seed}, {:.2e})", row.name, row.max_rel_error));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && worst < GRAD_TOLERANCE && elapsed < Duration::from_secs(120);
    Outcome::new(
        pass,
        format!(
            "{checks} checks over 20 seeds, max rel err {worst:.2e} (< {GRAD_TOLERANCE:e}), \
             {kinks} coordinates re-differenced near a kink, {:.1}s (< 120s){}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Direct scalar evaluation of one LSTM step for one batch row.
fn lstm_direct(p: &LstmLayerParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hx: Vec<f64> = h.iter().chain(x).copied().collect();
    let n = p.hidden_len;
    let pre = |w: &Tensor, b: &Tensor, j: usize| -> f64 {
        let row = &w.data()[j * hx.len()..(j + 1) * hx.len()];
        row.iter().zip(&hx).map(|(a, b)| a * b).sum::<f64>() + b.data()[j]
    };
    let mut h_new = vec![0.0; n];
    let mut c_new = vec![0.0; n];
    for j in 0..n {
        let f = sigmoid(pre(&p.wf, &p.bf, j));
        let i = sigmoid(pre(&p.wi, &p.bi, j));
        let cand = pre(&p.wc, &p.bc, j).tanh();
        let o = sigmoid(pre(&p.wo, &p.bo, j));
        c_new[j] = f * c[j] + i * cand;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

/// `(h, C)` from the graph implementation for a batch.
fn lstm_graph(p: &LstmLayerParams, x: &Tensor, h: &Tensor, c: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let nodes = LstmLayerNodes::record(&mut g, p);
    let x = g.constant(x.clone());
    let h = g.constant(h.clone());
    let c = g.constant(c.clone());
    let s = cell_step(&mut g, x, LstmState { h, c }, &nodes).unwrap();
    (g.data(s.h).to_vec(), g.data(s.c).to_vec())
}

fn lstm_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (batch, input, hidden) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let p = LstmLayerParams::init(input, hidden, 0.8, rng.random_range(-1.0..1.0), &mut rng);
        let x = Tensor::randn(vec![batch, input], 1.0, &mut rng);
        let h = Tensor::randn(vec![batch, hidden], 0.5, &mut rng);
        let c = Tensor::randn(vec![batch, hidden], 1.0, &mut rng);
        let (gh, gc) = lstm_graph(&p, &x, &h, &c);
        for b in 0..batch {
            let (dh, dc) = lstm_direct(
                &p,
                &x.data()[b * input..(b + 1) * input],
                &h.data()[b * hidden..(b + 1) * hidden],
                &c.data()[b * hidden..(b + 1) * hidden],
            );
            for j in 0..hidden {
                worst = worst.max((gh[b * hidden + j] - dh[j]).abs());
                worst = worst.max((gc[b * hidden + j] - dc[j]).abs());
            }
        }
    }
    // scalar case: zero state, x = 1 and every gate weight on x equal to 1,
    // so W [h, x] + b = 1 at all four gates
    let mut p = LstmLayerParams::init(1, 1, 0.0, 0.0, &mut rng);
    for w in [&mut p.wf, &mut p.wi, &mut p.wc, &mut p.wo] {
        *w = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    }
    let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let zero = Tensor::zeros(vec![1, 1]);
    let (gh, gc) = lstm_graph(&p, &one, &zero, &zero);
    let (dh, dc) = lstm_direct(&p, &[1.0], &[0.0], &[0.0]);
    worst = worst.max((gh[0] - dh[0]).abs()).max((gc[0] - dc[0]).abs());
    let quoted_h = 0.36876;
    let quoted_c = 0.55677;
    let pass = worst < 1e-12 && (gc[0] - quoted_c).abs() < 5e-6;
    Outcome::new(
        pass,
        format!(
            "101 cases, max |graph - direct| {worst:.1e} (< 1e-12); scalar case C_t = {:.6} (quoted {quoted_c}), \
             h_t = {:.6} = sigma(1) tanh(C_t) (quoted {quoted_h} differs by {:.1e}, a rounding slip in the quote)",
            gc[0],
            gh[0],
            (gh[0] - quoted_h).abs()
        ),
    )
}

fn loss_law() -> Outcome {
    let ln21 = 21f64.ln();
    let mut worst_extreme: f64 = 0.0;
    let mut zero_ok = true;
    for (p, l) in [(0.0, 0u8), (1.0, 1u8)] {
        zero_ok &= offset_loss_term(p, l) == 0.0;
    }
    for (p, l) in [(0.0, 1u8), (1.0, 0u8)] {
        worst_extreme = worst_extreme.max((offset_loss_term(p, l) - ln21).abs());
    }
    // gradient at the interval ends
    let mut g = Graph::new();
    let probs = g.variable(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
    let loss = multilabel_loss_node(&mut g, probs, &[0.0, 1.0, 0.0, 1.0]).unwrap();
    let grads = g.backward(loss).unwrap();
    let grad = grads.get(probs).unwrap().to_vec();
    let finite = g.scalar(loss).is_finite() && grad.iter().all(|v| v.is_finite());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (rows, cols) = (rng.random_range(1..20), rng.random_range(1..13));
        let p: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..=1.0)).collect();
        let l: Vec<u8> = (0..rows * cols).map(|_| rng.random_range(0..2)).collect();
        let direct: f64 = -p
            .iter()
            .zip(&l)
            .map(|(&p, &l)| {
                if l == 1 {
                    ((p + 0.05) / 1.05).ln()
                } else {
                    ((1.05 - p) / 1.05).ln()
                }
            })
            .sum::<f64>();
        let value = multilabel_loss(
            &ProbMatrix::new(rows, cols, p).unwrap(),
            &LabelMatrix::new(rows, cols, l).unwrap(),
        )
        .unwrap();
        worst = worst.max((value - direct).abs());
    }
    let pass = zero_ok && worst_extreme <= 1e-12 && finite && worst < 1e-12;
    Outcome::new(
        pass,
        format!(
            "0 at p = l: {zero_ok}; |L - ln 21| at opposite extremes {worst_extreme:.1e}; \
             finite loss and gradient at p in {{0, 1}}: {finite} (dL/dp = {grad:?}); \
             1000 random matrices, max |L - direct| {worst:.1e} (< 1e-12)"
        ),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (rows, cols) = (rng.random_range(1..40), rng.random_range(1..13));
        let p: Vec<f64> = (0..rows * cols).map(|_| (rng.random_range(0..=20) as f64) / 20.0).collect();
        let l: Vec<u8> = (0..rows * cols).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let t = [0.25, 0.5, 0.75][rng.random_range(0..3)];
        let report = f1_per_label(
            &ProbMatrix::new(rows, cols, p.clone()).unwrap(),
            &LabelMatrix::new(rows, cols, l.clone()).unwrap(),
            t,
        )
        .unwrap();
        let mut f1s = Vec::new();
        for c in 0..cols {
            let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for r in 0..rows {
                let (pred, truth) = (p[r * cols + c] >= t, l[r * cols + c] == 1);
                match (pred, truth) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            let cc = report.counts[c];
            if (cc.tp, cc.fp, cc.fn_, cc.tn) != (tp, fp, fn_, tn) {
                mismatches += 1;
            }
            let f1 = if tp + fp + fn_ == 0 {
                1.0
            } else {
                (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
            };
            if report.per_au[c] != f1 {
                mismatches += 1;
            }
            f1s.push(f1);
        }
        if report.average != f1s.iter().sum::<f64>() / cols as f64 {
            mismatches += 1;
        }
    }
    let ids: Vec<String> = (0..41).map(|i| format!("S{i:03}")).collect();
    let mut fold_problems = Vec::new();
    let mut sizes = Vec::new();
    for seed in 0..10 {
        let split = subject_kfold_split(&ids, 3, seed).unwrap();
        let mut s = split.fold_sizes();
        let folds: Vec<Vec<&str>> = (0..3).map(|f| split.subjects_in(f)).collect();
        let mut all: Vec<&str> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        if before != 41 || all.len() != 41 {
            fold_problems.push(format!("seed {seed}: {before} assignments, {} distinct", all.len()));
        }
        s.sort_unstable_by(|a, b| b.cmp(a));
        if s != [14, 14, 13] {
            fold_problems.push(format!("seed {seed}: sizes {s:?}"));
        }
        sizes = s;
    }
    let pass = mismatches == 0 && fold_problems.is_empty();
    Outcome::new(
        pass,
        format!(
            "1000 instances, {mismatches} count/F1 mismatches vs brute force; 41 subjects over 10 split seeds: \
             disjoint and exhaustive, sizes {sizes:?}{}",
            if fold_problems.is_empty() { String::new() } else { format!("; problems: {}", fold_problems.join(", ")) }
        ),
    )
}

fn geometry() -> Outcome {
    let image = ImageSize::square(224);
    let grid = GridSize { rows: 14, cols: 14 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut probes = 0;
    let s = std::f64::consts::FRAC_1_SQRT_2 * 10.0;
    let fixed = [(10.0, 0.0), (-10.0, 0.0), (0.0, 10.0), (0.0, -10.0), (s, s), (s, -s), (-s, s), (-s, -s)];
    for _ in 0..10_000 {
        let p = Point::new(rng.random_range(0.0..224.0), rng.random_range(0.0..224.0));
        let (r0, c0) = map_to_feature_grid(p, image, grid);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(0.0..=10.0);
        let random = (len * angle.cos(), len * angle.sin());
        for (dx, dy) in fixed.iter().copied().chain([random]) {
            let q = image.clamp(Point::new(p.x + dx, p.y + dy));
            let (r1, c1) = map_to_feature_grid(q, image, grid);
            probes += 1;
            if r0.abs_diff(r1) > 1 || c0.abs_diff(c1) > 1 {
                violations += 1;
            }
        }
    }
    Outcome::new(
        violations == 0,
        format!("10000 points on a 224 px image, 14x14 grid, {probes} perturbations of <= 10 px: {violations} moved more than one cell"),
    )
}

fn region_locality() -> Outcome {
    let cfg = ModelConfig::desk();
    let model = AuModel::new(cfg.clone(), 6).unwrap();
    let scfg = SynthConfig {
        subjects: 1,
        sessions: 1,
        frames: 1,
        ..Default::default()
    };
    let frame = synthesize(&scfg, 6).unwrap().remove(0);
    let windows = vec![model.windows_for(&frame.record.landmarks).unwrap()];
    let (channels, grid) = cfg.feature_map();
    let shape = vec![1, channels, grid.rows, grid.cols];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base = Tensor::randn(shape.clone(), 1.0, &mut rng);
    let weights: Vec<Tensor> = (0..NUM_REGIONS)
        .map(|_| Tensor::randn(vec![1, cfg.roi_subnet.feature_len], 1.0, &mut rng))
        .collect();
    let all: Vec<usize> = (0..NUM_REGIONS).collect();
    // features of every region and the gradients of sum_r w_r . feature_r
    let run = |map: &Tensor, regions: &[usize]| {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let m = g.constant(map.clone());
        let feats = roi_forward(&mut g, &bound, "", &cfg, m, &windows, regions).unwrap();
        let mut total = None;
        for &(r, f) in &feats {
            let w = g.constant(weights[r].clone());
            let prod = g.mul(f, w).unwrap();
            let s = g.sum(prod);
            total = Some(match total {
                Some(t) => g.add(t, s).unwrap(),
                None => s,
            });
        }
        let grads = g.backward(total.unwrap()).unwrap();
        let values: Vec<Vec<f64>> = feats.iter().map(|&(_, f)| g.data(f).to_vec()).collect();
        let region_grads: Vec<Vec<(String, Vec<f64>)>> = (0..NUM_REGIONS)
            .map(|r| {
                let prefix = region_prefix(r);
                bound
                    .iter()
                    .filter(|(n, _)| n.starts_with(&prefix))
                    .map(|(n, id)| (n.to_string(), grads.get_or_zeros(id, g.data(id).len())))
                    .collect()
            })
            .collect();
        (values, region_grads)
    };
    let (base_feats, base_grads) = run(&base, &all);
    let mut changed_features = 0;
    let mut changed_grads = 0;
    let mut nonzero_foreign = 0;
    for k in 0..NUM_REGIONS {
        let win = windows[0][k];
        let mut perturbed = base.clone();
        let (h, w) = (grid.rows, grid.cols);
        for (i, v) in perturbed.data_mut().iter_mut().enumerate() {
            let (row, col) = ((i / w) % h, i % w);
            if !win.contains(row, col) {
                *v += rng.random_range(-3.0..3.0);
            }
        }
        let (feats, grads) = run(&perturbed, &all);
        if feats[k].iter().zip(&base_feats[k]).any(|(a, b)| a.to_bits() != b.to_bits()) {
            changed_features += 1;
        }
        if grads[k] != base_grads[k] {
            changed_grads += 1;
        }
        // a loss built only from the other regions leaves region k untouched
        let others: Vec<usize> = (0..NUM_REGIONS).filter(|&r| r != k).collect();
        let (_, grads) = run(&perturbed, &others);
        if grads[k].iter().any(|(_, g)| g.iter().any(|&v| v != 0.0)) {
            nonzero_foreign += 1;
        }
    }
    let pass = changed_features == 0 && changed_grads == 0 && nonzero_foreign == 0;
    Outcome::new(
        pass,
        format!(
            "20 regions, map perturbed outside each window: {changed_features} features changed bits, \
             {changed_grads} region gradients changed, {nonzero_foreign} regions with non-zero gradient from other regions' loss"
        ),
    )
}

fn mean_of(summaries: &[ModeSummary], mode: TrainMode) -> f64 {
    summaries
        .iter()
        .find(|s| s.mode == mode.name())
        .map(|s| s.average * 100.0)
        .unwrap_or(f64::NAN)
}

fn ablations() -> Outcome {
    let start = Instant::now();
    let dir = scratch("ablation");
    let data = dir.join("data");
    let data_s = data.to_str().unwrap();
    cli_ok(&["synth", "--out", data_s, "--seed", "0"]);
    let folds = ["0", "1", "2"];
    for seed in ["0", "1", "2"] {
        for fold in folds {
            let run = |mode: &str, init: Option<&Path>| {
                let out = dir.join(format!("runs/{mode}/seed{seed}-fold{fold}"));
                let out_s = out.to_str().unwrap().to_string();
                let mut args = vec![
                    "train", "--mode", mode, "--fold", fold, "--folds", "3", "--data", data_s, "--out", &out_s,
                    "--seed", seed, "--iterations", "500",
                ];
                let init_s = init.map(|p| p.to_str().unwrap().to_string());
                if let Some(p) = &init_s {
                    args.extend(["--init", p.as_str()]);
                }
                cli_ok(&args);
                let ck = out.join("checkpoint.bin");
                cli_ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data_s, "--threshold", "0.5"]);
                ck
            };
            run("fvgg", None);
            let roi = run("roi", None);
            // the temporal models start from this seed's ROI network
            run("roi_lstm1", Some(&roi));
            run("roi_lstm3", Some(&roi));
        }
    }
    let report = dir.join("report.txt");
    cli_ok(&["report", "--runs", dir.join("runs").to_str().unwrap(), "--out", report.to_str().unwrap()]);
    let summaries = summarize(&collect_evaluations(&dir.join("runs")).unwrap()).unwrap_or_default();
    let complete = summaries.len() == 4 && summaries.iter().all(|s| s.runs == 9);
    let (fvgg, roi, t1, t3) = (
        mean_of(&summaries, TrainMode::Fvgg),
        mean_of(&summaries, TrainMode::Roi),
        mean_of(&summaries, TrainMode::RoiLstm1),
        mean_of(&summaries, TrainMode::RoiLstm3),
    );
    let elapsed = start.elapsed();
    let a = roi - fvgg >= 5.0;
    let b = t1 >= roi;
    let c = t3 <= t1 + 1.0;
    let in_time = elapsed < Duration::from_secs(30 * 60);
    let mark = |ok: bool| if ok { "ok" } else { "NOT MET" };
    let _ = fs::remove_dir_all(&dir);
    Outcome::new(
        complete && a && b && c && in_time,
        format!(
            "mean F1 over 3 seeds x 3 folds: FVGG {fvgg:.2}, ROI {roi:.2}, R-T1 {t1:.2}, R-T3 {t3:.2}; \
             (a) ROI - FVGG = {:+.2} >= 5 {}; (b) R-T1 - ROI = {:+.2} >= 0 {}; (c) R-T3 - R-T1 = {:+.2} <= 1 {}; \
             {:.1} min (< 30 min) {}",
            roi - fvgg,
            mark(a),
            t1 - roi,
            mark(b),
            t3 - t1,
            mark(c),
            elapsed.as_secs_f64() / 60.0,
            mark(in_time)
        ),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Relative paths whose bytes differ between two trees (or exist in one only).
fn differing(a: &Path, b: &Path, skip: &[&str]) -> (usize, Vec<String>) {
    let fa = files_under(a);
    let fb = files_under(b);
    let mut diffs = Vec::new();
    if fa != fb {
        diffs.push("file lists differ".to_string());
    }
    let mut compared = 0;
    for f in &fa {
        if skip.iter().any(|s| f.ends_with(s)) {
            continue;
        }
        compared += 1;
        if fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() {
            diffs.push(f.display().to_string());
        }
    }
    (compared, diffs)
}

fn determinism() -> Outcome {
    let dir = scratch("determinism");
    let mut compared = 0;
    let mut diffs = Vec::new();
    // both copies run in the same place so every flag, paths included, is identical
    let root = dir.join("work");
    for copy in ["a", "b"] {
        let data = root.join("data");
        let d = data.to_str().unwrap();
        cli_ok(&["synth", "--out", d, "--seed", "11", "--subjects", "3", "--sessions", "2", "--frames", "30"]);
        let runs = root.join("runs");
        let roi = runs.join("roi");
        cli_ok(&[
            "train", "--mode", "roi", "--fold", "1", "--data", d, "--out", roi.to_str().unwrap(), "--seed", "5",
            "--iterations", "25",
        ]);
        let roi_ck = roi.join("checkpoint.bin");
        let lstm = runs.join("roi_lstm2");
        cli_ok(&[
            "train", "--mode", "roi_lstm2", "--fold", "1", "--data", d, "--out", lstm.to_str().unwrap(), "--seed", "5",
            "--iterations", "25", "--init", roi_ck.to_str().unwrap(),
        ]);
        let single = runs.join("single_au");
        cli_ok(&[
            "train", "--mode", "single_au", "--fold", "1", "--data", d, "--out", single.to_str().unwrap(), "--seed",
            "5", "--iterations", "3",
        ]);
        for run in [&roi, &lstm, &single] {
            cli_ok(&["eval", "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(), "--data", d]);
        }
        cli_ok(&["report", "--runs", runs.to_str().unwrap(), "--out", root.join("report.txt").to_str().unwrap()]);
        fs::rename(&root, dir.join(copy)).unwrap();
    }
    let (n, d) = differing(&dir.join("a"), &dir.join("b"), &["timing.txt"]);
    compared += n;
    diffs.extend(d);
    let _ = fs::remove_dir_all(&dir);
    Outcome::new(
        diffs.is_empty() && compared > 0,
        format!(
            "synth, train (roi, roi_lstm2, single_au), eval and report run twice: {compared} artifacts compared \
             (wall-clock timing files excluded), {} differ{}",
            diffs.len(),
            if diffs.is_empty() { String::new() } else { format!(": {}", diffs.join(", ")) }
        ),
    )
}

fn overfit() -> Outcome {
    let scfg = SynthConfig::default();
    let data = Dataset::from_synth(&scfg, synthesize(&scfg, 0).unwrap()).unwrap();
    let dir = scratch("overfit");
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let cfg = TrainConfig {
            mode: TrainMode::Roi,
            lr: 1e-4,
            max_iterations: 2000,
            single_batch: true,
            seed,
            ..Default::default()
        };
        let summary = train_run(&cfg, &data, &dir.join(format!("seed{seed}"))).unwrap();
        match summary.losses.iter().position(|&l| l < 0.01) {
            Some(i) => parts.push(format!(
                "seed {seed}: below 0.01 at iteration {}, final {:.1e}",
                i + 1,
                summary.final_loss
            )),
            None => {
                pass = false;
                parts.push(format!("seed {seed}: never below 0.01, final {:.4}", summary.final_loss));
            }
        }
    }
    let _ = fs::remove_dir_all(&dir);
    Outcome::new(
        pass,
        format!("ROI, desk scale, batch 8 replayed, lr 1e-4, 2000 iterations; {}", parts.join("; ")),
    )
}
