//! The `roinet` command line: synthesize a dataset, train one mode on one
//! fold, evaluate a checkpoint, check gradients and tabulate ablations.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use roinet_core::data_synth::{generate_dataset, load_dataset, SynthConfig};
use roinet_core::loss_metrics::report::{
    bp4d_reference_columns, disfa_reference_columns, render_table, MethodColumn, BP4D_AUS, DISFA_AUS,
};
use roinet_core::model::Checkpoint;
use roinet_core::training::{
    evaluate_frames, fold_subjects, gradient_suite, render_grad_table, train_run, Evaluation, TrainConfig, TrainMode,
};

/// Per-checkpoint evaluation written by `eval` and read by `report`.
pub const METRICS_JSON: &str = "metrics.json";
/// Plain-text F1 table written next to [`METRICS_JSON`].
pub const METRICS_TXT: &str = "metrics.txt";

#[derive(Debug, Parser)]
#[command(name = "roinet", version, about = "ROI nets, multi-label learning and LSTM fusion for AU detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one mode on one fold and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Per-AU F1 of a checkpoint on its held-out fold.
    Eval(EvalArgs),
    /// Finite-difference check of every op and the full model.
    Gradcheck(GradcheckArgs),
    /// Fold-averaged ablation table over a directory of evaluations.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON generator settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// fvgg, roi, single_au, roi_lstm1, roi_lstm2, roi_lstm3 or transfer.
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// JSON training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed of the subject split (kept apart from the training seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Checkpoint to start from (ROI+LSTM modes) or to transfer from.
    #[arg(long)]
    pub init: Option<String>,
    /// Replay the first batch every iteration.
    #[arg(long)]
    pub single_batch: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out fold; defaults to the fold the checkpoint was trained for.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Directory for the metrics files; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Searched recursively for metrics files.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command: bad input (exit 1) or a failure while running (exit 2).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run_command<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid {what} {}: {e}", path.display())))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p, "synth config")?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.subjects {
        cfg.subjects = v;
    }
    if let Some(v) = a.sessions {
        cfg.sessions = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    writeln!(out, "config: {}", serde_json::to_string(&cfg)?)?;
    writeln!(out, "seed: {}", a.seed)?;
    let manifest = generate_dataset(&cfg, a.seed, &a.out)?;
    let frames: usize = manifest
        .subjects
        .iter()
        .flat_map(|s| &s.sessions)
        .map(|e| e.frames.len())
        .sum();
    writeln!(
        out,
        "wrote {} subjects, {frames} frames to {}",
        manifest.subjects.len(),
        a.out.display()
    )?;
    Ok(())
}

/// Training settings from the config file (or defaults) with flags applied.
pub fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p, "training config")?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(f) = a.fold {
        cfg.fold = Some(f);
    }
    if let Some(k) = a.folds {
        cfg.folds = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.max_iterations = n;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.split_seed {
        cfg.split_seed = s;
    }
    if let Some(p) = &a.init {
        cfg.init_checkpoint = Some(p.clone());
    }
    if a.single_batch {
        cfg.single_batch = true;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = resolve_train_config(&a)?;
    writeln!(out, "config: {}", serde_json::to_string(&cfg)?)?;
    writeln!(out, "seed: {}", cfg.seed)?;
    let data = load_dataset(&a.data)?;
    let summary = train_run(&cfg, &data, &a.out)?;
    for note in &summary.notes {
        writeln!(out, "note: {note}")?;
    }
    writeln!(
        out,
        "trained {} for {} iterations, final mean loss {:.6}",
        cfg.mode,
        summary.iterations,
        summary.final_loss
    )?;
    writeln!(out, "checkpoint: {}", summary.checkpoint.display())?;
    Ok(())
}

fn column_label(mode: &str) -> String {
    mode.parse::<TrainMode>()
        .map(|m| m.label().to_string())
        .unwrap_or_else(|_| mode.to_string())
}

fn metrics_table(e: &Evaluation) -> String {
    let title = match e.fold {
        Some(f) => format!(
            "{} fold {f}, seed {}, {} frames, threshold {}",
            column_label(&e.mode),
            e.seed,
            e.frames,
            e.report.threshold
        ),
        None => format!(
            "{} all subjects, seed {}, {} frames, threshold {}",
            column_label(&e.mode),
            e.seed,
            e.frames,
            e.report.threshold
        ),
    };
    let col = MethodColumn::from_fractions(&column_label(&e.mode), &e.report.per_au, e.report.average);
    render_table(&title, &e.aus, &[col])
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(usage(format!("threshold must lie in (0, 1), got {}", a.threshold)));
    }
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    // the training settings travel inside the checkpoint
    let run: TrainConfig = serde_json::from_str(&ck.run_config).unwrap_or_default();
    let fold = a.fold.or(run.fold);
    let folds = a.folds.unwrap_or(run.folds);
    let split_seed = a.split_seed.unwrap_or(run.split_seed);
    if let Some(f) = fold {
        if f >= folds {
            return Err(usage(format!("fold {f} outside a {folds}-fold split")));
        }
    }
    writeln!(
        out,
        "config: {}",
        serde_json::json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "mode": ck.mode,
            "fold": fold,
            "folds": folds,
            "split_seed": split_seed,
            "threshold": a.threshold,
        })
    )?;
    writeln!(out, "seed: {}", run.seed)?;
    let model = ck.to_model()?;
    let data = load_dataset(&a.data)?;
    let (train, test) = fold_subjects(&data, folds, fold, split_seed)?;
    let subjects = if fold.is_some() { test } else { train };
    let indices = data.indices_for(&subjects);
    let (report, _, _) = evaluate_frames(&model, &data, &indices, a.threshold)?;
    let evaluation = Evaluation {
        mode: ck.mode.clone(),
        fold,
        seed: run.seed,
        aus: data.aus().to_vec(),
        frames: indices.len(),
        report,
    };
    let table = metrics_table(&evaluation);
    let dir = match a.out {
        Some(d) => d,
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let json_path = dir.join(METRICS_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(&evaluation)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    let txt_path = dir.join(METRICS_TXT);
    fs::write(&txt_path, &table).with_context(|| format!("writing {}", txt_path.display()))?;
    write!(out, "{table}")?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    writeln!(out, "config: {}", serde_json::json!({ "seed": a.seed, "seeds": a.seeds }))?;
    writeln!(out, "seed: {}", a.seed)?;
    let mut failed = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        let rows = gradient_suite(seed)?;
        writeln!(out, "seed {seed}")?;
        write!(out, "{}", render_grad_table(&rows))?;
        failed.extend(rows.iter().filter(|r| !r.passed).map(|r| format!("{} (seed {seed})", r.name)));
    }
    if failed.is_empty() {
        writeln!(out, "all gradient checks passed")?;
        Ok(())
    } else {
        Err(anyhow::anyhow!("gradient check failed: {}", failed.join(", ")).into())
    }
}

/// Fold-averaged F1 of one mode: the unweighted mean of its evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: String,
    pub runs: usize,
    pub folds: BTreeSet<usize>,
    pub seeds: BTreeSet<u64>,
    pub per_au: Vec<f64>,
    pub average: f64,
}

/// Groups evaluations by mode (known modes in ablation order, others after
/// them by name) and averages each group.
pub fn summarize(evaluations: &[Evaluation]) -> CliResult<Vec<ModeSummary>> {
    let Some(first) = evaluations.first() else {
        return Ok(Vec::new());
    };
    for e in evaluations {
        if e.aus != first.aus {
            return Err(anyhow::anyhow!("evaluations over different AU sets: {:?} and {:?}", first.aus, e.aus).into());
        }
        if e.report.threshold != first.report.threshold {
            return Err(anyhow::anyhow!(
                "evaluations at different thresholds: {} and {}",
                first.report.threshold,
                e.report.threshold
            )
            .into());
        }
    }
    let mut modes: Vec<String> = TrainMode::ALL
        .iter()
        .map(|m| m.name().to_string())
        .filter(|m| evaluations.iter().any(|e| &e.mode == m))
        .collect();
    let others: BTreeSet<&String> = evaluations
        .iter()
        .map(|e| &e.mode)
        .filter(|m| m.parse::<TrainMode>().is_err())
        .collect();
    modes.extend(others.into_iter().cloned());
    Ok(modes
        .into_iter()
        .map(|mode| {
            let group: Vec<&Evaluation> = evaluations.iter().filter(|e| e.mode == mode).collect();
            let n = group.len() as f64;
            let per_au = (0..first.aus.len())
                .map(|i| group.iter().map(|e| e.report.per_au[i]).sum::<f64>() / n)
                .collect();
            ModeSummary {
                runs: group.len(),
                folds: group.iter().filter_map(|e| e.fold).collect(),
                seeds: group.iter().map(|e| e.seed).collect(),
                average: group.iter().map(|e| e.report.average).sum::<f64>() / n,
                per_au,
                mode,
            }
        })
        .collect())
}

/// Every metrics file under `root`, in path order.
pub fn collect_evaluations(root: &Path) -> CliResult<Vec<Evaluation>> {
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("scanning {}", root.display()))?;
        if entry.file_type().is_file() && entry.file_name() == METRICS_JSON {
            paths.push(entry.into_path());
        }
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        })
        .collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// The text `report` writes: the fold-averaged synthetic results, the
/// directional gaps between modes, and the published reference tables.
pub fn render_report(evaluations: &[Evaluation]) -> CliResult<String> {
    let summaries = summarize(evaluations)?;
    let mut text = String::new();
    if let Some(first) = evaluations.first() {
        let columns: Vec<MethodColumn> = summaries
            .iter()
            .map(|s| MethodColumn::from_fractions(&column_label(&s.mode), &s.per_au, s.average))
            .collect();
        text.push_str(&render_table(
            &format!("Synthetic data: F1 (%) averaged over folds, threshold {}", first.report.threshold),
            &first.aus,
            &columns,
        ));
        text.push('\n');
        for s in &summaries {
            text.push_str(&format!(
                "{}: {} evaluations, folds [{}], seeds [{}]\n",
                column_label(&s.mode),
                s.runs,
                join(&s.folds),
                join(&s.seeds)
            ));
        }
        let avg = |m: TrainMode| summaries.iter().find(|s| s.mode == m.name()).map(|s| s.average * 100.0);
        let gaps = [
            (TrainMode::Roi, TrainMode::Fvgg),
            (TrainMode::RoiLstm1, TrainMode::Roi),
            (TrainMode::RoiLstm3, TrainMode::RoiLstm1),
        ];
        let lines: Vec<String> = gaps
            .iter()
            .filter_map(|&(a, b)| Some(format!("{} - {}: {:+.1} points\n", a.label(), b.label(), avg(a)? - avg(b)?)))
            .collect();
        if !lines.is_empty() {
            text.push('\n');
            lines.iter().for_each(|l| text.push_str(l));
        }
    } else {
        text.push_str("No evaluations found.\n");
    }
    text.push('\n');
    text.push_str(&render_table(
        "Reference: published F1 (%) on BP4D",
        &BP4D_AUS,
        &bp4d_reference_columns(),
    ));
    text.push('\n');
    text.push_str(&render_table(
        "Reference: published F1 (%) on DISFA",
        &DISFA_AUS,
        &disfa_reference_columns(),
    ));
    Ok(text)
}

fn report(a: ReportArgs, out: &mut dyn Write) -> CliResult {
    if !a.runs.is_dir() {
        return Err(usage(format!("{} is not a directory", a.runs.display())));
    }
    writeln!(
        out,
        "config: {}",
        serde_json::json!({ "runs": a.runs.display().to_string(), "out": a.out.display().to_string() })
    )?;
    let evaluations = collect_evaluations(&a.runs)?;
    let text = render_report(&evaluations)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&a.out, &text).with_context(|| format!("writing {}", a.out.display()))?;
    write!(out, "{text}")?;
    Ok(())
}
