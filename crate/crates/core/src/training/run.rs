use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sampling::{assemble_sequence_with, sample_balanced, sample_batch, SequenceSample};
use super::{
    sgd_momentum_step, LrSchedule, TemporalTraining, TrainConfig, TrainError, TrainMode, VelocityState,
};
use crate::data_synth::Dataset;
use crate::loss_metrics::{multilabel_loss_node, subject_kfold_split};
use crate::lstm::LstmStackConfig;
use crate::model::{
    detector_prefix, freeze_prefix, init_params, predict_probs, AuModel, Checkpoint, FrameBatch, ModelMode,
};
use crate::roi_geometry::GridWindow;
use crate::tensor_core::{BoundParams, Graph, NodeId, ParamSet, Tensor};

pub const LOSS_LOG: &str = "loss.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
/// Wall-clock figures live here, apart from the reproducible artifacts.
pub const TIMING_FILE: &str = "timing.txt";

/// Frames per forward pass when extracting features or predicting.
const CHUNK: usize = 32;

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub iterations: u64,
    /// Mean loss per label entry at the last iteration.
    pub final_loss: f64,
    /// Per-iteration mean losses, in log order.
    pub losses: Vec<f64>,
    /// Things skipped along the way (e.g. a detector without positives).
    pub notes: Vec<String>,
}

/// Training and held-out subjects for `fold` of a `folds`-way subject split
/// (`None`: every subject trains, none is held out).
pub fn fold_subjects(
    data: &Dataset,
    folds: usize,
    fold: Option<usize>,
    split_seed: u64,
) -> Result<(Vec<String>, Vec<String>), TrainError> {
    let ids = data.subject_ids();
    let Some(fold) = fold else {
        return Ok((ids, Vec::new()));
    };
    let split = subject_kfold_split(&ids, folds, split_seed)?;
    let (test, train): (Vec<String>, Vec<String>) = ids.into_iter().partition(|s| split.fold_of(s) == Some(fold));
    Ok((train, test))
}

/// Crop windows of every dataset frame under `model`'s geometry.
pub fn dataset_windows(model: &AuModel, data: &Dataset) -> Result<Vec<Vec<GridWindow>>, TrainError> {
    data.frames
        .iter()
        .map(|f| Ok(model.windows_for(&f.landmarks)?))
        .collect()
}

/// Image batch `[N, 1, H, W]` for dataset frames `idx`.
pub fn frame_batch(data: &Dataset, windows: &[Vec<GridWindow>], idx: &[usize]) -> Result<FrameBatch, TrainError> {
    let size = data.image_size();
    let mut pixels = Vec::with_capacity(idx.len() * size.width * size.height);
    for &i in idx {
        pixels.extend_from_slice(&data.frames[i].image);
    }
    let images = Tensor::new(vec![idx.len(), 1, size.height, size.width], pixels)?;
    Ok(FrameBatch::new(images, idx.iter().map(|&i| windows[i].clone()).collect())?)
}

/// Global features of the listed frames (indexed by dataset position).
pub fn frame_features(
    model: &AuModel,
    data: &Dataset,
    windows: &[Vec<GridWindow>],
    idx: &[usize],
) -> Result<Vec<Option<Vec<f64>>>, TrainError> {
    let mut out = vec![None; data.len()];
    for chunk in idx.chunks(CHUNK) {
        let feats = model.extract_features(&frame_batch(data, windows, chunk)?)?;
        for (&i, f) in chunk.iter().zip(feats) {
            out[i] = Some(f);
        }
    }
    Ok(out)
}

/// Per-step feature tensors `[N, G]` for a set of equally long sequences.
pub fn sequence_features(features: &[Option<Vec<f64>>], sequences: &[Vec<usize>]) -> Result<Vec<Tensor>, TrainError> {
    let steps = sequences.first().map_or(0, Vec::len);
    (0..steps)
        .map(|t| {
            let mut data = Vec::new();
            let mut len = 0;
            for s in sequences {
                let f = features[s[t]]
                    .as_ref()
                    .ok_or_else(|| TrainError::Config(format!("no feature for frame {}", s[t])))?;
                len = f.len();
                data.extend_from_slice(f);
            }
            Ok(Tensor::new(vec![sequences.len(), len], data)?)
        })
        .collect()
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::NoTrainingData("the dataset has no frames".into()));
    }
    let temporal = cfg.mode.lstm_depth().is_some() || (cfg.mode == TrainMode::Transfer && cfg.transfer_temporal);
    if temporal && (0..data.len()).all(|i| data.priors(i).is_empty()) {
        return Err(TrainError::Config(
            "temporal modes need sessions with more than one frame".into(),
        ));
    }
    Ok(())
}

/// What a built step hands back: the summed loss node, the bound leaves
/// and the number of label entries the loss sums over.
type Step = (NodeId, BoundParams, f64);

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    out: &'a Path,
    log: BufWriter<File>,
    iteration: u64,
    losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, out: &'a Path) -> Result<Self, TrainError> {
        let path = out.join(LOSS_LOG);
        let file = File::create(&path).map_err(|e| TrainError::io(&path, e))?;
        Ok(Trainer {
            cfg,
            out,
            log: BufWriter::new(file),
            iteration: 0,
            losses: Vec::new(),
        })
    }

    fn save(&mut self, model: &AuModel) -> Result<PathBuf, TrainError> {
        let path = self.out.join(CHECKPOINT_FILE);
        Checkpoint::from_model(model, self.cfg.mode.name(), self.iteration, self.cfg.to_json()).save(&path)?;
        Ok(path)
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        let path = self.out.join(LOSS_LOG);
        self.log.flush().map_err(|e| TrainError::io(&path, e))
    }

    /// Stops the run, keeping the parameters from before the failed step.
    fn diverge(&mut self, model: &AuModel, reason: String) -> TrainError {
        self.iteration -= 1;
        let flushed = self.flush();
        match (flushed, self.save(model)) {
            (Ok(()), Ok(checkpoint)) => TrainError::Diverged {
                iteration: self.iteration + 1,
                reason,
                checkpoint,
            },
            (Err(e), _) | (_, Err(e)) => e,
        }
    }

    /// `iterations` optimization steps over whatever parameters are
    /// trainable in `model`, each built by `build`.
    fn phase(
        &mut self,
        model: &mut AuModel,
        iterations: usize,
        mut build: impl FnMut(&mut Graph, &AuModel) -> Result<Step, TrainError>,
    ) -> Result<(), TrainError> {
        let mut velocity = VelocityState::new(&model.params);
        let mut schedule = LrSchedule::new(self.cfg.lr, self.cfg.lr_decay.clone());
        for _ in 0..iterations {
            self.iteration += 1;
            let mut g = Graph::new();
            let (loss, bound, entries) = build(&mut g, model)?;
            let mean = g.scalar(loss) / entries;
            if !mean.is_finite() {
                return Err(self.diverge(model, format!("loss is {mean}")));
            }
            let grads = g.backward(loss)?;
            drop(g);
            model.params.zero_grads();
            model.params.accumulate_grads(&bound, &grads);
            drop(grads);
            let lr = schedule.lr();
            if let Err(e) = sgd_momentum_step(&mut model.params, &mut velocity, lr, self.cfg.momentum) {
                return Err(self.diverge(model, e.to_string()));
            }
            writeln!(self.log, "{} {:.10} {}", self.iteration, mean, lr).map_err(|e| TrainError::io(LOSS_LOG, e))?;
            self.losses.push(mean);
            schedule.record(mean);
            if self.cfg.checkpoint_every > 0 && self.iteration % self.cfg.checkpoint_every as u64 == 0 {
                self.flush()?;
                self.save(model)?;
            }
        }
        Ok(())
    }
}

/// Builds batches for a fixed pool of frames, either resampling every
/// step or replaying the first batch.
struct Batches {
    rng: ChaCha8Rng,
    fixed: Option<Vec<usize>>,
    single: bool,
}

impl Batches {
    fn new(seed: u64, single: bool) -> Self {
        Batches {
            rng: ChaCha8Rng::seed_from_u64(seed),
            fixed: None,
            single,
        }
    }

    fn next(&mut self, draw: impl FnOnce(&mut ChaCha8Rng) -> Vec<usize>) -> Vec<usize> {
        if let Some(b) = &self.fixed {
            return b.clone();
        }
        let b = draw(&mut self.rng);
        if self.single {
            self.fixed = Some(b.clone());
        }
        b
    }
}

fn label_values(data: &Dataset, idx: &[usize]) -> Vec<f64> {
    data.labels(idx).to_f64()
}

/// Static multi-label (ROI or FVGG) training on images.
fn train_static(
    tr: &mut Trainer,
    model: &mut AuModel,
    data: &Dataset,
    windows: &[Vec<GridWindow>],
    train: &[usize],
    seed: u64,
) -> Result<(), TrainError> {
    let cfg = tr.cfg;
    let mut batches = Batches::new(seed, cfg.single_batch);
    let entries = (cfg.batch_size * model.config.num_aus()) as f64;
    tr.phase(model, cfg.max_iterations, |g, m| {
        let idx = batches.next(|rng| sample_batch(train, cfg.batch_size, rng));
        let batch = frame_batch(data, windows, &idx)?;
        let bound = m.params.bind(g);
        let out = m.forward_static(g, &bound, &batch)?;
        let loss = multilabel_loss_node(g, out.probs, &label_values(data, &idx))?;
        Ok((loss, bound, entries))
    })
}

/// One detector per AU on class-balanced batches.
fn train_single_au(
    tr: &mut Trainer,
    model: &mut AuModel,
    data: &Dataset,
    windows: &[Vec<GridWindow>],
    train: &[usize],
    notes: &mut Vec<String>,
) -> Result<(), TrainError> {
    let cfg = tr.cfg;
    for (a, &au) in model.config.aus.clone().iter().enumerate() {
        let (pos, neg): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| data.frames[i].labels[a] == 1);
        if pos.is_empty() || neg.is_empty() {
            notes.push(format!(
                "AU{au}: {} positive and {} negative training frames; detector left untrained",
                pos.len(),
                neg.len()
            ));
            continue;
        }
        let prefix = detector_prefix(au);
        let mut batches = Batches::new(cfg.seed ^ (0x5157 + a as u64), cfg.single_batch);
        tr.phase(model, cfg.max_iterations, |g, m| {
            let idx = batches.next(|rng| sample_balanced(&pos, &neg, cfg.batch_size, rng));
            let batch = frame_batch(data, windows, &idx)?;
            let bound = m.params.bind_prefix(g, &prefix);
            let probs = m.forward_detector(g, &bound, a, &batch)?;
            let labels: Vec<f64> = idx.iter().map(|&i| data.frames[i].labels[a] as f64).collect();
            let loss = multilabel_loss_node(g, probs, &labels)?;
            Ok((loss, bound, cfg.batch_size as f64))
        })?;
    }
    Ok(())
}

fn is_temporal_param(name: &str) -> bool {
    name.starts_with("lstm.") || name.starts_with("temporal_head.")
}

/// Summed loss over every step, scaled by `1 / steps`.
fn sequence_loss(g: &mut Graph, probs: &[NodeId], seqs: &[SequenceSample]) -> Result<NodeId, TrainError> {
    let mut total: Option<NodeId> = None;
    for (t, &p) in probs.iter().enumerate() {
        let labels: Vec<f64> = seqs
            .iter()
            .flat_map(|s| s.labels[t].iter().map(|&l| l as f64))
            .collect();
        let l = multilabel_loss_node(g, p, &labels)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| TrainError::Config("empty sequence".into()))?;
    Ok(g.affine(total, 1.0 / probs.len() as f64, 0.0))
}

/// LSTM + head on top of a trained, frozen feature network.
fn train_temporal(
    tr: &mut Trainer,
    model: &mut AuModel,
    data: &Dataset,
    windows: &[Vec<GridWindow>],
    train: &[usize],
) -> Result<(), TrainError> {
    let cfg = tr.cfg;
    let anchors: Vec<usize> = train.iter().copied().filter(|&i| !data.priors(i).is_empty()).collect();
    if anchors.is_empty() {
        return Err(TrainError::NoTrainingData("no training frame has an earlier frame".into()));
    }
    let seq_len = cfg.sequence_len;
    let entries = (cfg.batch_size * model.config.num_aus()) as f64;
    let mut batches = Batches::new(cfg.seed ^ 0x7e4f, cfg.single_batch);
    let mut seq_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e9);
    let mut fixed: Option<Vec<SequenceSample>> = None;
    let mut draw = move |data: &Dataset| -> Result<Vec<SequenceSample>, TrainError> {
        if let Some(f) = &fixed {
            return Ok(f.clone());
        }
        let idx = batches.next(|rng| sample_batch(&anchors, cfg.batch_size, rng));
        let seqs = idx
            .iter()
            .map(|&a| assemble_sequence_with(data, a, seq_len, &mut seq_rng))
            .collect::<Result<Vec<_>, _>>()?;
        if cfg.single_batch {
            fixed = Some(seqs.clone());
        }
        Ok(seqs)
    };
    match cfg.temporal_training {
        TemporalTraining::FrozenFeatures => {
            for (name, t) in model.params.iter_mut() {
                t.requires_grad = is_temporal_param(name);
            }
            let features = frame_features(model, data, windows, train)?;
            tr.phase(model, cfg.max_iterations, |g, m| {
                let seqs = draw(data)?;
                let frames: Vec<Vec<usize>> = seqs.iter().map(|s| s.frames.clone()).collect();
                let bound = m.params.bind_where(g, is_temporal_param);
                let steps: Vec<NodeId> = sequence_features(&features, &frames)?
                    .into_iter()
                    .map(|t| g.constant(t))
                    .collect();
                let probs = m.forward_temporal(g, &bound, &steps)?;
                let loss = sequence_loss(g, &probs, &seqs)?;
                Ok((loss, bound, entries))
            })
        }
        TemporalTraining::EndToEnd => {
            model.params.set_trainable(true);
            freeze_prefix(&mut model.params, &model.config, cfg.freeze_stages)?;
            tr.phase(model, cfg.max_iterations, |g, m| {
                let seqs = draw(data)?;
                // time-major: step t of every sequence, then step t + 1
                let idx: Vec<usize> = (0..seq_len)
                    .flat_map(|t| seqs.iter().map(move |s| s.frames[t]))
                    .collect();
                let batch = frame_batch(data, windows, &idx)?;
                let bound = m.params.bind(g);
                let probs = m.forward_sequences(g, &bound, &batch, seq_len)?;
                let loss = sequence_loss(g, &probs, &seqs)?;
                Ok((loss, bound, entries))
            })
        }
    }
}

/// Linear head on frozen features (transfer mode, static).
fn train_head(
    tr: &mut Trainer,
    model: &mut AuModel,
    data: &Dataset,
    windows: &[Vec<GridWindow>],
    train: &[usize],
) -> Result<(), TrainError> {
    let cfg = tr.cfg;
    for (name, t) in model.params.iter_mut() {
        t.requires_grad = name.starts_with("head.");
    }
    let features = frame_features(model, data, windows, train)?;
    let entries = (cfg.batch_size * model.config.num_aus()) as f64;
    let mut batches = Batches::new(cfg.seed ^ 0x4ead, cfg.single_batch);
    tr.phase(model, cfg.max_iterations, |g, m| {
        let idx = batches.next(|rng| sample_batch(train, cfg.batch_size, rng));
        // N one-step sequences give a single [N, G] block
        let rows: Vec<Vec<usize>> = idx.iter().map(|&i| vec![i]).collect();
        let x = sequence_features(&features, &rows)?.remove(0);
        let xs = g.constant(x);
        let bound = m.params.bind_prefix(g, "head.");
        let probs = predict_probs(g, &bound, "head.", xs)?;
        let loss = multilabel_loss_node(g, probs, &label_values(data, &idx))?;
        Ok((loss, bound, entries))
    })
}

/// Copies every parameter of `source` whose name and shape fit `config`,
/// drawing the rest from a fresh initialization.
fn graft(source: &ParamSet, config: crate::model::ModelConfig, seed: u64, fresh_prefixes: &[&str]) -> Result<AuModel, TrainError> {
    let fresh = init_params(&config, seed)?;
    let mut params = ParamSet::new();
    for (name, t) in fresh.iter() {
        let keep_fresh = fresh_prefixes.iter().any(|p| name.starts_with(p));
        match source.get(name) {
            Ok(s) if !keep_fresh && s.shape() == t.shape() => params.insert(name, s.clone().with_grad(true)),
            _ => params.insert(name, t.clone()),
        }
    }
    Ok(AuModel::from_params(config, params)?)
}

fn with_temporal(base: &AuModel, stack: LstmStackConfig, seed: u64) -> Result<AuModel, TrainError> {
    let mut config = base.config.clone();
    config.temporal = Some(stack);
    graft(&base.params, config, seed, &["lstm.", "temporal_head."])
}

fn load_checkpoint(path: &str) -> Result<Checkpoint, TrainError> {
    Ok(Checkpoint::load(Path::new(path))?)
}

/// Runs one configured training job on `data`, writing the resolved config,
/// the per-iteration loss log and the final checkpoint into `out_dir`.
pub fn train_run(cfg: &TrainConfig, data: &Dataset, out_dir: &Path) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_json() + "\n").map_err(|e| TrainError::io(&config_path, e))?;
    let started = Instant::now();

    let (train_subjects, _) = fold_subjects(data, cfg.folds, cfg.fold, cfg.split_seed)?;
    let train = data.indices_for(&train_subjects);
    if train.is_empty() {
        return Err(TrainError::NoTrainingData("no frames in the training folds".into()));
    }
    let static_config = cfg.static_model(data);
    let mut tr = Trainer::new(cfg, out_dir)?;
    let mut notes = Vec::new();

    let model = match cfg.mode {
        TrainMode::Fvgg | TrainMode::Roi | TrainMode::SingleAu => {
            let mut model = AuModel::new(static_config, cfg.seed)?;
            freeze_prefix(&mut model.params, &model.config, cfg.freeze_stages)?;
            let windows = dataset_windows(&model, data)?;
            if cfg.mode == TrainMode::SingleAu {
                model.rules.covers(&model.config.aus)?;
                train_single_au(&mut tr, &mut model, data, &windows, &train, &mut notes)?;
            } else {
                train_static(&mut tr, &mut model, data, &windows, &train, cfg.seed)?;
            }
            model
        }
        TrainMode::RoiLstm1 | TrainMode::RoiLstm2 | TrainMode::RoiLstm3 => {
            let base = match &cfg.init_checkpoint {
                Some(path) => {
                    let ck = load_checkpoint(path)?;
                    let (found, expected) = (ck.digest(), static_config.digest());
                    if found != expected {
                        return Err(crate::model::ModelError::ConfigMismatch { expected, found }.into());
                    }
                    ck.to_model()?
                }
                None => {
                    let mut model = AuModel::new(static_config, cfg.seed)?;
                    freeze_prefix(&mut model.params, &model.config, cfg.freeze_stages)?;
                    let windows = dataset_windows(&model, data)?;
                    train_static(&mut tr, &mut model, data, &windows, &train, cfg.seed)?;
                    model
                }
            };
            let stack = cfg.temporal_stack().expect("temporal mode");
            let mut model = with_temporal(&base, stack, cfg.seed ^ 0x1f5d)?;
            let windows = dataset_windows(&model, data)?;
            train_temporal(&mut tr, &mut model, data, &windows, &train)?;
            model
        }
        TrainMode::Transfer => {
            let ck = load_checkpoint(cfg.init_checkpoint.as_deref().expect("validated"))?;
            if ck.model.mode != ModelMode::MultiLabel {
                return Err(TrainError::Config(format!(
                    "transfer needs a multi-label source network, got a {} checkpoint",
                    ck.mode
                )));
            }
            if ck.model.image_size != data.image_size() || ck.model.in_channels != 1 {
                return Err(TrainError::Config("source network input does not match the dataset images".into()));
            }
            let mut config = ck.model.clone();
            config.aus = data.aus().to_vec();
            config.temporal = cfg.temporal_stack();
            let mut model = graft(&ck.params, config, cfg.seed, &["head.", "lstm.", "temporal_head."])?;
            let windows = dataset_windows(&model, data)?;
            if cfg.transfer_temporal {
                train_temporal(&mut tr, &mut model, data, &windows, &train)?;
            } else {
                train_head(&mut tr, &mut model, data, &windows, &train)?;
            }
            model
        }
    };

    tr.flush()?;
    let checkpoint = tr.save(&model)?;
    let timing_path = out_dir.join(TIMING_FILE);
    fs::write(
        &timing_path,
        format!("wall_seconds {:.3}\n", started.elapsed().as_secs_f64()),
    )
    .map_err(|e| TrainError::io(&timing_path, e))?;
    Ok(TrainSummary {
        checkpoint,
        iterations: tr.iteration,
        final_loss: tr.losses.last().copied().unwrap_or(f64::NAN),
        losses: tr.losses,
        notes,
    })
}
