use serde::{Deserialize, Serialize};

use super::run::{dataset_windows, frame_batch, frame_features, sequence_features};
use super::sampling::evaluation_windows;
use super::TrainError;
use crate::data_synth::Dataset;
use crate::loss_metrics::{f1_per_label, F1Report, LabelMatrix, ProbMatrix};
use crate::model::AuModel;

/// Sequences per temporal forward pass.
const SEQ_CHUNK: usize = 32;
/// Frames per static forward pass.
const FRAME_CHUNK: usize = 32;

/// Scored predictions of one checkpoint on one set of frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: String,
    pub fold: Option<usize>,
    pub seed: u64,
    pub aus: Vec<u32>,
    pub frames: usize,
    pub report: F1Report,
}

/// Probabilities `[len(indices), A]` in the order of `indices`. Temporal
/// models run over consecutive windows of each session and every window
/// output is scored, so each frame gets exactly one prediction.
pub fn predict_frames(model: &AuModel, data: &Dataset, indices: &[usize]) -> Result<ProbMatrix, TrainError> {
    if model.config.aus != data.aus() {
        return Err(TrainError::Config(format!(
            "model predicts AUs {:?}, dataset labels {:?}",
            model.config.aus,
            data.aus()
        )));
    }
    if model.config.image_size != data.image_size() {
        return Err(TrainError::Config("model input size differs from the dataset images".into()));
    }
    let a = model.config.num_aus();
    let windows = dataset_windows(model, data)?;
    let mut out = vec![0.0; indices.len() * a];
    match &model.config.temporal {
        None => {
            for (c, chunk) in indices.chunks(FRAME_CHUNK).enumerate() {
                let probs = model.predict(&frame_batch(data, &windows, chunk)?)?;
                out[c * FRAME_CHUNK * a..][..probs.len()].copy_from_slice(&probs);
            }
        }
        Some(stack) => {
            let mut row_of = vec![usize::MAX; data.len()];
            for (r, &i) in indices.iter().enumerate() {
                row_of[i] = r;
            }
            let features = frame_features(model, data, &windows, indices)?;
            let wins = evaluation_windows(data, indices, stack.sequence_len);
            for chunk in wins.chunks(SEQ_CHUNK) {
                let seqs: Vec<Vec<usize>> = chunk.iter().map(|(f, _)| f.clone()).collect();
                let steps = model.predict_temporal(&sequence_features(&features, &seqs)?)?;
                for (n, (frames, scored)) in chunk.iter().enumerate() {
                    for &t in scored {
                        let r = row_of[frames[t]];
                        out[r * a..(r + 1) * a].copy_from_slice(&steps[t][n * a..(n + 1) * a]);
                    }
                }
            }
        }
    }
    Ok(ProbMatrix::new(indices.len(), a, out)?)
}

/// Per-AU F1 of `model` on the frames `indices` at `threshold`.
pub fn evaluate_frames(
    model: &AuModel,
    data: &Dataset,
    indices: &[usize],
    threshold: f64,
) -> Result<(F1Report, ProbMatrix, LabelMatrix), TrainError> {
    if indices.is_empty() {
        return Err(TrainError::NoTrainingData("no frames to evaluate".into()));
    }
    let probs = predict_frames(model, data, indices)?;
    let labels = data.labels(indices);
    let report = f1_per_label(&probs, &labels, threshold)?;
    Ok((report, probs, labels))
}
