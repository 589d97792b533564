use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data_synth::Dataset;
use crate::lstm::LstmStackConfig;
use crate::model::{ModelConfig, ModelMode};

/// What a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Plain backbone, global pooling and a replaced prediction layer.
    Fvgg,
    /// Backbone + 20 ROI nets + multi-label head.
    Roi,
    /// One independent detector per AU on its paired region features.
    SingleAu,
    /// ROI features fused over 24-frame sequences by an LSTM stack of depth 1..3.
    RoiLstm1,
    RoiLstm2,
    RoiLstm3,
    /// Frozen source network, fresh head (or one-layer LSTM + head) on its features.
    Transfer,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::Fvgg,
        TrainMode::Roi,
        TrainMode::SingleAu,
        TrainMode::RoiLstm1,
        TrainMode::RoiLstm2,
        TrainMode::RoiLstm3,
        TrainMode::Transfer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Fvgg => "fvgg",
            TrainMode::Roi => "roi",
            TrainMode::SingleAu => "single_au",
            TrainMode::RoiLstm1 => "roi_lstm1",
            TrainMode::RoiLstm2 => "roi_lstm2",
            TrainMode::RoiLstm3 => "roi_lstm3",
            TrainMode::Transfer => "transfer",
        }
    }

    /// Column label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Fvgg => "FVGG",
            TrainMode::Roi => "ROI",
            TrainMode::SingleAu => "single-AU",
            TrainMode::RoiLstm1 => "R-T1",
            TrainMode::RoiLstm2 => "R-T2",
            TrainMode::RoiLstm3 => "R-T3",
            TrainMode::Transfer => "transfer",
        }
    }

    /// LSTM depth for the ROI+LSTM modes.
    pub fn lstm_depth(self) -> Option<usize> {
        match self {
            TrainMode::RoiLstm1 => Some(1),
            TrainMode::RoiLstm2 => Some(2),
            TrainMode::RoiLstm3 => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown mode `{s}`")))
    }
}

/// Multiply the learning rate by `factor` whenever the mean loss of the
/// latest `patience` iterations improves on the previous window by less
/// than `min_improvement` (relative). `patience = 0` disables decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrDecay {
    pub patience: usize,
    pub factor: f64,
    pub min_improvement: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay {
            patience: 200,
            factor: 0.5,
            min_improvement: 0.01,
        }
    }
}

/// How temporal modes train the LSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalTraining {
    /// The CNN is frozen and the LSTM + head train on precomputed features.
    FrozenFeatures,
    /// Gradients flow through the LSTM into the CNN (24x the frames per step).
    EndToEnd,
}

/// Everything a training run needs. Loaded from a JSON file; missing keys
/// take their defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Iterations per optimization phase (per detector in single-AU mode).
    pub max_iterations: usize,
    /// Leading backbone convolutions kept at their initial values.
    pub freeze_stages: usize,
    pub seed: u64,
    pub lr_decay: LrDecay,
    pub sequence_len: usize,
    /// Write `checkpoint.bin` every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Held-out fold; `None` trains on every subject.
    pub fold: Option<usize>,
    pub folds: usize,
    /// Seed of the subject-to-fold assignment (kept apart from `seed` so
    /// that runs with different seeds share their folds).
    pub split_seed: u64,
    /// Reuse the first sampled batch for every iteration (overfit check).
    pub single_batch: bool,
    /// Trained network to start from: the ROI model for temporal modes (when
    /// absent it is trained first within the run), the source for transfer.
    pub init_checkpoint: Option<String>,
    /// Transfer mode: fit a one-layer LSTM + head instead of a linear head.
    pub transfer_temporal: bool,
    pub temporal_training: TemporalTraining,
    /// LSTM width and initialization; depth comes from the mode.
    pub lstm: LstmStackConfig,
    /// Network shape; AU list and image size are taken from the dataset and
    /// the mode field is set from `mode`.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Roi,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 8,
            max_iterations: 500,
            freeze_stages: 0,
            seed: 0,
            lr_decay: LrDecay::default(),
            sequence_len: 24,
            checkpoint_every: 0,
            fold: Some(0),
            folds: 3,
            split_seed: 0,
            single_batch: false,
            init_checkpoint: None,
            transfer_temporal: false,
            temporal_training: TemporalTraining::FrozenFeatures,
            lstm: LstmStackConfig::default(),
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.mode == TrainMode::SingleAu && self.batch_size % 2 != 0 {
            return bad("single_au batches are class-balanced and need an even batch_size".into());
        }
        if self.sequence_len == 0 {
            return bad("sequence_len must be positive".into());
        }
        if !(self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0) {
            return bad(format!("lr_decay.factor must be in (0, 1], got {}", self.lr_decay.factor));
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        if let Some(f) = self.fold {
            if f >= self.folds {
                return bad(format!("fold {f} out of range for {} folds", self.folds));
            }
        }
        if self.mode == TrainMode::Transfer && self.init_checkpoint.is_none() {
            return bad("transfer mode needs init_checkpoint (the source network)".into());
        }
        Ok(())
    }

    /// Static network configuration for this run on `data`.
    pub fn static_model(&self, data: &Dataset) -> ModelConfig {
        let mut m = self.model.clone();
        m.aus = data.aus().to_vec();
        m.image_size = data.image_size();
        m.in_channels = 1;
        m.temporal = None;
        m.mode = match self.mode {
            TrainMode::Fvgg => ModelMode::Fvgg,
            TrainMode::SingleAu => ModelMode::SingleAu,
            _ => ModelMode::MultiLabel,
        };
        m
    }

    /// The LSTM stack trained by this run, if any.
    pub fn temporal_stack(&self) -> Option<LstmStackConfig> {
        let depth = match self.mode {
            TrainMode::Transfer if self.transfer_temporal => 1,
            m => m.lstm_depth()?,
        };
        Some(LstmStackConfig {
            depth,
            sequence_len: self.sequence_len,
            ..self.lstm.clone()
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("train config serializes")
    }
}
