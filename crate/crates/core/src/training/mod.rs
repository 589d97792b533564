//! SGD with momentum, batch and sequence assembly, the learning-rate
//! schedule, and the train/evaluate loops for every mode.

mod config;
mod eval;
mod gradsuite;
mod optim;
mod run;
mod sampling;

use std::path::{Path, PathBuf};

pub use config::{LrDecay, TemporalTraining, TrainConfig, TrainMode};
pub use gradsuite::{
    gradient_suite, render_grad_table, tiny_temporal_config, GradRow, GRAD_EPS, GRAD_TOLERANCE,
};
pub use eval::{evaluate_frames, predict_frames, Evaluation};
pub use optim::{sgd_momentum_step, LrSchedule, VelocityState};
pub use run::{
    dataset_windows, fold_subjects, frame_batch, frame_features, sequence_features, train_run, TrainSummary,
    CHECKPOINT_FILE, CONFIG_FILE, LOSS_LOG, TIMING_FILE,
};
pub use sampling::{
    assemble_sequence, assemble_sequence_with, evaluation_windows, sample_balanced, sample_batch, SequenceSample,
};

use crate::data_synth::DataError;
use crate::loss_metrics::MetricsError;
use crate::model::ModelError;
use crate::roi_geometry::GeometryError;
use crate::tensor_core::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("frame {frame} has no earlier frame in its session")]
    NoPriors { frame: usize },
    #[error("non-finite gradient for {param} at element {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("training diverged at iteration {iteration} ({reason}); last good parameters saved to {}", checkpoint.display())]
    Diverged {
        iteration: u64,
        reason: String,
        checkpoint: PathBuf,
    },
    #[error("nothing to train on: {0}")]
    NoTrainingData(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{synthesize, Dataset, SynthConfig};
    use crate::tensor_core::{ParamSet, Tensor};

    fn scalar_params(p: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut t = Tensor::scalar(p).with_grad(true);
        t.grad = Some(vec![g]);
        ps.insert("p", t);
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = scalar_params(1.5, 0.0);
        let mut v = VelocityState::new(&ps);
        sgd_momentum_step(&mut ps, &mut v, 0.1, 0.9).unwrap();
        assert_eq!(ps.get("p").unwrap().data(), &[1.5]);
    }

    #[test]
    fn momentum_steps_accumulate() {
        let mut ps = scalar_params(1.0, 1.0);
        let mut v = VelocityState::new(&ps);
        sgd_momentum_step(&mut ps, &mut v, 0.1, 0.9).unwrap();
        assert!((v.get("p").unwrap()[0] + 0.1).abs() < 1e-15);
        assert!((ps.get("p").unwrap().data()[0] - 0.9).abs() < 1e-15);
        sgd_momentum_step(&mut ps, &mut v, 0.1, 0.9).unwrap();
        assert!((v.get("p").unwrap()[0] + 0.19).abs() < 1e-15);
        assert!((ps.get("p").unwrap().data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_have_no_velocity_and_do_not_move() {
        let mut ps = scalar_params(1.0, 1.0);
        let mut frozen = Tensor::scalar(2.0);
        frozen.grad = Some(vec![5.0]);
        ps.insert("frozen", frozen);
        let mut v = VelocityState::new(&ps);
        assert_eq!(v.len(), 1);
        sgd_momentum_step(&mut ps, &mut v, 0.1, 0.9).unwrap();
        assert_eq!(ps.get("frozen").unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_the_whole_step() {
        let mut ps = scalar_params(1.0, 1.0);
        let mut bad = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap().with_grad(true);
        bad.grad = Some(vec![0.0, f64::NAN]);
        ps.insert("bad", bad);
        let mut v = VelocityState::new(&ps);
        let err = sgd_momentum_step(&mut ps, &mut v, 0.1, 0.9).unwrap_err();
        match err {
            TrainError::NonFiniteGradient { param, index } => assert_eq!((param.as_str(), index), ("bad", 1)),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(ps.get("p").unwrap().data(), &[1.0]);
    }

    #[test]
    fn schedule_halves_on_stagnation() {
        let decay = LrDecay {
            patience: 2,
            factor: 0.5,
            min_improvement: 0.01,
        };
        let mut s = LrSchedule::new(0.1, decay);
        for loss in [1.0, 1.0, 0.5, 0.5] {
            assert!(!s.record(loss));
        }
        assert_eq!(s.lr(), 0.1);
        s.record(0.499);
        assert!(s.record(0.499));
        assert_eq!(s.lr(), 0.05);
    }

    fn dataset(frames: usize) -> Dataset {
        let cfg = SynthConfig {
            subjects: 2,
            sessions: 1,
            frames,
            ..Default::default()
        };
        Dataset::from_synth(&cfg, synthesize(&cfg, 3).unwrap()).unwrap()
    }

    #[test]
    fn sequences_follow_the_sampling_rules() {
        let data = dataset(40);
        // exactly 23 priors: forced selection
        let s = assemble_sequence(&data, 23, 24, 1).unwrap();
        assert_eq!(s.frames, (0..24).collect::<Vec<_>>());
        // 5 priors: 18 copies of the earliest, the priors, the anchor
        let s = assemble_sequence(&data, 5, 24, 1).unwrap();
        let mut want = vec![0; 18];
        want.extend(0..6);
        assert_eq!(s.frames, want);
        // many priors: sorted, distinct, repeatable, same subject
        let s = assemble_sequence(&data, 39, 24, 9).unwrap();
        assert_eq!(s, assemble_sequence(&data, 39, 24, 9).unwrap());
        assert!(s.frames[..23].windows(2).all(|w| w[0] < w[1]));
        assert!(s.frames[..23].iter().all(|&f| f < 39));
        assert_eq!(s.anchor(), 39);
        assert_eq!(s.labels[23], data.frames[39].labels);
        // second subject starts its own session
        assert!(matches!(
            assemble_sequence(&data, 40, 24, 1),
            Err(TrainError::NoPriors { frame: 40 })
        ));
        let s = assemble_sequence(&data, 45, 24, 1).unwrap();
        assert!(s.frames.iter().all(|&f| (40..=45).contains(&f)));
        assert_eq!(s.subject, data.frames[45].subject);
    }

    #[test]
    fn evaluation_windows_cover_each_frame_once() {
        let data = dataset(30);
        let all: Vec<usize> = (0..data.len()).collect();
        let wins = evaluation_windows(&data, &all, 24);
        let mut seen = vec![0; data.len()];
        for (frames, scored) in &wins {
            assert_eq!(frames.len(), 24);
            assert!(frames.windows(2).all(|w| w[0] <= w[1]));
            let subject = &data.frames[frames[0]].subject;
            assert!(frames.iter().all(|&f| &data.frames[f].subject == subject));
            for &t in scored {
                seen[frames[t]] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn balanced_batches_split_evenly() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = sample_balanced(&[1, 2], &[7, 8, 9], 8, &mut rng);
        assert!(b[..4].iter().all(|i| [1, 2].contains(i)));
        assert!(b[4..].iter().all(|i| [7, 8, 9].contains(i)));
    }

    #[test]
    fn config_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { fold: Some(3), ..ok.clone() },
            TrainConfig { mode: TrainMode::Transfer, ..ok.clone() },
            TrainConfig { mode: TrainMode::SingleAu, batch_size: 7, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let json = ok.to_json();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), ok);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
        assert_eq!("roi_lstm2".parse::<TrainMode>().unwrap(), TrainMode::RoiLstm2);
    }
}
