//! The static network: a convolutional backbone, 20 region-private ROI
//! subnets over cropped feature-map windows, and multi-label, single-AU and
//! temporal heads. Also the checkpoint format.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{extract_features, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{ConvStage, ModelConfig, ModelMode, RoiSubnetConfig};
pub use network::{
    backbone_forward, check_windows, concat_global_feature, detector_prefix, freeze_prefix, init_params,
    pair_symmetric, param_layout, predict_probs, region_prefix, roi_forward, AuModel, PIXEL_MEAN, FrameBatch, Init,
    ParamSpec, StaticOutput,
};

use crate::roi_geometry::GeometryError;
use crate::tensor_core::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected images of shape [N, {expected:?}], got {found:?}")]
    ImageShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("pixel values must lie in [0, 1], found {0}")]
    PixelRange(f64),
    #[error("expected {expected} crop windows per frame, got {found}")]
    WindowCount { expected: usize, found: usize },
    #[error("invalid crop window: {0}")]
    Window(String),
    #[error("AU {0} is not linked to any region")]
    NoLinkedRegion(u32),
    #[error("checkpoint config digest {found} does not match the expected config {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot freeze {k} stages of a {depth}-stage backbone")]
    FreezeRange { k: usize, depth: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi_geometry::{GridWindow, ImageSize, NUM_REGIONS};
    use crate::tensor_core::{Graph, Tensor};

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: ImageSize::square(12),
            backbone: vec![ConvStage::new(2, true), ConvStage::new(3, false)],
            roi_window: 3,
            roi_subnet: RoiSubnetConfig {
                convs: 1,
                kernel: 3,
                feature_len: 4,
            },
            global_feature_len: 6,
            ..ModelConfig::desk()
        }
    }

    fn windows(n: usize) -> Vec<Vec<GridWindow>> {
        (0..n)
            .map(|s| {
                (0..NUM_REGIONS)
                    .map(|r| {
                        let (a, b) = ((r + s) % 4, (r / 4) % 4);
                        GridWindow {
                            rows: (a, a + 2),
                            cols: (b, b + 2),
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn images(n: usize, c: &ModelConfig, fill: f64) -> Tensor {
        Tensor::full(vec![n, 1, c.image_size.height, c.image_size.width], fill)
    }

    #[test]
    fn desk_backbone_output_shape() {
        let cfg = ModelConfig::desk();
        let m = AuModel::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g);
        let x = g.constant(images(2, &cfg, 0.5));
        let map = backbone_forward(&mut g, &b, "", &cfg, x).unwrap();
        assert_eq!(g.shape(map), &[2, 32, 5, 5]);
    }

    #[test]
    fn mean_gray_image_with_zero_bias_gives_zero_map() {
        let cfg = tiny();
        let m = AuModel::new(cfg.clone(), 3).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g);
        let x = g.constant(images(1, &cfg, PIXEL_MEAN));
        let map = backbone_forward(&mut g, &b, "", &cfg, x).unwrap();
        assert!(g.data(map).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_size_and_range_rejected() {
        let cfg = tiny();
        let m = AuModel::new(cfg.clone(), 3).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![1, 1, 10, 12]));
        assert!(matches!(
            backbone_forward(&mut g, &b, "", &cfg, x),
            Err(ModelError::ImageShape { .. })
        ));
        let x = g.constant(images(1, &cfg, 1.5));
        assert!(matches!(
            backbone_forward(&mut g, &b, "", &cfg, x),
            Err(ModelError::PixelRange(_))
        ));
    }

    #[test]
    fn window_count_checked() {
        let cfg = tiny();
        let m = AuModel::new(cfg.clone(), 3).unwrap();
        let mut w = windows(1);
        w[0].pop();
        let batch = FrameBatch::new(images(1, &cfg, 0.3), w).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g);
        assert!(matches!(
            m.forward_static(&mut g, &b, &batch),
            Err(ModelError::WindowCount { expected: 20, found: 19 })
        ));
    }

    #[test]
    fn static_shapes_per_mode() {
        for mode in [ModelMode::Fvgg, ModelMode::MultiLabel, ModelMode::SingleAu] {
            let cfg = ModelConfig { mode, ..tiny() };
            let m = AuModel::new(cfg.clone(), 5).unwrap();
            let batch = FrameBatch::new(images(3, &cfg, 0.4), windows(3)).unwrap();
            let mut g = Graph::new();
            let b = m.params.bind(&mut g);
            let out = m.forward_static(&mut g, &b, &batch).unwrap();
            assert_eq!(g.shape(out.probs), &[3, 12]);
            assert!(g.data(out.probs).iter().all(|&p| p > 0.0 && p < 1.0));
            if mode != ModelMode::SingleAu {
                assert_eq!(g.shape(out.global.unwrap()), &[3, 6]);
            }
        }
    }

    #[test]
    fn fvgg_has_fewer_params_than_roi() {
        let roi = init_params(&ModelConfig::desk(), 0).unwrap();
        let fvgg = init_params(
            &ModelConfig {
                mode: ModelMode::Fvgg,
                ..ModelConfig::desk()
            },
            0,
        )
        .unwrap();
        assert!(fvgg.numel() < roi.numel());
    }

    #[test]
    fn roi_subnet_input_is_upsampled_crop() {
        // 512x3x3 crops become 512x6x6 before the region convolutions.
        let mut g = Graph::new();
        let map = g.constant(Tensor::full(vec![1, 512, 14, 14], 1.0));
        let crop = g.crop_windows(map, &[(4, 5)], 3).unwrap();
        let up = g.upsample_nearest(crop, 2).unwrap();
        assert_eq!(g.shape(up), &[1, 512, 6, 6]);
    }

    #[test]
    fn pair_symmetric_lengths() {
        let cfg = tiny();
        let rules = cfg.rules().unwrap();
        let mut g = Graph::new();
        let feats: Vec<(usize, _)> = (0..NUM_REGIONS)
            .map(|r| (r, g.constant(Tensor::full(vec![1, 4], r as f64))))
            .collect();
        let p12 = pair_symmetric(&mut g, &feats, 12, &rules).unwrap();
        assert_eq!(g.shape(p12), &[1, 8]);
        let p17 = pair_symmetric(&mut g, &feats, 17, &rules).unwrap();
        assert_eq!(g.shape(p17), &[1, 4]);
        assert!(matches!(
            pair_symmetric(&mut g, &feats, 9, &rules),
            Err(ModelError::NoLinkedRegion(9))
        ));
    }

    #[test]
    fn predict_probs_examples() {
        let mut params = crate::tensor_core::ParamSet::new();
        params.insert("head.weight", Tensor::zeros(vec![12, 5]));
        params.insert("head.bias", Tensor::zeros(vec![12]));
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let f = g.constant(Tensor::zeros(vec![1, 5]));
        let p = predict_probs(&mut g, &b, "head.", f).unwrap();
        assert!(g.data(p).iter().all(|&v| v == 0.5));

        let mut params = crate::tensor_core::ParamSet::new();
        params.insert("h.weight", Tensor::full(vec![1, 1], 1.0));
        params.insert("h.bias", Tensor::zeros(vec![1]));
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let f = g.constant(Tensor::full(vec![1, 1], 1.0));
        let p = predict_probs(&mut g, &b, "h.", f).unwrap();
        assert!((g.data(p)[0] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn freeze_prefix_ranges() {
        let cfg = tiny();
        let mut p = init_params(&cfg, 0).unwrap();
        assert!(freeze_prefix(&mut p, &cfg, 0).unwrap().is_empty());
        let all = freeze_prefix(&mut p, &cfg, 2).unwrap();
        assert_eq!(all.len(), 4);
        assert!(p.iter().filter(|(n, _)| n.starts_with("roi.")).all(|(_, t)| t.requires_grad));
        assert!(matches!(
            freeze_prefix(&mut p, &cfg, 3),
            Err(ModelError::FreezeRange { k: 3, depth: 2 })
        ));
        let sa = ModelConfig {
            mode: ModelMode::SingleAu,
            ..tiny()
        };
        let mut p = init_params(&sa, 0).unwrap();
        assert_eq!(freeze_prefix(&mut p, &sa, 1).unwrap().len(), 2 * 12);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = ModelConfig {
            temporal: Some(crate::lstm::LstmStackConfig {
                depth: 2,
                hidden_len: 5,
                ..Default::default()
            }),
            ..tiny()
        };
        let m = AuModel::new(cfg.clone(), 9).unwrap();
        let ck = Checkpoint::from_model(&m, "roi_lstm2", 42, "{}".into());
        let back = Checkpoint::read_from(&mut ck.to_bytes().as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap().params, m.params);

        let batch = FrameBatch::new(images(2, &cfg, 0.2), windows(2)).unwrap();
        let feats = extract_features(&ck, &cfg, &batch).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].len(), cfg.global_feature_len);
        let other = ModelConfig {
            global_feature_len: 7,
            ..cfg
        };
        assert!(matches!(
            extract_features(&ck, &other, &batch),
            Err(ModelError::ConfigMismatch { .. })
        ));

        let mut bytes = ck.to_bytes();
        bytes[9] ^= 1;
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
