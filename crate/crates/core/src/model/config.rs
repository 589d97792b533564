use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::lstm::LstmStackConfig;
use crate::roi_geometry::{GridSize, ImageSize, RuleTable, DEFAULT_AUS, NUM_REGIONS};

/// Which prediction path the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Plain backbone, global average pooling, one hidden layer, sigmoid head.
    Fvgg,
    /// 20 ROI subnets concatenated into one global feature for all AUs.
    MultiLabel,
    /// One detector per AU over its (paired) linked regions.
    SingleAu,
}

/// One backbone stage: a same-padded convolution with ReLU, optionally
/// followed by 2x2 max pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub pool: bool,
}

fn default_kernel() -> usize {
    3
}

impl ConvStage {
    pub fn new(channels: usize, pool: bool) -> Self {
        ConvStage {
            channels,
            kernel: 3,
            pool,
        }
    }
}

/// Region-private subnet: `convs` channel-preserving same-padded
/// convolutions followed by a fully connected layer to `feature_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiSubnetConfig {
    pub convs: usize,
    pub kernel: usize,
    pub feature_len: usize,
}

impl Default for RoiSubnetConfig {
    fn default() -> Self {
        RoiSubnetConfig {
            convs: 2,
            kernel: 3,
            feature_len: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: ImageSize,
    pub in_channels: usize,
    pub backbone: Vec<ConvStage>,
    pub roi_window: usize,
    pub upsample_factor: usize,
    pub roi_subnet: RoiSubnetConfig,
    pub global_feature_len: usize,
    /// AU numbers predicted by the head, in output order.
    pub aus: Vec<u32>,
    pub mode: ModelMode,
    /// Gaussian std for weights; `None` scales by fan-in (`sqrt(2 / fan_in)`).
    pub init_std: Option<f64>,
    /// Rule-table text; `None` uses the shipped table.
    pub rule_table: Option<String>,
    /// LSTM stack over per-frame global features (multi-label mode only).
    pub temporal: Option<LstmStackConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// 40x40 grayscale input, three stages to a 32x5x5 map.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: ImageSize::square(40),
            in_channels: 1,
            backbone: vec![
                ConvStage::new(8, true),
                ConvStage::new(16, true),
                ConvStage::new(32, true),
            ],
            roi_window: 3,
            upsample_factor: 2,
            roi_subnet: RoiSubnetConfig::default(),
            global_feature_len: 128,
            aus: DEFAULT_AUS.to_vec(),
            mode: ModelMode::MultiLabel,
            init_std: None,
            rule_table: None,
            temporal: None,
        }
    }

    /// 224x224 RGB input through VGG16's first 12 convolutions (to conv5_2),
    /// giving a 512x14x14 map; 2048-long global feature.
    pub fn full_scale() -> Self {
        let widths = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512];
        let pools = [1, 3, 6, 9];
        ModelConfig {
            image_size: ImageSize::square(224),
            in_channels: 3,
            backbone: widths
                .iter()
                .enumerate()
                .map(|(i, &c)| ConvStage::new(c, pools.contains(&i)))
                .collect(),
            roi_subnet: RoiSubnetConfig {
                convs: 2,
                kernel: 3,
                feature_len: 102,
            },
            global_feature_len: 2048,
            init_std: Some(0.01),
            ..ModelConfig::desk()
        }
    }

    pub fn num_aus(&self) -> usize {
        self.aus.len()
    }

    /// Channels and spatial grid of the backbone output.
    pub fn feature_map(&self) -> (usize, GridSize) {
        let (mut h, mut w) = (self.image_size.height, self.image_size.width);
        for s in &self.backbone {
            if s.pool {
                h /= 2;
                w /= 2;
            }
        }
        let c = self.backbone.last().map_or(self.in_channels, |s| s.channels);
        (c, GridSize { rows: h, cols: w })
    }

    pub fn rules(&self) -> Result<RuleTable, ModelError> {
        Ok(match &self.rule_table {
            Some(text) => RuleTable::parse(text)?,
            None => RuleTable::default_v1(),
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.image_size.height == 0 || self.image_size.width == 0 || self.in_channels == 0 {
            return bad("image size and channel count must be positive".into());
        }
        if self.backbone.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        for (i, s) in self.backbone.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.kernel % 2 == 0 {
                return bad(format!("backbone stage {i}: channels must be positive and kernel odd"));
            }
        }
        let (_, grid) = self.feature_map();
        if self.roi_window == 0 || grid.rows < self.roi_window || grid.cols < self.roi_window {
            return bad(format!(
                "backbone output grid {}x{} is smaller than the {}-cell ROI window",
                grid.rows, grid.cols, self.roi_window
            ));
        }
        if self.upsample_factor == 0 {
            return bad("upsample_factor must be >= 1".into());
        }
        let r = &self.roi_subnet;
        if r.feature_len == 0 || r.kernel == 0 || r.kernel % 2 == 0 {
            return bad("ROI subnet feature_len must be positive and kernel odd".into());
        }
        if self.global_feature_len == 0 {
            return bad("global_feature_len must be positive".into());
        }
        if self.aus.is_empty() {
            return bad("at least one AU is required".into());
        }
        if let Some(init) = self.init_std {
            if !(init.is_finite() && init > 0.0) {
                return bad(format!("init_std must be positive, got {init}"));
            }
        }
        let rules = self.rules()?;
        if rules.rules().len() != NUM_REGIONS {
            return bad(format!(
                "rule table defines {} regions, the network has {NUM_REGIONS}",
                rules.rules().len()
            ));
        }
        if self.mode == ModelMode::SingleAu {
            rules.covers(&self.aus)?;
        }
        if let Some(t) = &self.temporal {
            t.validate()?;
            if self.mode != ModelMode::MultiLabel {
                return bad("a temporal stack needs the multi-label network".into());
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_grid_is_five_by_five() {
        let c = ModelConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.feature_map(), (32, GridSize { rows: 5, cols: 5 }));
    }

    #[test]
    fn full_scale_grid_is_512_by_14() {
        let c = ModelConfig::full_scale();
        c.validate().unwrap();
        assert_eq!(c.backbone.len(), 12);
        assert_eq!(c.feature_map(), (512, GridSize { rows: 14, cols: 14 }));
    }

    #[test]
    fn too_small_grid_rejected() {
        let mut c = ModelConfig::desk();
        c.image_size = ImageSize::square(16);
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn json_round_trip_and_digest() {
        let c = ModelConfig::desk();
        let json = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let mut d = c.clone();
        d.global_feature_len = 64;
        assert_ne!(d.digest(), c.digest());
        let partial: ModelConfig = serde_json::from_str(r#"{"global_feature_len": 64}"#).unwrap();
        assert_eq!(partial, d);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
