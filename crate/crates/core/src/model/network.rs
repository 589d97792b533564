use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, ModelMode};
use crate::lstm::{self, LstmLayerNodes};
use crate::roi_geometry::{frame_windows, GridSize, GridWindow, LandmarkSet, RuleTable, NUM_REGIONS};
use crate::tensor_core::{BoundParams, Graph, NodeId, ParamSet, Tensor};

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with this std.
    Gaussian(f64),
    Constant(f64),
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub fn region_prefix(region: usize) -> String {
    format!("roi.r{region:02}.")
}

/// Prefix of the single-AU detector for `au`.
pub fn detector_prefix(au: u32) -> String {
    format!("au{au:02}.")
}

struct Layout<'a> {
    config: &'a ModelConfig,
    specs: Vec<ParamSpec>,
}

impl Layout<'_> {
    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize) {
        let std = self.config.init_std.unwrap_or((2.0 / fan_in as f64).sqrt());
        self.specs.push(ParamSpec {
            name,
            shape,
            init: Init::Gaussian(std),
        });
    }

    fn bias(&mut self, name: String, len: usize, value: f64) {
        self.specs.push(ParamSpec {
            name,
            shape: vec![len],
            init: Init::Constant(value),
        });
    }

    fn fc(&mut self, prefix: &str, inputs: usize, outputs: usize) {
        self.weight(format!("{prefix}weight"), vec![outputs, inputs], inputs);
        self.bias(format!("{prefix}bias"), outputs, 0.0);
    }

    fn backbone(&mut self, prefix: &str) {
        let mut c_in = self.config.in_channels;
        for (i, s) in self.config.backbone.iter().enumerate() {
            let fan_in = c_in * s.kernel * s.kernel;
            self.weight(
                format!("{prefix}backbone.conv{i}.weight"),
                vec![s.channels, c_in, s.kernel, s.kernel],
                fan_in,
            );
            self.bias(format!("{prefix}backbone.conv{i}.bias"), s.channels, 0.0);
            c_in = s.channels;
        }
    }

    fn roi_subnet(&mut self, prefix: &str, region: usize) {
        let (c, _) = self.config.feature_map();
        let r = &self.config.roi_subnet;
        let (k, d) = (r.kernel, r.feature_len);
        let p = format!("{prefix}{}", region_prefix(region));
        for j in 0..r.convs {
            self.weight(format!("{p}conv{j}.weight"), vec![c, c, k, k], c * k * k);
            self.bias(format!("{p}conv{j}.bias"), c, 0.0);
        }
        let side = self.config.roi_window * self.config.upsample_factor;
        self.fc(&format!("{p}fc."), c * side * side, d);
    }
}

/// Every parameter of the configured network, in a fixed order.
pub fn param_layout(config: &ModelConfig) -> Result<Vec<ParamSpec>, ModelError> {
    config.validate()?;
    let rules = config.rules()?;
    let mut l = Layout {
        config,
        specs: Vec::new(),
    };
    let (c, _) = config.feature_map();
    let (d, g, a) = (config.roi_subnet.feature_len, config.global_feature_len, config.num_aus());
    match config.mode {
        ModelMode::Fvgg => {
            l.backbone("");
            l.fc("fvgg.fc.", c, g);
            l.fc("head.", g, a);
        }
        ModelMode::MultiLabel => {
            l.backbone("");
            for r in 0..NUM_REGIONS {
                l.roi_subnet("", r);
            }
            l.fc("global.fc.", NUM_REGIONS * d, g);
            l.fc("head.", g, a);
        }
        ModelMode::SingleAu => {
            for &au in &config.aus {
                let p = detector_prefix(au);
                l.backbone(&p);
                let regions = rules.regions_for_au(au);
                for &r in &regions {
                    l.roi_subnet(&p, r);
                }
                l.fc(&format!("{p}head."), regions.len() * d, 1);
            }
        }
    }
    if let Some(t) = &config.temporal {
        for layer in 0..t.depth {
            let input = if layer == 0 { g } else { t.hidden_len };
            let prefix = lstm::layer_prefix(layer);
            for gate in ["f", "i", "c", "o"] {
                l.specs.push(ParamSpec {
                    name: format!("{prefix}W{gate}"),
                    shape: vec![t.hidden_len, t.hidden_len + input],
                    init: Init::Gaussian(t.init_std),
                });
                let b = if gate == "f" { t.forget_bias } else { 0.0 };
                l.bias(format!("{prefix}b{gate}"), t.hidden_len, b);
            }
        }
        l.fc("temporal_head.", t.hidden_len, a);
    }
    Ok(l.specs)
}

/// Fresh trainable parameters drawn from a ChaCha8 stream seeded with `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for spec in param_layout(config)? {
        let t = match spec.init {
            Init::Gaussian(std) => Tensor::randn(spec.shape, std, &mut rng),
            Init::Constant(v) => Tensor::full(spec.shape, v),
        };
        params.insert(spec.name, t.with_grad(true));
    }
    Ok(params)
}

/// Images `[N, C, H, W]` in `[0, 1]` plus each frame's 20 crop windows.
#[derive(Clone, Debug)]
pub struct FrameBatch {
    pub images: Tensor,
    pub windows: Vec<Vec<GridWindow>>,
}

impl FrameBatch {
    pub fn new(images: Tensor, windows: Vec<Vec<GridWindow>>) -> Result<Self, ModelError> {
        if images.rank() != 4 || images.shape()[0] != windows.len() {
            return Err(ModelError::Config(format!(
                "batch of images {:?} with {} window sets",
                images.shape(),
                windows.len()
            )));
        }
        Ok(FrameBatch { images, windows })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Output of the static network on one batch.
#[derive(Clone, Copy, Debug)]
pub struct StaticOutput {
    /// `[N, global_feature_len]`; absent in single-AU mode.
    pub global: Option<NodeId>,
    /// `[N, num_aus]` probabilities.
    pub probs: NodeId,
}

fn check_images(config: &ModelConfig, g: &Graph, images: NodeId) -> Result<(), ModelError> {
    let s = g.shape(images);
    let expected = [config.in_channels, config.image_size.height, config.image_size.width];
    if s.len() != 4 || s[1..] != expected {
        return Err(ModelError::ImageShape {
            expected: expected.to_vec(),
            found: s.to_vec(),
        });
    }
    if let Some(&v) = g.data(images).iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ModelError::PixelRange(v));
    }
    Ok(())
}

/// Conv stages over `[N, C, H, W]` images, giving `[N, C', h, w]`.
pub fn backbone_forward(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    config: &ModelConfig,
    images: NodeId,
) -> Result<NodeId, ModelError> {
    check_images(config, g, images)?;
    let mut x = g.affine(images, 1.0, -PIXEL_MEAN);
    for (i, s) in config.backbone.iter().enumerate() {
        let w = bound.get(&format!("{prefix}backbone.conv{i}.weight"))?;
        let b = bound.get(&format!("{prefix}backbone.conv{i}.bias"))?;
        x = g.conv2d(x, w, 1, s.kernel / 2)?;
        x = g.channel_bias(x, b)?;
        x = g.relu(x);
        if s.pool {
            x = g.max_pool2d(x, 2)?;
        }
    }
    Ok(x)
}

/// Subtracted from every pixel before the first convolution.
pub const PIXEL_MEAN: f64 = 0.5;

/// Checks that every frame has 20 full-size windows inside `grid`.
pub fn check_windows(windows: &[Vec<GridWindow>], size: usize, grid: GridSize) -> Result<(), ModelError> {
    for frame in windows {
        if frame.len() != NUM_REGIONS {
            return Err(ModelError::WindowCount {
                expected: NUM_REGIONS,
                found: frame.len(),
            });
        }
        for w in frame {
            if w.height() != size || w.width() != size || w.rows.1 >= grid.rows || w.cols.1 >= grid.cols {
                return Err(ModelError::Window(format!(
                    "{w} is not a {size}x{size} window inside a {}x{} grid",
                    grid.rows, grid.cols
                )));
            }
        }
    }
    Ok(())
}

/// Per-region features `[N, D_roi]` for the listed regions, in that order.
///
/// Each region crops its window from every frame's map, upsamples it, runs
/// its own convolutions and a fully connected layer; nothing is shared
/// between regions.
pub fn roi_forward(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    config: &ModelConfig,
    feature_map: NodeId,
    windows: &[Vec<GridWindow>],
    regions: &[usize],
) -> Result<Vec<(usize, NodeId)>, ModelError> {
    let shape = g.shape(feature_map).to_vec();
    if shape.len() != 4 || shape[0] != windows.len() {
        return Err(ModelError::Config(format!(
            "feature map {shape:?} with {} window sets",
            windows.len()
        )));
    }
    let grid = GridSize {
        rows: shape[2],
        cols: shape[3],
    };
    check_windows(windows, config.roi_window, grid)?;
    let n = shape[0];
    let sub = &config.roi_subnet;
    let mut out = Vec::with_capacity(regions.len());
    for &r in regions {
        let p = format!("{prefix}{}", region_prefix(r));
        let origins: Vec<(usize, usize)> = windows.iter().map(|f| f[r].origin()).collect();
        let crop = g.crop_windows(feature_map, &origins, config.roi_window)?;
        let mut x = g.upsample_nearest(crop, config.upsample_factor)?;
        for j in 0..sub.convs {
            let w = bound.get(&format!("{p}conv{j}.weight"))?;
            let b = bound.get(&format!("{p}conv{j}.bias"))?;
            x = g.conv2d(x, w, 1, sub.kernel / 2)?;
            x = g.channel_bias(x, b)?;
            x = g.relu(x);
        }
        let flat_len = g.value(x).len() / n;
        let flat = g.reshape(x, vec![n, flat_len])?;
        let fc = g.linear(
            flat,
            bound.get(&format!("{p}fc.weight"))?,
            bound.get(&format!("{p}fc.bias"))?,
        )?;
        out.push((r, g.relu(fc)));
    }
    Ok(out)
}

/// Concatenates the 20 region features (region order) and maps them through
/// one fully connected layer with ReLU to the global feature.
pub fn concat_global_feature(
    g: &mut Graph,
    bound: &BoundParams,
    features: &[(usize, NodeId)],
) -> Result<NodeId, ModelError> {
    if features.len() != NUM_REGIONS || features.iter().enumerate().any(|(i, (r, _))| *r != i) {
        return Err(ModelError::Config(format!(
            "global feature needs regions 0..{NUM_REGIONS} in order, got {:?}",
            features.iter().map(|f| f.0).collect::<Vec<_>>()
        )));
    }
    let first = g.shape(features[0].1).to_vec();
    if let Some((r, _)) = features.iter().find(|(_, id)| g.shape(*id) != first.as_slice()) {
        return Err(ModelError::Config(format!(
            "region {r} feature has shape {:?}, region 0 has {first:?}",
            g.shape(features[*r].1)
        )));
    }
    let ids: Vec<NodeId> = features.iter().map(|f| f.1).collect();
    let cat = g.concat(&ids, 1)?;
    let fc = g.linear(cat, bound.get("global.fc.weight")?, bound.get("global.fc.bias")?)?;
    Ok(g.relu(fc))
}

/// Concatenates the features of the regions linked to `au`, in rule order;
/// a single linked region passes through unchanged.
pub fn pair_symmetric(
    g: &mut Graph,
    features: &[(usize, NodeId)],
    au: u32,
    rules: &RuleTable,
) -> Result<NodeId, ModelError> {
    let regions = rules.regions_for_au(au);
    if regions.is_empty() {
        return Err(ModelError::NoLinkedRegion(au));
    }
    let ids = regions
        .iter()
        .map(|r| {
            features
                .iter()
                .find(|(fr, _)| fr == r)
                .map(|f| f.1)
                .ok_or_else(|| ModelError::Config(format!("feature of region {r} was not computed")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(if ids.len() == 1 {
        ids[0]
    } else {
        g.concat(&ids, 1)?
    })
}

/// Per-AU sigmoid of a linear unit over `feature` (`[N, K]` -> `[N, A]`).
pub fn predict_probs(g: &mut Graph, bound: &BoundParams, head_prefix: &str, feature: NodeId) -> Result<NodeId, ModelError> {
    let logits = g.linear(
        feature,
        bound.get(&format!("{head_prefix}weight"))?,
        bound.get(&format!("{head_prefix}bias"))?,
    )?;
    Ok(g.sigmoid(logits))
}

/// Marks the first `k` backbone stages (of every detector) non-trainable and
/// returns the affected parameter names.
pub fn freeze_prefix(params: &mut ParamSet, config: &ModelConfig, k: usize) -> Result<Vec<String>, ModelError> {
    let depth = config.backbone.len();
    if k > depth {
        return Err(ModelError::FreezeRange { k, depth });
    }
    let mut frozen = Vec::new();
    for (name, t) in params.iter_mut() {
        let hit = (0..k).any(|i| {
            let stage = format!("backbone.conv{i}.");
            name.starts_with(&stage) || name.contains(&format!(".{stage}"))
        });
        if hit {
            t.requires_grad = false;
            frozen.push(name.to_string());
        }
    }
    Ok(frozen)
}

/// A configured network with its parameters.
#[derive(Clone, Debug)]
pub struct AuModel {
    pub config: ModelConfig,
    pub rules: RuleTable,
    pub params: ParamSet,
}

impl AuModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        AuModel::from_params(config, params)
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        let layout = param_layout(&config)?;
        for spec in &layout {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, config needs {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        if params.len() != layout.len() {
            return Err(ModelError::Config(format!(
                "{} parameters present, config defines {}",
                params.len(),
                layout.len()
            )));
        }
        let rules = config.rules()?;
        Ok(AuModel { config, rules, params })
    }

    pub fn grid(&self) -> GridSize {
        self.config.feature_map().1
    }

    /// The 20 crop windows of a frame with these landmarks.
    pub fn windows_for(&self, landmarks: &LandmarkSet) -> Result<Vec<GridWindow>, ModelError> {
        Ok(frame_windows(
            landmarks,
            &self.rules,
            self.config.image_size,
            self.grid(),
            self.config.roi_window,
        )?)
    }

    /// Static forward pass over a batch. In single-AU mode the per-AU
    /// detector outputs are concatenated in AU order.
    pub fn forward_static(&self, g: &mut Graph, bound: &BoundParams, batch: &FrameBatch) -> Result<StaticOutput, ModelError> {
        let cfg = &self.config;
        match cfg.mode {
            ModelMode::Fvgg => {
                let images = g.constant(batch.images.clone());
                let map = backbone_forward(g, bound, "", cfg, images)?;
                let pooled = g.global_avg_pool(map)?;
                let fc = g.linear(pooled, bound.get("fvgg.fc.weight")?, bound.get("fvgg.fc.bias")?)?;
                let global = g.relu(fc);
                let probs = predict_probs(g, bound, "head.", global)?;
                Ok(StaticOutput {
                    global: Some(global),
                    probs,
                })
            }
            ModelMode::MultiLabel => {
                let global = self.global_feature(g, bound, batch)?;
                let probs = predict_probs(g, bound, "head.", global)?;
                Ok(StaticOutput {
                    global: Some(global),
                    probs,
                })
            }
            ModelMode::SingleAu => {
                let outs = (0..cfg.num_aus())
                    .map(|i| self.forward_detector(g, bound, i, batch))
                    .collect::<Result<Vec<_>, _>>()?;
                let probs = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
                Ok(StaticOutput { global: None, probs })
            }
        }
    }

    /// Multi-label global feature `[N, G]`.
    pub fn global_feature(&self, g: &mut Graph, bound: &BoundParams, batch: &FrameBatch) -> Result<NodeId, ModelError> {
        if self.config.mode != ModelMode::MultiLabel {
            return Err(ModelError::Config("the ROI global feature needs multi-label mode".into()));
        }
        let images = g.constant(batch.images.clone());
        let map = backbone_forward(g, bound, "", &self.config, images)?;
        let regions: Vec<usize> = (0..NUM_REGIONS).collect();
        let feats = roi_forward(g, bound, "", &self.config, map, &batch.windows, &regions)?;
        concat_global_feature(g, bound, &feats)
    }

    /// Probabilities `[N, 1]` of the single-AU detector for `config.aus[au_index]`.
    pub fn forward_detector(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        au_index: usize,
        batch: &FrameBatch,
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.config;
        if cfg.mode != ModelMode::SingleAu {
            return Err(ModelError::Config("per-AU detectors need single-AU mode".into()));
        }
        let au = *cfg
            .aus
            .get(au_index)
            .ok_or_else(|| ModelError::Config(format!("AU index {au_index} out of range")))?;
        let p = detector_prefix(au);
        let images = g.constant(batch.images.clone());
        let map = backbone_forward(g, bound, &p, cfg, images)?;
        let regions = self.rules.regions_for_au(au);
        let feats = roi_forward(g, bound, &p, cfg, map, &batch.windows, &regions)?;
        let paired = pair_symmetric(g, &feats, au, &self.rules)?;
        predict_probs(g, bound, &format!("{p}head."), paired)
    }

    /// Runs the LSTM stack over per-timestep features (each `[N, G]`) and
    /// returns per-timestep probabilities `[N, A]`.
    pub fn forward_temporal(&self, g: &mut Graph, bound: &BoundParams, features: &[NodeId]) -> Result<Vec<NodeId>, ModelError> {
        let t = self
            .config
            .temporal
            .as_ref()
            .ok_or_else(|| ModelError::Config("model has no temporal stack".into()))?;
        let layers: Vec<LstmLayerNodes> = lstm::bind_stack(g, bound, t.depth)?;
        let hs = lstm::run_stack(g, features, &layers)?;
        hs.into_iter()
            .map(|h| predict_probs(g, bound, "temporal_head.", h))
            .collect()
    }

    /// End-to-end sequence pass: `batch` holds `seq_len` time-major blocks of
    /// N frames (frame `t * N + n` is step t of sequence n).
    pub fn forward_sequences(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        batch: &FrameBatch,
        seq_len: usize,
    ) -> Result<Vec<NodeId>, ModelError> {
        if seq_len == 0 || batch.len() % seq_len != 0 {
            return Err(ModelError::Config(format!(
                "{} frames do not split into sequences of {seq_len}",
                batch.len()
            )));
        }
        let n = batch.len() / seq_len;
        let global = self.global_feature(g, bound, batch)?;
        let steps = (0..seq_len)
            .map(|t| g.slice(global, 0, t * n, n))
            .collect::<Result<Vec<_>, _>>()?;
        self.forward_temporal(g, bound, &steps)
    }

    /// Per-frame global features, in input order, without gradients.
    pub fn extract_features(&self, batch: &FrameBatch) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind_constants(&mut g);
        let out = self.forward_static(&mut g, &bound, batch)?;
        let global = out
            .global
            .ok_or_else(|| ModelError::Config("single-AU models have no global feature".into()))?;
        let len = g.shape(global)[1];
        Ok(g.data(global).chunks(len).map(<[f64]>::to_vec).collect())
    }

    /// Static probabilities `[N, A]` as row-major values, without gradients.
    pub fn predict(&self, batch: &FrameBatch) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind_constants(&mut g);
        let out = self.forward_static(&mut g, &bound, batch)?;
        Ok(g.data(out.probs).to_vec())
    }

    /// Temporal probabilities for precomputed feature sequences: `features[t]`
    /// is `[N, G]` row-major. Returns one `[N, A]` block per step.
    pub fn predict_temporal(&self, features: &[Tensor]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind_constants(&mut g);
        let ids: Vec<NodeId> = features.iter().map(|t| g.constant(t.clone())).collect();
        let probs = self.forward_temporal(&mut g, &bound, &ids)?;
        Ok(probs.into_iter().map(|p| g.data(p).to_vec()).collect())
    }
}
