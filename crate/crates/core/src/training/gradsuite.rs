//! Finite-difference checks of every differentiable graph op, the offset
//! loss, the LSTM cell and a complete (tiny) ROI + LSTM network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data_synth::neutral_template;
use crate::loss_metrics::multilabel_loss_node;
use crate::lstm::{cell_step, LstmLayerNodes, LstmStackConfig, LstmState};
use crate::model::{init_params, AuModel, ConvStage, FrameBatch, ModelConfig, ModelMode, RoiSubnetConfig};
use crate::roi_geometry::{ImageSize, LandmarkSet, Point};
use crate::tensor_core::{grad_check, BoundParams, Graph, NodeId, Tensor, TensorError};

/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-3;
/// Largest accepted `|analytic - numeric| / max(1, |numeric|)`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Coordinates re-differenced with a smaller step to stay off a kink.
    pub kink_crossings: usize,
    pub passed: bool,
}

type Closure = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    op: Closure,
}

/// `sum(w * y)` with weights drawn from a fixed stream, so every output
/// element reaches the scalar with a different coefficient.
fn weighted_sum(g: &mut Graph, y: NodeId) -> Result<NodeId, TensorError> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(0x5eed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Gaussian values pushed at least `gap` away from zero (keeps ReLU off its kink).
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v += gap.copysign(*v));
    t
}

/// Distinct values 0.1 apart in random order (keeps max-pool off ties).
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 0.05 * n as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn unary(name: &'static str, x: Tensor, f: fn(&mut Graph, NodeId) -> Result<NodeId, TensorError>) -> Case {
    Case {
        name,
        inputs: vec![x],
        op: Box::new(move |g, v| {
            let y = f(g, v[0])?;
            weighted_sum(g, y)
        }),
    }
}

fn binary(name: &'static str, a: Tensor, b: Tensor, f: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId, TensorError>) -> Case {
    Case {
        name,
        inputs: vec![a, b],
        op: Box::new(move |g, v| {
            let y = f(g, v[0], v[1])?;
            weighted_sum(g, y)
        }),
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = vec![
        binary("conv2d (stride 1, pad 1)", randn(&[2, 2, 5, 5], rng), randn(&[3, 2, 3, 3], rng), |g, x, w| {
            g.conv2d(x, w, 1, 1)
        }),
        binary("conv2d (stride 2, unbatched)", randn(&[2, 6, 6], rng), randn(&[2, 2, 3, 3], rng), |g, x, w| {
            g.conv2d(x, w, 2, 0)
        }),
        binary("channel_bias", randn(&[2, 3, 2, 2], rng), randn(&[3], rng), |g, x, b| g.channel_bias(x, b)),
        Case {
            name: "linear",
            inputs: vec![randn(&[3, 4], rng), randn(&[2, 4], rng), randn(&[2], rng)],
            op: Box::new(|g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                weighted_sum(g, y)
            }),
        },
        binary("matmul", randn(&[3, 4], rng), randn(&[4, 2], rng), |g, a, b| g.matmul(a, b)),
        binary("bias_add", randn(&[3, 4], rng), randn(&[4], rng), |g, x, b| g.bias_add(x, b)),
        binary("add", randn(&[3, 4], rng), randn(&[3, 4], rng), |g, a, b| g.add(a, b)),
        binary("sub", randn(&[3, 4], rng), randn(&[3, 4], rng), |g, a, b| g.sub(a, b)),
        binary("mul", randn(&[3, 4], rng), randn(&[3, 4], rng), |g, a, b| g.mul(a, b)),
        unary("affine", randn(&[3, 4], rng), |g, x| Ok(g.affine(x, 1.7, -0.3))),
        unary("relu", away_from_zero(&[3, 4], 0.05, rng), |g, x| Ok(g.relu(x))),
        unary("sigmoid", randn(&[3, 4], rng), |g, x| Ok(g.sigmoid(x))),
        unary("tanh", randn(&[3, 4], rng), |g, x| Ok(g.tanh(x))),
        unary("ln", uniform(&[3, 4], 0.5, 2.0, rng), |g, x| Ok(g.ln(x))),
        binary("concat", randn(&[2, 3], rng), randn(&[2, 2], rng), |g, a, b| g.concat(&[a, b], 1)),
        unary("slice", randn(&[3, 5], rng), |g, x| g.slice(x, 1, 1, 3)),
        unary("crop_windows", randn(&[2, 2, 5, 5], rng), |g, x| g.crop_windows(x, &[(0, 1), (2, 2)], 3)),
        unary("max_pool2d", distinct(&[1, 2, 4, 4], rng), |g, x| g.max_pool2d(x, 2)),
        unary("global_avg_pool", randn(&[2, 3, 3, 3], rng), |g, x| g.global_avg_pool(x)),
        unary("upsample_nearest", randn(&[1, 2, 3, 3], rng), |g, x| g.upsample_nearest(x, 2)),
        unary("reshape", randn(&[2, 6], rng), |g, x| g.reshape(x, vec![3, 4])),
        Case {
            name: "sum",
            inputs: vec![randn(&[3, 4], rng)],
            op: Box::new(|g, v| Ok(g.sum(v[0]))),
        },
        Case {
            name: "mean",
            inputs: vec![randn(&[3, 4], rng)],
            op: Box::new(|g, v| Ok(g.mean(v[0]))),
        },
    ];
    let labels: Vec<f64> = (0..12).map(|_| f64::from(rng.random_bool(0.5))).collect();
    cases.push(Case {
        name: "offset multi-label loss",
        inputs: vec![uniform(&[4, 3], 0.05, 0.95, rng)],
        op: Box::new(move |g, v| multilabel_loss_node(g, v[0], &labels)),
    });
    let (hidden, input) = (4, 3);
    let mut lstm_inputs = vec![randn(&[2, input], rng), randn(&[2, hidden], rng), randn(&[2, hidden], rng)];
    for _ in 0..4 {
        lstm_inputs.push(Tensor::randn(vec![hidden, hidden + input], 0.5, rng));
        lstm_inputs.push(randn(&[hidden], rng));
    }
    cases.push(Case {
        name: "LSTM cell step",
        inputs: lstm_inputs,
        op: Box::new(move |g, v| {
            let p = LstmLayerNodes {
                input_len: input,
                hidden_len: hidden,
                wf: v[3],
                bf: v[4],
                wi: v[5],
                bi: v[6],
                wc: v[7],
                bc: v[8],
                wo: v[9],
                bo: v[10],
            };
            let s = cell_step(g, v[0], LstmState { h: v[1], c: v[2] }, &p)?;
            let both = g.concat(&[s.h, s.c], 1)?;
            weighted_sum(g, both)
        }),
    });
    cases
}

/// Smallest network that still exercises every stage: backbone, all 20
/// ROI nets, the global feature, a two-layer LSTM and the temporal head.
pub fn tiny_temporal_config() -> ModelConfig {
    ModelConfig {
        image_size: ImageSize::square(12),
        in_channels: 1,
        backbone: vec![ConvStage::new(2, true)],
        roi_window: 3,
        upsample_factor: 2,
        roi_subnet: RoiSubnetConfig {
            convs: 1,
            kernel: 3,
            feature_len: 2,
        },
        global_feature_len: 4,
        aus: vec![1, 12],
        mode: ModelMode::MultiLabel,
        init_std: None,
        rule_table: None,
        temporal: Some(LstmStackConfig {
            depth: 2,
            hidden_len: 2,
            sequence_len: 3,
            forget_bias: 1.0,
            init_std: 0.5,
        }),
    }
}

fn model_case(seed: u64, rng: &mut ChaCha8Rng) -> Result<Case, TrainError> {
    let config = tiny_temporal_config();
    let params = init_params(&config, seed)?;
    let model = AuModel::from_params(config.clone(), params.clone())?;
    let size = config.image_size;
    let seq_len = config.temporal.as_ref().map_or(1, |t| t.sequence_len);
    let mut windows = Vec::new();
    for _ in 0..seq_len {
        let (dx, dy) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let pts = neutral_template()
            .into_iter()
            .map(|p| Point::new(5.5 + dx + 4.5 * p.x, 5.5 + dy + 5.0 * p.y))
            .collect();
        windows.push(model.windows_for(&LandmarkSet::new(pts, size)?)?);
    }
    let images = uniform(&[seq_len, 1, size.height, size.width], 0.0, 1.0, rng);
    let batch = FrameBatch::new(images, windows)?;
    let labels: Vec<Vec<f64>> = (0..seq_len)
        .map(|_| (0..config.num_aus()).map(|_| f64::from(rng.random_bool(0.5))).collect())
        .collect();
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).collect();
    // zero biases put ReLUs exactly on their kink at initialization; check
    // at a generic point nearby instead
    let inputs: Vec<Tensor> = params
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.sample::<f64, _>(StandardNormal));
            t
        })
        .collect();
    let model_err = |e: crate::model::ModelError| TensorError::InvalidArgument(e.to_string());
    Ok(Case {
        name: "ROI + 2-layer LSTM network",
        inputs,
        op: Box::new(move |g, v| {
            let bound = BoundParams::from_nodes(names.iter().cloned().zip(v.iter().copied()));
            let probs = model.forward_sequences(g, &bound, &batch, seq_len).map_err(model_err)?;
            let mut total = None;
            for (p, l) in probs.iter().zip(&labels) {
                let loss = multilabel_loss_node(g, *p, l)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty sequence");
            Ok(g.affine(total, 1.0 / seq_len as f64, 0.0))
        }),
    })
}

/// Runs every check for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradRow>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = op_cases(&mut rng);
    cases.push(model_case(seed, &mut rng)?);
    cases
        .into_iter()
        .map(|c| {
            let r = grad_check(&c.op, &c.inputs, GRAD_EPS)?;
            Ok(GradRow {
                name: c.name.to_string(),
                coordinates: r.coordinates,
                max_rel_error: r.max_rel_error,
                kink_crossings: r.kink_crossings,
                passed: r.passes(GRAD_TOLERANCE),
            })
        })
        .collect()
}

/// Plain-text table of suite rows.
pub fn render_grad_table(rows: &[GradRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(2).max(2);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>12}  result\n",
        "op", "coords", "kinks", "max rel err"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>6}  {:>12.3e}  {}\n",
            r.name,
            r.coordinates,
            r.kink_crossings,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}
