//! LSTM cell and stacked layers over feature sequences.
//!
//! Per step, with `[h, x]` the concatenation of the previous output and the
//! new input:
//!
//! ```text
//! f = sigmoid(Wf [h,x] + bf)        forget gate
//! i = sigmoid(Wi [h,x] + bi)        input gate
//! c~ = tanh(Wc [h,x] + bc)          candidate cell state
//! C = f * C_prev + i * c~
//! o = sigmoid(Wo [h,x] + bo)
//! h = o * tanh(C)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor_core::{BoundParams, Graph, NodeId, ParamSet, Tensor, TensorError};

pub const GATE_NAMES: [&str; 8] = ["Wf", "bf", "Wi", "bi", "Wc", "bc", "Wo", "bo"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmStackConfig {
    pub depth: usize,
    pub hidden_len: usize,
    pub sequence_len: usize,
    /// Initial value of the forget-gate bias; other biases start at zero.
    pub forget_bias: f64,
    pub init_std: f64,
}

impl Default for LstmStackConfig {
    fn default() -> Self {
        LstmStackConfig {
            depth: 1,
            hidden_len: 32,
            sequence_len: 24,
            forget_bias: 1.0,
            init_std: 0.1,
        }
    }
}

impl LstmStackConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(1..=3).contains(&self.depth) {
            return Err(TensorError::InvalidArgument(format!(
                "LSTM depth must be 1, 2 or 3, got {}",
                self.depth
            )));
        }
        if self.hidden_len == 0 || self.sequence_len == 0 {
            return Err(TensorError::InvalidArgument(
                "LSTM hidden_len and sequence_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("lstm.layer{layer}.")
}

/// Parameters of one layer. Each W is `hidden x (hidden + input)`, each b has
/// length `hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    pub input_len: usize,
    pub hidden_len: usize,
    pub wf: Tensor,
    pub bf: Tensor,
    pub wi: Tensor,
    pub bi: Tensor,
    pub wc: Tensor,
    pub bc: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl LstmLayerParams {
    pub fn init<R: Rng + ?Sized>(input_len: usize, hidden_len: usize, std: f64, forget_bias: f64, rng: &mut R) -> Self {
        let w = |rng: &mut R| Tensor::randn(vec![hidden_len, hidden_len + input_len], std, rng).with_grad(true);
        let b = |v: f64| Tensor::full(vec![hidden_len], v).with_grad(true);
        LstmLayerParams {
            input_len,
            hidden_len,
            wf: w(rng),
            bf: b(forget_bias),
            wi: w(rng),
            bi: b(0.0),
            wc: w(rng),
            bc: b(0.0),
            wo: w(rng),
            bo: b(0.0),
        }
    }

    fn blocks(&self) -> [&Tensor; 8] {
        [&self.wf, &self.bf, &self.wi, &self.bi, &self.wc, &self.bc, &self.wo, &self.bo]
    }

    /// Registers the eight blocks under `lstm.layer{layer}.{Wf,bf,...}`.
    pub fn register(&self, params: &mut ParamSet, layer: usize) {
        let prefix = layer_prefix(layer);
        for (name, t) in GATE_NAMES.iter().zip(self.blocks()) {
            params.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn from_params(params: &ParamSet, layer: usize) -> Result<Self, TensorError> {
        let prefix = layer_prefix(layer);
        let get = |n: &str| params.get(&format!("{prefix}{n}")).cloned();
        let wf = get("Wf")?;
        let hidden_len = wf.shape()[0];
        let input_len = wf.shape()[1].checked_sub(hidden_len).ok_or_else(|| {
            TensorError::InvalidArgument(format!("{prefix}Wf has shape {:?}", wf.shape()))
        })?;
        Ok(LstmLayerParams {
            input_len,
            hidden_len,
            wf,
            bf: get("bf")?,
            wi: get("Wi")?,
            bi: get("bi")?,
            wc: get("Wc")?,
            bc: get("bc")?,
            wo: get("Wo")?,
            bo: get("bo")?,
        })
    }
}

/// Graph handles of one layer's parameter blocks.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayerNodes {
    pub input_len: usize,
    pub hidden_len: usize,
    pub wf: NodeId,
    pub bf: NodeId,
    pub wi: NodeId,
    pub bi: NodeId,
    pub wc: NodeId,
    pub bc: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl LstmLayerNodes {
    pub fn from_bound(g: &Graph, bound: &BoundParams, layer: usize) -> Result<Self, TensorError> {
        let prefix = layer_prefix(layer);
        let id = |n: &str| bound.get(&format!("{prefix}{n}"));
        let wf = id("Wf")?;
        let ws = g.shape(wf);
        let hidden_len = ws[0];
        let input_len = ws[1] - hidden_len;
        Ok(LstmLayerNodes {
            input_len,
            hidden_len,
            wf,
            bf: id("bf")?,
            wi: id("Wi")?,
            bi: id("bi")?,
            wc: id("Wc")?,
            bc: id("bc")?,
            wo: id("Wo")?,
            bo: id("bo")?,
        })
    }

    pub fn record(g: &mut Graph, p: &LstmLayerParams) -> Self {
        let mut leaf = |t: &Tensor| g.leaf(t.clone());
        LstmLayerNodes {
            input_len: p.input_len,
            hidden_len: p.hidden_len,
            wf: leaf(&p.wf),
            bf: leaf(&p.bf),
            wi: leaf(&p.wi),
            bi: leaf(&p.bi),
            wc: leaf(&p.wc),
            bc: leaf(&p.bc),
            wo: leaf(&p.wo),
            bo: leaf(&p.bo),
        }
    }
}

/// Recurrent state `(h, C)`, each `[batch, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, hidden: usize) -> Self {
        let h = g.constant(Tensor::zeros(vec![batch, hidden]));
        let c = g.constant(Tensor::zeros(vec![batch, hidden]));
        LstmState { h, c }
    }
}

/// One LSTM step on a batch: `x` is `[batch, input_len]`.
pub fn cell_step(g: &mut Graph, x: NodeId, state: LstmState, p: &LstmLayerNodes) -> Result<LstmState, TensorError> {
    let xs = g.shape(x).to_vec();
    let hs = g.shape(state.h).to_vec();
    let cs = g.shape(state.c).to_vec();
    if xs.len() != 2 || xs[1] != p.input_len || hs != [xs[0], p.hidden_len] || cs != hs {
        return Err(TensorError::ShapeMismatch {
            op: "lstm cell",
            detail: format!(
                "x {xs:?}, h {hs:?}, C {cs:?} for input_len {} hidden_len {}",
                p.input_len, p.hidden_len
            ),
        });
    }
    let hx = g.concat(&[state.h, x], 1)?;
    let f_pre = g.linear(hx, p.wf, p.bf)?;
    let f = g.sigmoid(f_pre);
    let i_pre = g.linear(hx, p.wi, p.bi)?;
    let i = g.sigmoid(i_pre);
    let cand_pre = g.linear(hx, p.wc, p.bc)?;
    let cand = g.tanh(cand_pre);
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let o_pre = g.linear(hx, p.wo, p.bo)?;
    let o = g.sigmoid(o_pre);
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Runs a single layer over a sequence from a zero state, returning every h_t.
pub fn run_layer(g: &mut Graph, inputs: &[NodeId], p: &LstmLayerNodes) -> Result<Vec<NodeId>, TensorError> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::InvalidArgument("empty sequence".into()))?;
    let batch = g.shape(*first)[0];
    let mut state = LstmState::zeros(g, batch, p.hidden_len);
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = cell_step(g, x, state, p)?;
        outputs.push(state.h);
    }
    Ok(outputs)
}

/// Layer l consumes layer l-1's full output sequence; the top layer's outputs
/// at every timestep are returned.
pub fn run_stack(g: &mut Graph, inputs: &[NodeId], layers: &[LstmLayerNodes]) -> Result<Vec<NodeId>, TensorError> {
    if inputs.is_empty() {
        return Err(TensorError::InvalidArgument("empty sequence".into()));
    }
    if layers.is_empty() {
        return Err(TensorError::InvalidArgument("LSTM stack has no layers".into()));
    }
    let mut seq = inputs.to_vec();
    for layer in layers {
        seq = run_layer(g, &seq, layer)?;
    }
    Ok(seq)
}

/// Initializes `depth` layers; the first reads `input_len` features.
pub fn init_stack<R: Rng + ?Sized>(config: &LstmStackConfig, input_len: usize, rng: &mut R) -> ParamSet {
    let mut params = ParamSet::new();
    for layer in 0..config.depth {
        let inp = if layer == 0 { input_len } else { config.hidden_len };
        LstmLayerParams::init(inp, config.hidden_len, config.init_std, config.forget_bias, rng)
            .register(&mut params, layer);
    }
    params
}

pub fn bind_stack(g: &Graph, bound: &BoundParams, depth: usize) -> Result<Vec<LstmLayerNodes>, TensorError> {
    (0..depth).map(|l| LstmLayerNodes::from_bound(g, bound, l)).collect()
}
