use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d {
        stride: usize,
        padding: usize,
        batched: bool,
    },
    ChannelBias,
    Linear,
    MatMul,
    BiasAdd,
    Add,
    Sub,
    Mul,
    Affine {
        scale: f64,
        shift: f64,
    },
    Relu,
    Sigmoid,
    Tanh,
    Ln,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    CropWindows {
        size: usize,
        origins: Vec<(usize, usize)>,
    },
    MaxPool2d {
        size: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool,
    Upsample {
        factor: usize,
    },
    Reshape,
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Tape of operations recorded in creation order. Node ids are indices into
/// the tape, so every input id precedes its consumer.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.data(id)[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent tensor");
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let requires_grad = tensor.requires_grad;
        let value = Tensor::new(tensor.shape().to_vec(), tensor.into_data()).unwrap();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_grad(true))
    }

    /// 2-D convolution. `input` is `[C,H,W]` or `[N,C,H,W]`; `filters` is `[O,C,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        filters: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(filters).to_vec();
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if ws.len() != 4 {
            return Err(shape_err("conv2d", format!("filters must be rank 4, got {ws:?}")));
        }
        let (batched, n, c, h, w) = match xs.len() {
            3 => (false, 1, xs[0], xs[1], xs[2]),
            4 => (true, xs[0], xs[1], xs[2], xs[3]),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("input must be [C,H,W] or [N,C,H,W], got {xs:?}"),
                ))
            }
        };
        if ws[1] != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels but filters expect {}", ws[1]),
            ));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {padding})"),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let out_c = ws[0];
        let mut out = vec![0.0; n * out_c * geom.out_h * geom.out_w];
        kernels::conv2d_forward(self.data(input), self.data(filters), &mut out, n, out_c, &geom);
        let shape = if batched {
            vec![n, out_c, geom.out_h, geom.out_w]
        } else {
            vec![out_c, geom.out_h, geom.out_w]
        };
        Ok(self.push(
            Op::Conv2d {
                stride,
                padding,
                batched,
            },
            vec![input, filters],
            shape,
            out,
        ))
    }

    /// Adds a per-channel bias to a `[C,H,W]` or `[N,C,H,W]` map.
    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if xs.len() < 3 {
            return Err(shape_err("channel_bias", format!("input rank too small: {xs:?}")));
        }
        let c = xs[xs.len() - 3];
        if bs != [c] {
            return Err(shape_err("channel_bias", format!("bias {bs:?} for {c} channels")));
        }
        let plane = xs[xs.len() - 2] * xs[xs.len() - 1];
        let b = self.data(bias).to_vec();
        let mut out = self.data(input).to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(Op::ChannelBias, vec![input, bias], xs, out))
    }

    /// Fully connected layer: `x [N,K]`, `weight [M,K]`, `bias [M]` -> `[N,M]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err(
                "linear",
                format!("x {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * m];
        for row in out.chunks_mut(m) {
            row.copy_from_slice(self.data(bias));
        }
        kernels::matmul_nt_acc(self.data(x), self.data(weight), &mut out, n, k, m);
        Ok(self.push(Op::Linear, vec![x, weight, bias], vec![n, m], out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", format!("{as_:?} x {bs:?}")));
        }
        let (n, k, m) = (as_[0], as_[1], bs[1]);
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, n, k, m);
        Ok(self.push(Op::MatMul, vec![a, b], vec![n, m], out))
    }

    /// Row-wise bias: `x [N,M] + b [M]`.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(shape_err("bias_add", format!("x {xs:?}, bias {bs:?}")));
        }
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(xs[1]) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(Op::BiasAdd, vec![x, bias], xs, out))
    }

    fn binary(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a, b], shape, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, vec![x], shape, out)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.unary(Op::Affine { scale, shift }, x, |v| scale * v + shift)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu, x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    /// Natural log; the caller keeps inputs strictly positive.
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Ln, x, f64::ln)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape, out))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} on axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start, len }, vec![x], shape, out))
    }

    /// Crops a `size x size` spatial window from each sample of `[N,C,H,W]`;
    /// `origins[n]` is the (row, col) of the window's top-left cell for sample n.
    pub fn crop_windows(&mut self, x: NodeId, origins: &[(usize, usize)], size: usize) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || origins.len() != xs[0] {
            return Err(shape_err(
                "crop_windows",
                format!("input {xs:?} with {} windows", origins.len()),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        for &(r, col) in origins {
            if size == 0 || r + size > h || col + size > w {
                return Err(shape_err(
                    "crop_windows",
                    format!("window at ({r},{col}) size {size} exceeds {h}x{w}"),
                ));
            }
        }
        let data = self.data(x);
        let mut out = Vec::with_capacity(n * c * size * size);
        for (s, &(r0, c0)) in origins.iter().enumerate() {
            for ch in 0..c {
                let plane = (s * c + ch) * h * w;
                for r in r0..r0 + size {
                    out.extend_from_slice(&data[plane + r * w + c0..plane + r * w + c0 + size]);
                }
            }
        }
        Ok(self.push(
            Op::CropWindows {
                size,
                origins: origins.to_vec(),
            },
            vec![x],
            vec![n, c, size, size],
            out,
        ))
    }

    /// Non-overlapping max pooling with window and stride `size`; trailing
    /// rows/cols that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 || size == 0 {
            return Err(shape_err("max_pool2d", format!("input {xs:?}, size {size}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if h < size || w < size {
            return Err(shape_err("max_pool2d", format!("pool {size} larger than {h}x{w}")));
        }
        let (oh, ow) = (h / size, w / size);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let data = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.push(Op::MaxPool2d { size, argmax }, vec![x], shape, out))
    }

    /// Mean over the spatial axes of `[N,C,H,W]`, giving `[N,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let out = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(Op::GlobalAvgPool, vec![x], vec![xs[0], xs[1]], out))
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId, TensorError> {
        if factor == 0 {
            return Err(TensorError::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("upsample_nearest", format!("input {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let (oh, ow) = (h * factor, w * factor);
        let data = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    out.push(data[p * h * w + (oy / factor) * w + ox / factor]);
                }
            }
        }
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(self.push(Op::Upsample { factor }, vec![x], shape, out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Op::Reshape, vec![x], shape, data))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum, vec![x], vec![1], vec![s])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::Mean, vec![x], vec![1], vec![s])
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate
    /// additively across fan-out.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>| match &mut grads[id.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        };
        let ins = &node.inputs;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride, padding, .. } => {
                let (x, w) = (ins[0], ins[1]);
                let xs = self.shape(x);
                let ws = self.shape(w);
                let (n, c, h, wd) = if xs.len() == 3 {
                    (1, xs[0], xs[1], xs[2])
                } else {
                    (xs[0], xs[1], xs[2], xs[3])
                };
                let os = node.value.shape();
                let geom = ConvGeom {
                    channels: c,
                    height: h,
                    width: wd,
                    kh: ws[2],
                    kw: ws[3],
                    stride: *stride,
                    padding: *padding,
                    out_h: os[os.len() - 2],
                    out_w: os[os.len() - 1],
                };
                let mut dw = self.needs(w).then(|| vec![0.0; self.value(w).len()]);
                let mut dx = self.needs(x).then(|| vec![0.0; self.value(x).len()]);
                kernels::conv2d_backward(
                    self.data(x),
                    self.data(w),
                    g,
                    n,
                    ws[0],
                    &geom,
                    dw.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                if let Some(dw) = dw {
                    acc(grads, w, dw);
                }
                if let Some(dx) = dx {
                    acc(grads, x, dx);
                }
            }
            Op::ChannelBias => {
                let (x, b) = (ins[0], ins[1]);
                if self.needs(x) {
                    acc(grads, x, g.to_vec());
                }
                if self.needs(b) {
                    let xs = self.shape(x);
                    let c = xs[xs.len() - 3];
                    let plane = xs[xs.len() - 2] * xs[xs.len() - 1];
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    acc(grads, b, db);
                }
            }
            Op::Linear => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let xs = self.shape(x);
                let (n, k) = (xs[0], xs[1]);
                let m = self.shape(w)[0];
                if self.needs(x) {
                    let mut dx = vec![0.0; n * k];
                    kernels::matmul_acc(g, self.data(w), &mut dx, n, m, k);
                    acc(grads, x, dx);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; m * k];
                    kernels::matmul_tn_acc(g, self.data(x), &mut dw, n, m, k);
                    acc(grads, w, dw);
                }
                if self.needs(b) {
                    acc(grads, b, column_sums(g, m));
                }
            }
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![0.0; n * k];
                    kernels::matmul_nt_acc(g, self.data(b), &mut da, n, m, k);
                    acc(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * m];
                    kernels::matmul_tn_acc(self.data(a), g, &mut db, n, k, m);
                    acc(grads, b, db);
                }
            }
            Op::BiasAdd => {
                let (x, b) = (ins[0], ins[1]);
                if self.needs(x) {
                    acc(grads, x, g.to_vec());
                }
                if self.needs(b) {
                    acc(grads, b, column_sums(g, self.shape(b)[0]));
                }
            }
            Op::Add => {
                for &i in ins {
                    if self.needs(i) {
                        acc(grads, i, g.to_vec());
                    }
                }
            }
            Op::Sub => {
                if self.needs(ins[0]) {
                    acc(grads, ins[0], g.to_vec());
                }
                if self.needs(ins[1]) {
                    acc(grads, ins[1], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                if self.needs(a) {
                    let d = g.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                    acc(grads, a, d);
                }
                if self.needs(b) {
                    let d = g.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                    acc(grads, b, d);
                }
            }
            Op::Affine { scale, .. } => {
                acc(grads, ins[0], g.iter().map(|v| v * scale).collect());
            }
            Op::Relu => {
                let d = g
                    .iter()
                    .zip(self.data(ins[0]))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, ins[0], d);
            }
            Op::Sigmoid => {
                let d = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(grads, ins[0], d);
            }
            Op::Tanh => {
                let d = g.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect();
                acc(grads, ins[0], d);
            }
            Op::Ln => {
                let d = g.iter().zip(self.data(ins[0])).map(|(g, x)| g / x).collect();
                acc(grads, ins[0], d);
            }
            Op::Concat { axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in ins {
                    let len = self.shape(p)[*axis] * inner;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            d.extend_from_slice(&g[base..base + len]);
                        }
                        acc(grads, p, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start, len } => {
                let x = ins[0];
                let (outer, dim, inner) = split_axis(self.shape(x), *axis);
                let mut d = vec![0.0; self.value(x).len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(grads, x, d);
            }
            Op::CropWindows { size, origins } => {
                let x = ins[0];
                let xs = self.shape(x);
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let mut d = vec![0.0; self.value(x).len()];
                let mut k = 0;
                for (s, &(r0, c0)) in origins.iter().enumerate() {
                    for ch in 0..c {
                        let plane = (s * c + ch) * h * w;
                        for r in r0..r0 + size {
                            for col in c0..c0 + size {
                                d[plane + r * w + col] += g[k];
                                k += 1;
                            }
                        }
                    }
                }
                acc(grads, x, d);
            }
            Op::MaxPool2d { argmax, .. } => {
                let mut d = vec![0.0; self.value(ins[0]).len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    d[idx] += gv;
                }
                acc(grads, ins[0], d);
            }
            Op::GlobalAvgPool => {
                let xs = self.shape(ins[0]);
                let plane = xs[2] * xs[3];
                let mut d = Vec::with_capacity(self.value(ins[0]).len());
                for gv in g {
                    d.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                acc(grads, ins[0], d);
            }
            Op::Upsample { factor } => {
                let xs = self.shape(ins[0]);
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let (oh, ow) = (h * factor, w * factor);
                let planes = self.value(ins[0]).len() / (h * w);
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            d[p * h * w + (oy / factor) * w + ox / factor] +=
                                g[p * oh * ow + oy * ow + ox];
                        }
                    }
                }
                acc(grads, ins[0], d);
            }
            Op::Reshape => acc(grads, ins[0], g.to_vec()),
            Op::Sum => {
                let n = self.value(ins[0]).len();
                acc(grads, ins[0], vec![g[0]; n]);
            }
            Op::Mean => {
                let n = self.value(ins[0]).len();
                acc(grads, ins[0], vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn column_sums(g: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for row in g.chunks(m) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
