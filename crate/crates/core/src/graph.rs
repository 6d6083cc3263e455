//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Graph`] is a tape of op nodes in topological (creation) order. Each
//! node stores its output value, the op kind with whatever the backward pass
//! needs (pool argmaxes, clamp targets), and its input node ids. Calling
//! [`Graph::backward`] from a scalar loss walks the tape once in reverse and
//! accumulates gradients; fan-out accumulates by summation, so shared
//! parameters get the sum of their per-use contributions.
//!
//! Checked mode scans every op output for NaN/Inf and is enabled in tests;
//! training leaves it off and relies on the loss-level divergence check.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output length `ceil(T / stride)`.
    Same,
    /// No padding, output length `(T - tau) / stride + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { stride: usize, padding: Padding },
    ChannelwiseConv1d { stride: usize, padding: Padding },
    Downsample { factor: usize },
    /// Nearest-neighbor upsampling to a fixed length; rows past the source
    /// end repeat the last frame.
    RepeatTo { factor: usize },
    MaxPool1d { argmax: Vec<usize> },
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Mul,
    Scale { c: f64 },
    AddBias,
    Matmul,
    Concat,
    SliceCols { start: usize, len: usize },
    StackRows,
    Reshape,
    MeanAll,
    SumAll,
    Bce { targets: Vec<f64> },
    SoftmaxCe { labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::ChannelwiseConv1d { .. } => "channelwise_conv1d",
            Op::Downsample { .. } => "downsample",
            Op::RepeatTo { .. } => "repeat_to",
            Op::MaxPool1d { .. } => "max_pool1d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::AddBias => "add_bias",
            Op::Matmul => "matmul",
            Op::Concat => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::StackRows => "stack_rows",
            Op::Reshape => "reshape",
            Op::MeanAll => "mean_all",
            Op::SumAll => "sum_all",
            Op::Bce { .. } => "bce_loss",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<NodeId>,
    needs_grad: bool,
    grad: Vec<f64>,
}

/// Tape of ops; owns all intermediate values and gradients of one forward
/// pass. Build one per forward/backward cycle and drop it afterwards.
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), checked: false }
    }

    /// Graph that rejects NaN/Inf at every op boundary.
    pub fn new_checked() -> Self {
        Graph { nodes: Vec::new(), checked: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        let n = &self.nodes[id.0];
        if n.needs_grad && !n.grad.is_empty() {
            Some(&n.grad)
        } else {
            None
        }
    }

    /// Register an external tensor as a leaf. Gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        if self.checked && !t.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        Ok(self.push(t.clone(), Op::Leaf, vec![], t.requires_grad()))
    }

    /// Leaf that never tracks gradients (inputs, targets).
    pub fn input(&mut self, t: &Tensor) -> Result<NodeId> {
        if self.checked && !t.is_finite() {
            return Err(Error::NonFinite("input".into()));
        }
        let mut v = t.clone();
        if v.requires_grad() {
            v = Tensor::new(v.shape().to_vec(), v.data().to_vec())?;
        }
        Ok(self.push(v, Op::Leaf, vec![], false))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<NodeId>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, inputs, needs_grad, grad: Vec::new() });
        id
    }

    fn emit(&mut self, value: Tensor, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push(value, op, inputs, needs))
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.nodes[id.0].value.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what}: expected 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── Convolutions and resampling ──────────────────────────────────

    /// 1-D cross-channel convolution: input `[T x c_in]`, kernel
    /// `[tau x c_in x c_out]`, output `[T' x c_out]`. Same padding centers
    /// the kernel with zero fill; valid padding requires `tau <= T`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::Argument("conv1d: stride must be >= 1".into()));
        }
        let (t_in, c_in) = self.dims2(x, "conv1d input")?;
        let ks = self.nodes[kernel.0].value.shape();
        if ks.len() != 3 || ks[1] != c_in {
            return Err(Error::Dimension(format!(
                "conv1d kernel: expected [tau x {c_in} x c_out], got {ks:?}"
            )));
        }
        let (tau, c_out) = (ks[0], ks[2]);
        let t_out = conv_out_len(t_in, tau, stride, padding)?;
        let mut out = vec![0.0; t_out * c_out];
        let xd = self.nodes[x.0].value.data();
        let kd = self.nodes[kernel.0].value.data();
        let offset = conv_offset(tau, padding);
        for t in 0..t_out {
            let base = (t * stride) as isize - offset;
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for j in 0..tau {
                let src = base + j as isize;
                if src < 0 || src >= t_in as isize {
                    continue;
                }
                let xrow = &xd[src as usize * c_in..(src as usize + 1) * c_in];
                let kslab = &kd[j * c_in * c_out..(j + 1) * c_in * c_out];
                for (v, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kslab[v * c_out..(v + 1) * c_out];
                    for (o, kv) in krow.iter().enumerate() {
                        orow[o] += xv * kv;
                    }
                }
            }
        }
        self.emit(
            Tensor::new(vec![t_out, c_out], out)?,
            Op::Conv1d { stride, padding },
            vec![x, kernel],
        )
    }

    /// Per-channel convolution: input `[T x c]`, one `tau`-length kernel per
    /// channel (`[tau x c]`). Channel v of the output depends only on channel
    /// v of the input.
    pub fn channelwise_conv1d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::Argument("channelwise_conv1d: stride must be >= 1".into()));
        }
        let (t_in, c) = self.dims2(x, "channelwise_conv1d input")?;
        let ks = self.nodes[kernels.0].value.shape();
        if ks.len() != 2 || ks[1] != c {
            return Err(Error::Dimension(format!(
                "channelwise_conv1d kernels: expected [tau x {c}], got {ks:?}"
            )));
        }
        let tau = ks[0];
        let t_out = conv_out_len(t_in, tau, stride, padding)?;
        let mut out = vec![0.0; t_out * c];
        let xd = self.nodes[x.0].value.data();
        let kd = self.nodes[kernels.0].value.data();
        let offset = conv_offset(tau, padding);
        for t in 0..t_out {
            let base = (t * stride) as isize - offset;
            for j in 0..tau {
                let src = base + j as isize;
                if src < 0 || src >= t_in as isize {
                    continue;
                }
                let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                let krow = &kd[j * c..(j + 1) * c];
                let orow = &mut out[t * c..(t + 1) * c];
                for v in 0..c {
                    orow[v] += xrow[v] * krow[v];
                }
            }
        }
        self.emit(
            Tensor::new(vec![t_out, c], out)?,
            Op::ChannelwiseConv1d { stride, padding },
            vec![x, kernels],
        )
    }

    /// Decimation: keeps rows `0, d, 2d, ...`; output length `ceil(T/d)`.
    pub fn downsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 1 {
            return Err(Error::Argument("downsample: factor must be >= 1".into()));
        }
        let (t_in, c) = self.dims2(x, "downsample input")?;
        if t_in == 0 {
            return Err(Error::Degenerate("downsample: empty input".into()));
        }
        let t_out = t_in.div_ceil(factor);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; t_out * c];
        for t in 0..t_out {
            out[t * c..(t + 1) * c].copy_from_slice(&xd[t * factor * c..(t * factor + 1) * c]);
        }
        self.emit(Tensor::new(vec![t_out, c], out)?, Op::Downsample { factor }, vec![x])
    }

    /// Nearest-neighbor repetition by `factor`, resized to exactly `out_len`
    /// rows: row t reads source row `min(t / factor, T - 1)`.
    pub fn repeat_to(&mut self, x: NodeId, out_len: usize, factor: usize) -> Result<NodeId> {
        if factor < 1 || out_len < 1 {
            return Err(Error::Argument("repeat_to: factor and out_len must be >= 1".into()));
        }
        let (t_in, c) = self.dims2(x, "repeat_to input")?;
        if t_in == 0 {
            return Err(Error::Degenerate("repeat_to: empty input".into()));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; out_len * c];
        for t in 0..out_len {
            let src = (t / factor).min(t_in - 1);
            out[t * c..(t + 1) * c].copy_from_slice(&xd[src * c..(src + 1) * c]);
        }
        self.emit(Tensor::new(vec![out_len, c], out)?, Op::RepeatTo { factor }, vec![x])
    }

    /// Non-overlapping max pooling over time (window == stride); remainder
    /// rows that do not fill a window are dropped. Ties keep the earliest
    /// index.
    pub fn max_pool1d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        if window < 1 {
            return Err(Error::Argument("max_pool1d: window must be >= 1".into()));
        }
        let (t_in, c) = self.dims2(x, "max_pool1d input")?;
        let t_out = t_in / window;
        if t_out == 0 {
            return Err(Error::Dimension(format!(
                "max_pool1d: input length {t_in} shorter than window {window}"
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; t_out * c];
        let mut argmax = vec![0usize; t_out * c];
        for t in 0..t_out {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = t * window * c + ch;
                for r in 0..window {
                    let idx = (t * window + r) * c + ch;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_at = idx;
                    }
                }
                out[t * c + ch] = best;
                argmax[t * c + ch] = best_at;
            }
        }
        self.emit(
            Tensor::new(vec![t_out, c], out)?,
            Op::MaxPool1d { argmax },
            vec![x],
        )
    }

    // ── Elementwise and linear algebra ───────────────────────────────

    fn unary_map(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        self.emit(out, op, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_map(x, Op::Relu, |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_map(x, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_map(x, Op::Tanh, f64::tanh)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.emit(Tensor::new(shape, out)?, Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.emit(Tensor::new(shape, out)?, Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary_map(x, Op::Scale { c }, |a| a * c)
    }

    /// `[T x m] + [m]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, m) = self.dims2(x, "add_bias input")?;
        let bs = self.nodes[bias.0].value.shape();
        if bs != [m] {
            return Err(Error::Dimension(format!("add_bias: bias {bs:?} vs width {m}")));
        }
        let xd = self.nodes[x.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let out: Vec<f64> = xd.iter().enumerate().map(|(i, &v)| v + bd[i % m]).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.emit(Tensor::new(shape, out)?, Op::AddBias, vec![x, bias])
    }

    /// `[r x k] . [k x m] -> [r x m]`, or `[k] . [k x m] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (bk, m) = self.dims2(b, "matmul rhs")?;
        let ashape = self.nodes[a.0].value.shape().to_vec();
        let (r, k, vec_lhs) = match ashape.as_slice() {
            [r, k] => (*r, *k, false),
            [k] => (1, *k, true),
            s => return Err(Error::Dimension(format!("matmul lhs: expected 1-D or 2-D, got {s:?}"))),
        };
        if k != bk {
            return Err(Error::Dimension(format!("matmul: inner dims {k} vs {bk}")));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; r * m];
        for i in 0..r {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (j, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[j * m..(j + 1) * m];
                for (o, bv) in brow.iter().enumerate() {
                    orow[o] += av * bv;
                }
            }
        }
        let shape = if vec_lhs { vec![m] } else { vec![r, m] };
        self.emit(Tensor::new(shape, out)?, Op::Matmul, vec![a, b])
    }

    /// Concatenation along the last axis (rows must match for 2-D inputs).
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        match (sa.as_slice(), sb.as_slice()) {
            ([n1], [n2]) => {
                let mut out = Vec::with_capacity(n1 + n2);
                out.extend_from_slice(self.nodes[a.0].value.data());
                out.extend_from_slice(self.nodes[b.0].value.data());
                self.emit(Tensor::new(vec![n1 + n2], out)?, Op::Concat, vec![a, b])
            }
            ([r1, c1], [r2, c2]) if r1 == r2 => {
                let (r, c1, c2) = (*r1, *c1, *c2);
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let mut out = Vec::with_capacity(r * (c1 + c2));
                for i in 0..r {
                    out.extend_from_slice(&ad[i * c1..(i + 1) * c1]);
                    out.extend_from_slice(&bd[i * c2..(i + 1) * c2]);
                }
                self.emit(Tensor::new(vec![r, c1 + c2], out)?, Op::Concat, vec![a, b])
            }
            _ => Err(Error::Dimension(format!("concat: shapes {sa:?} vs {sb:?}"))),
        }
    }

    /// Column range of a 1-D or 2-D tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let xd = self.nodes[x.0].value.data();
        match shape.as_slice() {
            [n] => {
                if start + len > *n {
                    return Err(Error::Dimension(format!(
                        "slice_cols: range {start}..{} out of width {n}",
                        start + len
                    )));
                }
                let out = xd[start..start + len].to_vec();
                self.emit(Tensor::new(vec![len], out)?, Op::SliceCols { start, len }, vec![x])
            }
            [r, c] => {
                if start + len > *c {
                    return Err(Error::Dimension(format!(
                        "slice_cols: range {start}..{} out of width {c}",
                        start + len
                    )));
                }
                let mut out = Vec::with_capacity(r * len);
                for i in 0..*r {
                    out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
                }
                self.emit(Tensor::new(vec![*r, len], out)?, Op::SliceCols { start, len }, vec![x])
            }
            s => Err(Error::Dimension(format!("slice_cols: expected 1-D or 2-D, got {s:?}"))),
        }
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Argument("stack_rows: no rows".into()));
        }
        let m = match self.nodes[rows[0].0].value.shape() {
            [m] => *m,
            s => return Err(Error::Dimension(format!("stack_rows: expected vectors, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            let v = &self.nodes[r.0].value;
            if v.shape() != [m] {
                return Err(Error::Dimension(format!(
                    "stack_rows: row shape {:?} vs [{m}]",
                    v.shape()
                )));
            }
            out.extend_from_slice(v.data());
        }
        self.emit(Tensor::new(vec![rows.len(), m], out)?, Op::StackRows, rows.to_vec())
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                v.shape()
            )));
        }
        let out = Tensor::new(shape, v.data().to_vec())?;
        self.emit(out, Op::Reshape, vec![x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if v.numel() == 0 {
            return Err(Error::Degenerate("mean_all: empty tensor".into()));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.emit(Tensor::scalar(m), Op::MeanAll, vec![x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>();
        self.emit(Tensor::scalar(s), Op::SumAll, vec![x])
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean binary cross-entropy of scores in (0,1) against 0/1 targets.
    /// Scores are clamped at `BCE_CLAMP` away from the endpoints.
    pub fn bce_loss(&mut self, scores: NodeId, targets: &[f64]) -> Result<NodeId> {
        let v = &self.nodes[scores.0].value;
        if v.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "bce_loss: expected 1-D scores, got {:?}",
                v.shape()
            )));
        }
        if v.numel() != targets.len() {
            return Err(Error::Dimension(format!(
                "bce_loss: {} scores vs {} targets",
                v.numel(),
                targets.len()
            )));
        }
        if v.numel() == 0 {
            return Err(Error::Degenerate("bce_loss: empty scores".into()));
        }
        let n = v.numel() as f64;
        let mut total = 0.0;
        for (&y, &t) in v.data().iter().zip(targets) {
            let yc = y.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= t * yc.ln() + (1.0 - t) * (1.0 - yc).ln();
        }
        self.emit(
            Tensor::scalar(total / n),
            Op::Bce { targets: targets.to_vec() },
            vec![scores],
        )
    }

    /// Mean softmax cross-entropy of `[T x C]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (t, c) = self.dims2(logits, "softmax_cross_entropy logits")?;
        if labels.len() != t {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: {t} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "softmax_cross_entropy: label {bad} out of range 0..{c}"
            )));
        }
        if t == 0 {
            return Err(Error::Degenerate("softmax_cross_entropy: empty logits".into()));
        }
        let zd = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            let z = &zd[row * c..(row + 1) * c];
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = zmax + z.iter().map(|&v| (v - zmax).exp()).sum::<f64>().ln();
            total += lse - z[label];
        }
        self.emit(
            Tensor::scalar(total / t as f64),
            Op::SoftmaxCe { labels: labels.to_vec() },
            vec![logits],
        )
    }

    // ── Recurrent cells ──────────────────────────────────────────────

    /// One LSTM step. Gate pre-activations are `x.w_x + h.w_h + b` with the
    /// four gates packed as [input | forget | candidate | output] along the
    /// last axis. Returns (h', cell').
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        cell: NodeId,
        w_x: NodeId,
        w_h: NodeId,
        b: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (_, four_n) = self.dims2(w_x, "lstm_step w_x")?;
        if four_n % 4 != 0 {
            return Err(Error::Dimension("lstm_step: gate width not divisible by 4".into()));
        }
        let n = four_n / 4;
        let hs = self.nodes[h.0].value.shape();
        let cs = self.nodes[cell.0].value.shape();
        if hs != [n] || cs != [n] {
            return Err(Error::Dimension(format!(
                "lstm_step: state shapes {hs:?}/{cs:?} vs hidden width {n}"
            )));
        }
        let xa = self.matmul(x, w_x)?;
        let ha = self.matmul(h, w_h)?;
        let pre = self.add(xa, ha)?;
        let pre = self.add(pre, b)?;
        let i_gate = self.slice_cols(pre, 0, n)?;
        let i_gate = self.sigmoid(i_gate)?;
        let f_gate = self.slice_cols(pre, n, n)?;
        let f_gate = self.sigmoid(f_gate)?;
        let g_cand = self.slice_cols(pre, 2 * n, n)?;
        let g_cand = self.tanh(g_cand)?;
        let o_gate = self.slice_cols(pre, 3 * n, n)?;
        let o_gate = self.sigmoid(o_gate)?;
        let keep = self.mul(f_gate, cell)?;
        let write = self.mul(i_gate, g_cand)?;
        let cell_new = self.add(keep, write)?;
        let cell_act = self.tanh(cell_new)?;
        let h_new = self.mul(o_gate, cell_act)?;
        Ok((h_new, cell_new))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node; fills gradients of every node
    /// reachable from a gradient-tracking leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.shape() != [1] {
            return Err(Error::Argument(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            if n.needs_grad {
                n.grad = vec![0.0; n.value.numel()];
            } else {
                n.grad.clear();
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing upstream tracks gradients
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            self.step_backward(idx)?;
        }
        if self.checked {
            for n in &self.nodes {
                if n.needs_grad && n.grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", n.op.name())));
                }
            }
        }
        Ok(())
    }

    fn step_backward(&mut self, idx: usize) -> Result<()> {
        // Split borrows: take the grad out, put input grads back in.
        let go = std::mem::take(&mut self.nodes[idx].grad);
        let inputs = self.nodes[idx].inputs.clone();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv1d { stride, padding } => {
                let (stride, padding) = (*stride, *padding);
                let (x, k) = (inputs[0], inputs[1]);
                let (t_in, c_in) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let (tau, c_out) = {
                    let s = self.nodes[k.0].value.shape();
                    (s[0], s[2])
                };
                let t_out = self.nodes[idx].value.shape()[0];
                let offset = conv_offset(tau, padding);
                let need_dx = self.nodes[x.0].needs_grad;
                let need_dk = self.nodes[k.0].needs_grad;
                let mut dx = vec![0.0; if need_dx { t_in * c_in } else { 0 }];
                let mut dk = vec![0.0; if need_dk { tau * c_in * c_out } else { 0 }];
                {
                    let xd = self.nodes[x.0].value.data();
                    let kd = self.nodes[k.0].value.data();
                    for t in 0..t_out {
                        let base = (t * stride) as isize - offset;
                        let grow = &go[t * c_out..(t + 1) * c_out];
                        for j in 0..tau {
                            let src = base + j as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            let p = src as usize;
                            for v in 0..c_in {
                                let kbase = j * c_in * c_out + v * c_out;
                                if need_dx {
                                    let mut acc = 0.0;
                                    for o in 0..c_out {
                                        acc += grow[o] * kd[kbase + o];
                                    }
                                    dx[p * c_in + v] += acc;
                                }
                                if need_dk {
                                    let xv = xd[p * c_in + v];
                                    if xv != 0.0 {
                                        for o in 0..c_out {
                                            dk[kbase + o] += grow[o] * xv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_dx {
                    accumulate(&mut self.nodes[x.0].grad, &dx);
                }
                if need_dk {
                    accumulate(&mut self.nodes[k.0].grad, &dk);
                }
            }
            Op::ChannelwiseConv1d { stride, padding } => {
                let (stride, padding) = (*stride, *padding);
                let (x, k) = (inputs[0], inputs[1]);
                let (t_in, c) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let tau = self.nodes[k.0].value.shape()[0];
                let t_out = self.nodes[idx].value.shape()[0];
                let offset = conv_offset(tau, padding);
                let need_dx = self.nodes[x.0].needs_grad;
                let need_dk = self.nodes[k.0].needs_grad;
                let mut dx = vec![0.0; if need_dx { t_in * c } else { 0 }];
                let mut dk = vec![0.0; if need_dk { tau * c } else { 0 }];
                {
                    let xd = self.nodes[x.0].value.data();
                    let kd = self.nodes[k.0].value.data();
                    for t in 0..t_out {
                        let base = (t * stride) as isize - offset;
                        let grow = &go[t * c..(t + 1) * c];
                        for j in 0..tau {
                            let src = base + j as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            let p = src as usize;
                            for v in 0..c {
                                if need_dx {
                                    dx[p * c + v] += grow[v] * kd[j * c + v];
                                }
                                if need_dk {
                                    dk[j * c + v] += grow[v] * xd[p * c + v];
                                }
                            }
                        }
                    }
                }
                if need_dx {
                    accumulate(&mut self.nodes[x.0].grad, &dx);
                }
                if need_dk {
                    accumulate(&mut self.nodes[k.0].grad, &dk);
                }
            }
            Op::Downsample { factor } => {
                let factor = *factor;
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let c = self.nodes[x.0].value.shape()[1];
                    let t_out = self.nodes[idx].value.shape()[0];
                    for t in 0..t_out {
                        for ch in 0..c {
                            self.nodes[x.0].grad[t * factor * c + ch] += go[t * c + ch];
                        }
                    }
                }
            }
            Op::RepeatTo { factor } => {
                let factor = *factor;
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let (t_in, c) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    let out_len = self.nodes[idx].value.shape()[0];
                    for t in 0..out_len {
                        let src = (t / factor).min(t_in - 1);
                        for ch in 0..c {
                            self.nodes[x.0].grad[src * c + ch] += go[t * c + ch];
                        }
                    }
                }
            }
            Op::MaxPool1d { argmax, .. } => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let argmax = argmax.clone();
                    for (i, &src) in argmax.iter().enumerate() {
                        self.nodes[x.0].grad[src] += go[i];
                    }
                }
            }
            Op::Relu => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let mask: Vec<f64> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(&go)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut self.nodes[x.0].grad, &mask);
                }
            }
            Op::Sigmoid => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let d: Vec<f64> = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .zip(&go)
                        .map(|(&y, &g)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut self.nodes[x.0].grad, &d);
                }
            }
            Op::Tanh => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let d: Vec<f64> = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .zip(&go)
                        .map(|(&y, &g)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut self.nodes[x.0].grad, &d);
                }
            }
            Op::Add => {
                for &inp in &inputs {
                    if self.nodes[inp.0].needs_grad {
                        accumulate(&mut self.nodes[inp.0].grad, &go);
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.nodes[a.0].needs_grad {
                    let d: Vec<f64> = self.nodes[b.0]
                        .value
                        .data()
                        .iter()
                        .zip(&go)
                        .map(|(&bv, &g)| g * bv)
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &d);
                }
                if self.nodes[b.0].needs_grad {
                    let d: Vec<f64> = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(&go)
                        .map(|(&av, &g)| g * av)
                        .collect();
                    accumulate(&mut self.nodes[b.0].grad, &d);
                }
            }
            Op::Scale { c } => {
                let c = *c;
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let d: Vec<f64> = go.iter().map(|&g| g * c).collect();
                    accumulate(&mut self.nodes[x.0].grad, &d);
                }
            }
            Op::AddBias => {
                let (x, b) = (inputs[0], inputs[1]);
                if self.nodes[x.0].needs_grad {
                    accumulate(&mut self.nodes[x.0].grad, &go);
                }
                if self.nodes[b.0].needs_grad {
                    let m = self.nodes[b.0].value.numel();
                    for (i, &g) in go.iter().enumerate() {
                        self.nodes[b.0].grad[i % m] += g;
                    }
                }
            }
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (bk, m) = {
                    let s = self.nodes[b.0].value.shape();
                    (s[0], s[1])
                };
                let r = self.nodes[a.0].value.numel() / bk;
                if self.nodes[a.0].needs_grad {
                    let bd = self.nodes[b.0].value.data();
                    let mut da = vec![0.0; r * bk];
                    for i in 0..r {
                        let grow = &go[i * m..(i + 1) * m];
                        for j in 0..bk {
                            let brow = &bd[j * m..(j + 1) * m];
                            let mut acc = 0.0;
                            for o in 0..m {
                                acc += grow[o] * brow[o];
                            }
                            da[i * bk + j] += acc;
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.nodes[a.0].value.data();
                    let mut db = vec![0.0; bk * m];
                    for i in 0..r {
                        let grow = &go[i * m..(i + 1) * m];
                        for j in 0..bk {
                            let av = ad[i * bk + j];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[j * m..(j + 1) * m];
                            for o in 0..m {
                                drow[o] += av * grow[o];
                            }
                        }
                    }
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
            }
            Op::Concat => {
                let (a, b) = (inputs[0], inputs[1]);
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                match (sa.as_slice(), sb.as_slice()) {
                    ([n1], [_n2]) => {
                        if self.nodes[a.0].needs_grad {
                            accumulate(&mut self.nodes[a.0].grad, &go[..*n1]);
                        }
                        if self.nodes[b.0].needs_grad {
                            accumulate(&mut self.nodes[b.0].grad, &go[*n1..]);
                        }
                    }
                    ([r, c1], [_, c2]) => {
                        let w = c1 + c2;
                        if self.nodes[a.0].needs_grad {
                            for i in 0..*r {
                                for j in 0..*c1 {
                                    self.nodes[a.0].grad[i * c1 + j] += go[i * w + j];
                                }
                            }
                        }
                        if self.nodes[b.0].needs_grad {
                            for i in 0..*r {
                                for j in 0..*c2 {
                                    self.nodes[b.0].grad[i * c2 + j] += go[i * w + c1 + j];
                                }
                            }
                        }
                    }
                    _ => unreachable!("concat forward validated shapes"),
                }
            }
            Op::SliceCols { start, len } => {
                let (start, len) = (*start, *len);
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    match shape.as_slice() {
                        [_n] => {
                            for j in 0..len {
                                self.nodes[x.0].grad[start + j] += go[j];
                            }
                        }
                        [r, c] => {
                            for i in 0..*r {
                                for j in 0..len {
                                    self.nodes[x.0].grad[i * c + start + j] += go[i * len + j];
                                }
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::StackRows => {
                let m = self.nodes[idx].value.shape()[1];
                for (i, &inp) in inputs.iter().enumerate() {
                    if self.nodes[inp.0].needs_grad {
                        accumulate(&mut self.nodes[inp.0].grad, &go[i * m..(i + 1) * m]);
                    }
                }
            }
            Op::Reshape => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    accumulate(&mut self.nodes[x.0].grad, &go);
                }
            }
            Op::MeanAll => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let n = self.nodes[x.0].value.numel() as f64;
                    let g = go[0] / n;
                    for v in self.nodes[x.0].grad.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::SumAll => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let g = go[0];
                    for v in self.nodes[x.0].grad.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Bce { targets } => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let targets = targets.clone();
                    let n = targets.len() as f64;
                    let d: Vec<f64> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(&targets)
                        .map(|(&y, &t)| {
                            let yc = y.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            go[0] * (yc - t) / (yc * (1.0 - yc)) / n
                        })
                        .collect();
                    accumulate(&mut self.nodes[x.0].grad, &d);
                }
            }
            Op::SoftmaxCe { labels } => {
                let x = inputs[0];
                if self.nodes[x.0].needs_grad {
                    let labels = labels.clone();
                    let c = self.nodes[x.0].value.shape()[1];
                    let t = labels.len() as f64;
                    let zd = self.nodes[x.0].value.data().to_vec();
                    for (row, &label) in labels.iter().enumerate() {
                        let z = &zd[row * c..(row + 1) * c];
                        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = z.iter().map(|&v| (v - zmax).exp()).sum();
                        for j in 0..c {
                            let p = (z[j] - zmax).exp() / denom;
                            let ind = if j == label { 1.0 } else { 0.0 };
                            self.nodes[x.0].grad[row * c + j] += go[0] * (p - ind) / t;
                        }
                    }
                }
            }
        }
        self.nodes[idx].grad = go;
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_offset(tau: usize, padding: Padding) -> isize {
    match padding {
        Padding::Same => (tau / 2) as isize,
        Padding::Valid => 0,
    }
}

fn conv_out_len(t_in: usize, tau: usize, stride: usize, padding: Padding) -> Result<usize> {
    if tau < 1 {
        return Err(Error::Argument("conv: kernel length must be >= 1".into()));
    }
    match padding {
        Padding::Same => Ok(t_in.div_ceil(stride)),
        Padding::Valid => {
            if tau > t_in {
                return Err(Error::Dimension(format!(
                    "conv: kernel length {tau} exceeds input length {t_in} (valid padding)"
                )));
            }
            Ok((t_in - tau) / stride + 1)
        }
    }
}
