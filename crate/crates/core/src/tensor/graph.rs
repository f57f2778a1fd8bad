use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Pad2d {
        input: Var,
        pad: (usize, usize),
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: (usize, usize),
    },
    AddChannelBias(Var, Var),
    Reshape(Var),
    Transpose(Var),
    SwapAxes01(Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    MaxAxis {
        input: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NllRows {
        input: Var,
        labels: Vec<usize>,
    },
    BceWithLogits {
        logit: Var,
        target: f64,
    },
    SquaredError {
        pred: Var,
        target: f64,
    },
    /// Scalar output whose gradient w.r.t. `input` was computed in the
    /// forward pass.
    Precomputed {
        input: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of differentiable operations.
///
/// Nodes are appended in execution order, so the tape is topologically
/// sorted by construction. A graph supports a single [`Graph::backward`]
/// call; afterwards it only serves gradient queries.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    no_grad: bool,
}

/// Zero-initialized gradient buffer for `v`, or None if `v` does not need one.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never requests gradients for parameters. Used for
    /// inference; ops are still recorded but backward has nothing to do.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    /// False for [`Graph::inference`] graphs.
    pub fn records_grads(&self) -> bool {
        !self.no_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked when `requires_grad` is set.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let ng = requires_grad && !self.no_grad;
        self.push(t, Op::Leaf, ng)
    }

    /// Binds a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let ng = p.trainable && !self.no_grad;
        let v = self.push(p.tensor.clone(), Op::Param, ng);
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let nb = self.value(bias).len();
        if sx.len() != 2 || sx[1] != nb {
            return dim_err(format!("bias add {sx:?} + [{nb}]"));
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(x, bias), ng))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    // ---- convolution ----------------------------------------------------

    /// Zero-pads the two trailing axes of a `C x H x W` tensor.
    pub fn pad2d(&mut self, x: Var, pad: (usize, usize)) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return dim_err(format!("pad2d expects C x H x W, got {s:?}"));
        }
        if pad == (0, 0) {
            return Ok(x);
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (hp, wp) = (h + 2 * pad.0, w + 2 * pad.1);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * hp * wp];
        for ch in 0..c {
            for y in 0..h {
                let so = (ch * h + y) * w;
                let dst = (ch * hp + y + pad.0) * wp + pad.1;
                out[dst..dst + w].copy_from_slice(&src[so..so + w]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, hp, wp], out)?, Op::Pad2d { input: x, pad }, ng))
    }

    /// Valid cross-correlation of `C_in x H x W` input with
    /// `C_out x C_in x kh x kw` kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let si = self.shape(input);
        let sk = self.shape(kernel);
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return dim_err(format!("conv2d input {si:?} kernel {sk:?}"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return dim_err("conv2d stride must be positive");
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h || kw > w {
            return dim_err(format!("kernel {kh}x{kw} larger than input {h}x{w}"));
        }
        let ho = (h - kh) / stride.0 + 1;
        let wo = (w - kw) / stride.1 + 1;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            let oplane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wt = k[((o * cin + c) * kh + ki) * kw + kj];
                        for y in 0..ho {
                            let row = (c * h + y * stride.0 + ki) * w + kj;
                            let orow = &mut oplane[y * wo..(y + 1) * wo];
                            for (xo, ov) in orow.iter_mut().enumerate() {
                                *ov += wt * x[row + xo * stride.1];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(input) || self.ng(kernel);
        Ok(self.push(
            Tensor::new(vec![cout, ho, wo], out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
            },
            ng,
        ))
    }

    /// Adds a per-channel bias to a `C x H x W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.value(bias).len() != s[0] {
            return dim_err(format!("channel bias {:?} on {s:?}", self.shape(bias)));
        }
        let plane = s[1] * s[2];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / plane])
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor { shape: s, data }, Op::AddChannelBias(x, bias), ng))
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err(format!("transpose expects a matrix, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), ng))
    }

    /// `(a, b, c) -> (b, a, c)`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return dim_err(format!("swap_axes01 expects 3 axes, got {s:?}"));
        }
        let (a, b, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; a * b * c];
        for i in 0..a {
            for j in 0..b {
                let s0 = (i * b + j) * c;
                let d0 = (j * a + i) * c;
                out[d0..d0 + c].copy_from_slice(&src[s0..s0 + c]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![b, a, c], out)?, Op::SwapAxes01(x), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || count == 0 || start + count > s[0] {
            return dim_err(format!("slice rows {start}..{} of {s:?}", start + count));
        }
        let n = s[1];
        let data = self.value(x).data()[start * n..(start + count) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![count, n], data)?,
            Op::SliceRows { input: x, start },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || width == 0 || start + width > s[1] {
            return dim_err(format!("slice cols {start}..{} of {s:?}", start + width));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![m, width], data)?,
            Op::SliceCols { input: x, start },
            ng,
        ))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        let m = self.shape(first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return dim_err(format!("concat_cols part {s:?} with {m} rows"));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Stacks equal-length vectors (any shape with the same element count)
    /// into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return dim_err("stack of nothing");
        };
        let n = self.value(first).len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let t = self.value(r);
            if t.len() != n {
                return dim_err(format!("stack_rows: row of {} values, expected {n}", t.len()));
            }
            data.extend_from_slice(t.data());
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], data)?,
            Op::StackRows(rows.to_vec()),
            ng,
        ))
    }

    // ---- reductions -----------------------------------------------------

    /// Maximum along `axis`, removing it. On ties the first occurrence
    /// wins and receives the whole gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return dim_err(format!("axis {axis} out of range for {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for k in 1..len {
                    let idx = base + k * inner;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis { input: x, argmax }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::MeanAll(x), ng)
    }

    // ---- normalization and losses --------------------------------------

    fn rows_of(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err(format!("{what} expects a matrix, got {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rows_of(x, "softmax")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rows_of(x, "log_softmax")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::LogSoftmaxRows(x), ng))
    }

    /// Mean over rows of `-x[i, labels[i]]`.
    pub fn nll_rows(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.rows_of(x, "nll")?;
        if labels.len() != m {
            return dim_err(format!("{} labels for {m} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::SymbolOutOfAlphabet {
                symbol: bad,
                alphabet: n,
            });
        }
        let src = self.value(x).data();
        let v = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| src[i * n + l])
            .sum::<f64>()
            / m as f64;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(v),
            Op::NllRows {
                input: x,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Logistic cross-entropy of a single logit against a 0/1 target.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        if self.value(logit).len() != 1 {
            return dim_err(format!("bce expects one logit, got {:?}", self.shape(logit)));
        }
        let z = self.value(logit).item();
        let v = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let ng = self.ng(logit);
        Ok(self.push(Tensor::scalar(v), Op::BceWithLogits { logit, target }, ng))
    }

    pub fn squared_error(&mut self, pred: Var, target: f64) -> Result<Var> {
        if self.value(pred).len() != 1 {
            return dim_err(format!("squared error expects one value, got {:?}", self.shape(pred)));
        }
        let d = self.value(pred).item() - target;
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(d * d), Op::SquaredError { pred, target }, ng))
    }

    /// Records a scalar function of `input` whose gradient the caller
    /// already computed.
    pub fn precomputed(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return dim_err("precomputed gradient length mismatch");
        }
        let ng = self.ng(input);
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { input, grad }, ng))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        if !ls.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = out.shape()[1];
                if let Some(da) = slot(nodes, grads, *a) {
                    let bv = val(*b);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    let av = val(*a);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += x * y;
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    let n = db.len();
                    for (j, v) in g.iter().enumerate() {
                        db[j % n] += v;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d += gv * y;
                    }
                }
            }
            Op::Pad2d { input, pad } => {
                if let Some(dx) = slot(nodes, grads, *input) {
                    let s = nodes[input.0].value.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (hp, wp) = (h + 2 * pad.0, w + 2 * pad.1);
                    for ch in 0..c {
                        for y in 0..h {
                            let d0 = (ch * h + y) * w;
                            let s0 = (ch * hp + y + pad.0) * wp + pad.1;
                            for x in 0..w {
                                dx[d0 + x] += g[s0 + x];
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
            } => {
                let si = nodes[input.0].value.shape();
                let sk = nodes[kernel.0].value.shape();
                let (cin, h, w) = (si[0], si[1], si[2]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let xv = val(*input);
                let kv = val(*kernel);
                if let Some(dx) = slot(nodes, grads, *input) {
                    for o in 0..cout {
                        let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
                        for c in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let wt = kv[((o * cin + c) * kh + ki) * kw + kj];
                                    for y in 0..ho {
                                        let row = (c * h + y * stride.0 + ki) * w + kj;
                                        for xo in 0..wo {
                                            dx[row + xo * stride.1] += wt * gplane[y * wo + xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dk) = slot(nodes, grads, *kernel) {
                    for o in 0..cout {
                        let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
                        for c in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let mut s = 0.0;
                                    for y in 0..ho {
                                        let row = (c * h + y * stride.0 + ki) * w + kj;
                                        for xo in 0..wo {
                                            s += xv[row + xo * stride.1] * gplane[y * wo + xo];
                                        }
                                    }
                                    dk[((o * cin + c) * kh + ki) * kw + kj] += s;
                                }
                            }
                        }
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    let s = out.shape();
                    let plane = s[1] * s[2];
                    for (j, v) in g.iter().enumerate() {
                        db[j / plane] += v;
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let s = nodes[x.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::SwapAxes01(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let s = nodes[x.0].value.shape();
                    let (a, b, c) = (s[0], s[1], s[2]);
                    for p in 0..a {
                        for q in 0..b {
                            let d0 = (p * b + q) * c;
                            let s0 = (q * a + p) * c;
                            for r in 0..c {
                                dx[d0 + r] += g[s0 + r];
                            }
                        }
                    }
                }
            }
            Op::SliceRows { input, start } => {
                if let Some(dx) = slot(nodes, grads, *input) {
                    let n = out.shape()[1];
                    let off = start * n;
                    for (j, v) in g.iter().enumerate() {
                        dx[off + j] += v;
                    }
                }
            }
            Op::SliceCols { input, start } => {
                if let Some(dx) = slot(nodes, grads, *input) {
                    let n = nodes[input.0].value.shape()[1];
                    let (m, wd) = (out.shape()[0], out.shape()[1]);
                    for r in 0..m {
                        for c in 0..wd {
                            dx[r * n + start + c] += g[r * wd + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.shape()[0], out.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if let Some(dp) = slot(nodes, grads, p) {
                        for r in 0..m {
                            for c in 0..w {
                                dp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::StackRows(rows) => {
                let n = out.shape()[1];
                for (r, &v) in rows.iter().enumerate() {
                    if let Some(dv) = slot(nodes, grads, v) {
                        for c in 0..n {
                            dv[c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::MaxAxis { input, argmax } => {
                if let Some(dx) = slot(nodes, grads, *input) {
                    for (&idx, v) in argmax.iter().zip(g) {
                        dx[idx] += v;
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let c = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::SoftmaxRows(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let n = out.shape()[1];
                    let y = out.data();
                    for r in 0..out.shape()[0] {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] += ys[c] * (gs[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    let n = out.shape()[1];
                    let y = out.data();
                    for r in 0..out.shape()[0] {
                        let gs = &g[r * n..(r + 1) * n];
                        let total: f64 = gs.iter().sum();
                        for c in 0..n {
                            dx[r * n + c] += gs[c] - y[r * n + c].exp() * total;
                        }
                    }
                }
            }
            Op::NllRows { input, labels } => {
                if let Some(dx) = slot(nodes, grads, *input) {
                    let n = nodes[input.0].value.shape()[1];
                    let c = g[0] / labels.len() as f64;
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * n + l] -= c;
                    }
                }
            }
            Op::BceWithLogits { logit, target } => {
                if let Some(dx) = slot(nodes, grads, *logit) {
                    let z = nodes[logit.0].value.item();
                    dx[0] += g[0] * (sigmoid(z) - target);
                }
            }
            Op::SquaredError { pred, target } => {
                if let Some(dx) = slot(nodes, grads, *pred) {
                    let p = nodes[pred.0].value.item();
                    dx[0] += g[0] * 2.0 * (p - target);
                }
            }
            Op::Precomputed { input, grad } => {
                if let Some(dx) = slot(nodes, grads, *input) {
                    for (d, v) in dx.iter_mut().zip(grad) {
                        *d += g[0] * v;
                    }
                }
            }
        }
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it needed one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every bound parameter's gradient into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut bound: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        bound.sort_unstable_by_key(|(p, _)| *p);
        for (id, v) in bound {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, g);
            }
        }
    }

    /// Parameter gradients as `(id, grad)` pairs ordered by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .iter()
            .filter_map(|(&p, &v)| self.grad(v).map(|g| (p, g.to_vec())))
            .collect();
        out.sort_unstable_by_key(|(p, _)| *p);
        out
    }
}
