use super::kernels::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, sigmoid};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside this module.
///
/// `grad_out` has the shape of the op's output; the returned vector holds one
/// gradient buffer per input (in the order the inputs were passed to
/// [`Tape::custom`]), or `None` for inputs that need no gradient.
pub trait CustomBackward: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Log,
    Exp,
    Relu,
    Tanh,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, r: usize, c: usize },
    Binary { kind: Binary, a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Affine { a: Var, scale: f64 },
    Unary { kind: Unary, a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Reduce { kind: ReduceKind, a: Var, outer: usize, len: usize, inner: usize, argmax: Vec<usize> },
    Softmax { a: Var, log: bool, cols: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv1d { x: Var, kernel: Var, stride: usize, width: usize, d_in: usize, d_out: usize },
    PadRows { x: Var, before: usize, rows: usize, cols: usize },
    SliceCols { x: Var, start: usize, len: usize, cols: usize },
    Concat { parts: Vec<(Var, usize)>, rows: usize },
    Reshape { a: Var },
    OuterAdd { a: Var, b: Var, t: usize, u: usize, h: usize },
    GatherRows { table: Var, idx: Vec<usize>, cols: usize },
    GatherFlat { a: Var, idx: Vec<usize> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records the forward graph of one computation.
///
/// Nodes are appended in creation order, so every op's inputs precede it.
/// Gradients are only tracked for nodes that (transitively) depend on a leaf
/// created with `requires_grad = true`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn expect_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Contract(format!("{op}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_matrix("matmul", a)?;
        let (k2, n) = self.expect_matrix("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.expect_matrix("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], data: out }, rg, Op::Transpose { a, r, c }))
    }

    /// `x [T x D] + bias [D]`, bias added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.expect_matrix("add_row", x)?;
        if self.shape(bias) != [cols] {
            return Err(mismatch("add_row", self.value(x), self.value(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            out[r * cols..(r + 1) * cols].iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor { shape: vec![rows, cols], data: out }, rg, Op::AddRow { x, bias }))
    }

    /// `x W + b` for `x [T x D_in]`, `W [D_in x D_out]`, `b [D_out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(mismatch(name, ta, tb));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        if kind == Binary::Div && db.contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let ia = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let ib = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        let data: Vec<f64> = match kind {
            Binary::Add => (0..n).map(|i| ia(i) + ib(i)).collect(),
            Binary::Sub => (0..n).map(|i| ia(i) - ib(i)).collect(),
            Binary::Mul => (0..n).map(|i| ia(i) * ib(i)).collect(),
            Binary::Div => (0..n).map(|i| ia(i) / ib(i)).collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise `a / b`; any zero in `b` is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `scale * a + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, data }, rg, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let t = self.value(a);
        let src = t.data();
        let data: Vec<f64> = match kind {
            Unary::Sigmoid => src.iter().map(|&x| sigmoid(x)).collect(),
            Unary::Log => {
                if let Some(bad) = src.iter().find(|&&x| !(x > 0.0)) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("log of non-positive value {bad}"),
                    });
                }
                src.iter().map(|x| x.ln()).collect()
            }
            Unary::Exp => {
                let out: Vec<f64> = src.iter().map(|x| x.exp()).collect();
                if let Some(i) = out.iter().position(|v| !v.is_finite()) {
                    return Err(TensorError::Domain {
                        op: "exp",
                        detail: format!("exp overflow at input {}", src[i]),
                    });
                }
                out
            }
            Unary::Relu => src.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            Unary::Tanh => src.iter().map(|x| x.tanh()).collect(),
            Unary::Abs => src.iter().map(|x| x.abs()).collect(),
            Unary::Sqrt => {
                if let Some(bad) = src.iter().find(|&&x| x < 0.0 || x.is_nan()) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        detail: format!("sqrt of negative value {bad}"),
                    });
                }
                src.iter().map(|x| x.sqrt()).collect()
            }
        };
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Unary { kind, a }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a).expect("abs is total")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    /// Clamps into `[lo, hi]`; gradient is passed through only where the input
    /// lies inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, data }, rg, Op::Clamp { a, lo, hi })
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    // ---------------------------------------------------------------- reductions

    /// Reduces over `axis`, or over every element when `axis` is `None`
    /// (yielding a scalar). Max ties resolve to the lowest index.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, t.numel(), 1, vec![]),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(TensorError::AxisOutOfRange {
                        op: "reduce",
                        axis: ax,
                        rank: shape.len(),
                    });
                }
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut s = shape.to_vec();
                s.remove(ax);
                (outer, shape[ax], inner, s)
            }
        };
        if len == 0 {
            return Err(TensorError::Contract("reduce over an empty axis".into()));
        }
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / len as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = 0;
                        let mut best_v = src[o * len * inner + i];
                        for l in 1..len {
                            let v = src[(o * len + l) * inner + i];
                            if v > best_v {
                                best_v = v;
                                best = l;
                            }
                        }
                        out[o * inner + i] = best_v;
                        argmax[o * inner + i] = best;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape: out_shape, data: out },
            rg,
            Op::Reduce { kind, a, outer, len, inner, argmax },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceKind::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceKind::Mean, a, None).expect("full reduction")
    }

    fn softmax_impl(&mut self, a: Var, log: bool) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap_or(&1);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.chunks(cols).zip(out.chunks_mut(cols)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            if log {
                let lz = m + z.ln();
                dst.iter_mut().zip(row).for_each(|(d, v)| *d = v - lz);
            } else {
                dst.iter_mut().zip(row).for_each(|(d, v)| *d = (v - m).exp() / z);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, data: out }, rg, Op::Softmax { a, log, cols })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, true)
    }

    // ---------------------------------------------------------------- layers

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.expect_matrix("layer_norm", x)?;
        if self.shape(gain) != [d] {
            return Err(mismatch("layer_norm", self.value(x), self.value(gain)));
        }
        if self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", self.value(x), self.value(bias)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape: vec![rows, d], data: out },
            rg,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        ))
    }

    /// Valid (unpadded) convolution over the time axis:
    /// `x [T x D_in]`, `kernel [W x D_in x D_out]` → `[(T - W) / stride + 1 x D_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (t, d_in) = self.expect_matrix("conv1d", x)?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[1] != d_in {
            return Err(mismatch("conv1d", self.value(x), self.value(kernel)));
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv1d: stride must be >= 1".into()));
        }
        let (width, d_out) = (ks[0], ks[2]);
        if t < width {
            return Err(TensorError::SequenceTooShort {
                op: "conv1d",
                len: t,
                needed: width,
            });
        }
        let t_out = (t - width) / stride + 1;
        let src = self.value(x).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; t_out * d_out];
        for o in 0..t_out {
            let dst = &mut out[o * d_out..(o + 1) * d_out];
            for w in 0..width {
                let row = &src[(o * stride + w) * d_in..(o * stride + w + 1) * d_in];
                matmul_acc(row, &k[w * d_in * d_out..(w + 1) * d_in * d_out], dst, 1, d_in, d_out);
            }
        }
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor { shape: vec![t_out, d_out], data: out },
            rg,
            Op::Conv1d { x, kernel, stride, width, d_in, d_out },
        ))
    }

    /// Prepends `before` and appends `after` zero rows.
    pub fn pad_rows(&mut self, x: Var, before: usize, after: usize) -> Result<Var> {
        let (rows, cols) = self.expect_matrix("pad_rows", x)?;
        let mut out = vec![0.0; (rows + before + after) * cols];
        out[before * cols..(before + rows) * cols].copy_from_slice(self.value(x).data());
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor { shape: vec![rows + before + after, cols], data: out },
            rg,
            Op::PadRows { x, before, rows, cols },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.expect_matrix("slice_cols", x)?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: cols,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor { shape: vec![rows, len], data: out },
            rg,
            Op::SliceCols { x, start, len, cols },
        ))
    }

    /// Concatenates along the last axis. All parts are vectors, or all are
    /// matrices with the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rank = self.value(first).rank();
        let rows = if rank == 1 { 1 } else { self.value(first).rows() };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let ok = match rank {
                1 => t.rank() == 1,
                2 => t.rank() == 2 && t.rows() == rows,
                _ => false,
            };
            if !ok {
                return Err(mismatch("concat", self.value(first), t));
            }
            widths.push((p, t.cols()));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data: out }, rg, Op::Concat { parts: widths, rows }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Reshape { a }))
    }

    /// `a [T x H]`, `b [U x H]` → `[(T * U) x H]` with row `t * U + u` equal to `a_t + b_u`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, h) = self.expect_matrix("outer_add", a)?;
        let (u, h2) = self.expect_matrix("outer_add", b)?;
        if h != h2 {
            return Err(mismatch("outer_add", self.value(a), self.value(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; t * u * h];
        for i in 0..t {
            for j in 0..u {
                let dst = &mut out[(i * u + j) * h..(i * u + j + 1) * h];
                for k in 0..h {
                    dst[k] = da[i * h + k] + db[j * h + k];
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![t * u, h], data: out },
            rg,
            Op::OuterAdd { a, b, t, u, h },
        ))
    }

    /// Embedding lookup: rows `idx` of `table [V x D]` → `[idx.len() x D]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.expect_matrix("gather_rows", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: v,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor { shape: vec![idx.len(), d], data: out },
            rg,
            Op::GatherRows { table, idx: idx.to_vec(), cols: d },
        ))
    }

    /// Picks flat elements of `a` → `[idx.len()]`.
    pub fn gather_flat(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_flat",
                index: bad,
                len: n,
            });
        }
        let src = self.value(a).data();
        let out = idx.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape: vec![idx.len()], data: out },
            rg,
            Op::GatherFlat { a, idx: idx.to_vec() },
        ))
    }

    /// Records an externally computed op. `output` must already be the forward
    /// result of `rule` applied to `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    // ---------------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only leaves and requires_grad nodes keep their gradients.
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_a_bt_acc(g, self.value(*b).data(), &mut ga, *m, *n, *k);
                    accumulate_owned(&mut grads[a.0], ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_b_acc(self.value(*a).data(), g, &mut gb, *m, *k, *n);
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::Transpose { a, r, c } => {
                let mut ga = vec![0.0; r * c];
                for i in 0..*r {
                    for j in 0..*c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                for (side, this, other) in [(0, *a, tb), (1, *b, ta)] {
                    if !needs(this) {
                        continue;
                    }
                    let this_t = self.value(this);
                    let local: Vec<f64> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub if side == 0 => g.to_vec(),
                        Binary::Sub => g.iter().map(|v| -v).collect(),
                        Binary::Mul => {
                            let od = other.data();
                            g.iter()
                                .enumerate()
                                .map(|(i, gv)| gv * if od.len() == 1 { od[0] } else { od[i] })
                                .collect()
                        }
                        Binary::Div => {
                            let (na, nb) = (ta.data(), tb.data());
                            let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                            g.iter()
                                .enumerate()
                                .map(|(i, gv)| {
                                    let b = at(nb, i);
                                    if side == 0 {
                                        gv / b
                                    } else {
                                        -gv * at(na, i) / (b * b)
                                    }
                                })
                                .collect()
                        }
                    };
                    if this_t.numel() == 1 && local.len() != 1 {
                        accumulate(&mut grads[this.0], &[local.iter().sum()]);
                    } else {
                        accumulate_owned(&mut grads[this.0], local);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if needs(*bias) {
                    let cols = self.value(*bias).numel();
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate_owned(&mut grads[bias.0], gb);
                }
            }
            Op::Affine { a, scale } => {
                let ga = g.iter().map(|v| v * scale).collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = match kind {
                    Unary::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    Unary::Relu => g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    Unary::Sqrt => g
                        .iter()
                        .zip(out)
                        .map(|(g, &y)| if y > 0.0 { g * 0.5 / y } else { 0.0 })
                        .collect(),
                };
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Reduce { kind, a, outer, len, inner, argmax } => {
                let mut ga = vec![0.0; outer * len * inner];
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let f = if *kind == ReduceKind::Mean { 1.0 / *len as f64 } else { 1.0 };
                        for o in 0..*outer {
                            for l in 0..*len {
                                for i in 0..*inner {
                                    ga[(o * len + l) * inner + i] = g[o * inner + i] * f;
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let l = argmax[o * inner + i];
                                ga[(o * len + l) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Softmax { a, log, cols } => {
                let mut ga = vec![0.0; out.len()];
                for ((y, gr), dst) in out.chunks(*cols).zip(g.chunks(*cols)).zip(ga.chunks_mut(*cols)) {
                    if *log {
                        let s: f64 = gr.iter().sum();
                        for j in 0..*cols {
                            dst[j] = gr[j] - y[j].exp() * s;
                        }
                    } else {
                        let s: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            dst[j] = y[j] * (gr[j] - s);
                        }
                    }
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).numel();
                let rows = rstd.len();
                if needs(*gain) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate_owned(&mut grads[gain.0], gg);
                }
                if needs(*bias) {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate_owned(&mut grads[bias.0], gb);
                }
                if needs(*x) {
                    let gv = self.value(*gain).data();
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            gx[r * d + j] = rstd[r] * (dxh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                        }
                    }
                    accumulate_owned(&mut grads[x.0], gx);
                }
            }
            Op::Conv1d { x, kernel, stride, width, d_in, d_out } => {
                let t_out = out.len() / d_out;
                let kd = self.value(*kernel).data();
                let xd = self.value(*x).data();
                if needs(*x) {
                    let mut gx = vec![0.0; xd.len()];
                    for o in 0..t_out {
                        let go = &g[o * d_out..(o + 1) * d_out];
                        for w in 0..*width {
                            let r = o * stride + w;
                            matmul_a_bt_acc(
                                go,
                                &kd[w * d_in * d_out..(w + 1) * d_in * d_out],
                                &mut gx[r * d_in..(r + 1) * d_in],
                                1,
                                *d_out,
                                *d_in,
                            );
                        }
                    }
                    accumulate_owned(&mut grads[x.0], gx);
                }
                if needs(*kernel) {
                    let mut gk = vec![0.0; kd.len()];
                    for o in 0..t_out {
                        let go = &g[o * d_out..(o + 1) * d_out];
                        for w in 0..*width {
                            let r = o * stride + w;
                            matmul_at_b_acc(
                                &xd[r * d_in..(r + 1) * d_in],
                                go,
                                &mut gk[w * d_in * d_out..(w + 1) * d_in * d_out],
                                1,
                                *d_in,
                                *d_out,
                            );
                        }
                    }
                    accumulate_owned(&mut grads[kernel.0], gk);
                }
            }
            Op::PadRows { x, before, rows, cols } => {
                accumulate(&mut grads[x.0], &g[before * cols..(before + rows) * cols]);
            }
            Op::SliceCols { x, start, len, cols } => {
                let rows = g.len() / len.max(&1);
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate_owned(&mut grads[x.0], gx);
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate_owned(&mut grads[p.0], gp);
                    }
                    offset += w;
                }
            }
            Op::Reshape { a } => accumulate(&mut grads[a.0], g),
            Op::OuterAdd { a, b, t, u, h } => {
                if needs(*a) {
                    let mut ga = vec![0.0; t * h];
                    for i in 0..*t {
                        for j in 0..*u {
                            let src = &g[(i * u + j) * h..(i * u + j + 1) * h];
                            ga[i * h..(i + 1) * h].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    accumulate_owned(&mut grads[a.0], ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; u * h];
                    for i in 0..*t {
                        for j in 0..*u {
                            let src = &g[(i * u + j) * h..(i * u + j + 1) * h];
                            gb[j * h..(j + 1) * h].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    accumulate_owned(&mut grads[b.0], gb);
                }
            }
            Op::GatherRows { table, idx, cols } => {
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    gt[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g[k * cols..(k + 1) * cols])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate_owned(&mut grads[table.0], gt);
            }
            Op::GatherFlat { a, idx } => {
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
                accumulate_owned(&mut grads[a.0], ga);
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let local = rule.backward(&ins, &node.value, g);
                for (v, gi) in inputs.iter().zip(local) {
                    if let (true, Some(gi)) = (needs(*v), gi) {
                        accumulate_owned(&mut grads[v.0], gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let y = tape.matmul(p, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);

        let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(TensorError::Domain { op: "log", .. })));
        let big = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(big), Err(TensorError::Domain { op: "exp", .. })));
    }

    #[test]
    fn binary_rejects_non_scalar_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item(), 6.0);

        let m = tape.constant(Tensor::from_rows(&[vec![2.0, 4.0], vec![0.0, 0.0]]));
        let r = tape.reduce(ReduceKind::Mean, m, Some(0)).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0]);
        assert!(matches!(
            tape.reduce(ReduceKind::Sum, m, Some(2)),
            Err(TensorError::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn max_gradient_goes_to_lowest_tied_index() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 3.0, 3.0, 0.0]));
        let m = tape.reduce(ReduceKind::Max, x, None).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 3.0], vec![1.0, -1.0]]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!(close(&out[..2], &[0.0, 0.0], 0.0));
        assert!(close(&out[2..], &[1.0, -1.0], 1e-9));
    }

    #[test]
    fn conv1d_cases() {
        let mut tape = Tape::new();
        // W=1 identity kernel, stride 2 → every other frame.
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let eye = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv1d(x, eye, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 5.0, 6.0]);

        // T=3, W=2 averaging kernel over a single channel.
        let x = tape.constant(Tensor::from_rows(&[vec![1.0], vec![3.0], vec![7.0]]));
        let avg = tape.constant(Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap());
        let y = tape.conv1d(x, avg, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 5.0]);

        let k3 = tape.constant(Tensor::zeros(&[4, 1, 1]));
        assert!(matches!(
            tape.conv1d(x, k3, 1),
            Err(TensorError::SequenceTooShort { len: 3, needed: 4, .. })
        ));
    }

    #[test]
    fn backward_simple_rules() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }
}
