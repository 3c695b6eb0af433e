use std::borrow::Cow;

use super::conv::{self, Padding};
use super::{axis_extents, matmul_raw, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Backward rule for an operation defined outside the tape core.
///
/// `inputs` are the operand values in registration order, `output` the
/// forward result and `grad` the upstream gradient (same length as
/// `output`). Return one buffer per input; `None` where `needs[i]` is false
/// or the input has no gradient.
pub trait Backward {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulScalarVar { x: Var, s: Var },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumAxis { x: Var, outer: usize, n: usize, inner: usize },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    Narrow { x: Var, outer: usize, n: usize, inner: usize, start: usize, len: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Expand { x: Var, outer: usize, n: usize, inner: usize },
    Pick { x: Var, index: usize },
    LayerNorm { x: Var, outer: usize, n: usize, inner: usize, eps: f64 },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSumExp { x: Var, outer: usize, n: usize, inner: usize },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Conv2d { x: Var, k: Var, dims: conv::Conv2dDims },
    Conv1d { x: Var, k: Var, channels: usize, len: usize, width: usize, padding: Padding },
    Custom { inputs: Vec<Var>, rule: Box<dyn Backward> },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations; replaying it in reverse yields gradients.
///
/// Parameters may be borrowed for the tape's lifetime so a forward pass does
/// not copy model weights.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the value did not influence the loss.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor { shape: shape.clone(), data: g.to_vec() },
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `x·0` is NaN exactly when `x` is infinite or NaN, so one branch-free
/// reduction checks a whole buffer.
pub(crate) fn all_finite(values: &[f64]) -> bool {
    values.iter().fold(0.0, |acc, &v| acc + v * 0.0) == 0.0
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Result<Var> {
        if !all_finite(&value) {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut requires_grad = false;
        self.for_each_input(&op, |v| requires_grad |= self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), shape, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn for_each_input(&self, op: &Op, mut f: impl FnMut(Var)) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, .. } | Op::Conv2d { x: a, k: b, .. } | Op::Conv1d { x: a, k: b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalarVar { x: a, s: b } => {
                f(*a);
                f(*b);
            }
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Silu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::SumAxis { x, .. }
            | Op::Transpose { x, .. }
            | Op::Narrow { x, .. }
            | Op::Expand { x, .. }
            | Op::Pick { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::GlobalMaxPool { x, .. } => f(*x),
            Op::Concat { parts, .. } => parts.iter().for_each(|(v, _)| f(*v)),
            Op::Custom { inputs, .. } => inputs.iter().copied().for_each(f),
        }
    }

    // ---- leaves ----

    /// Leaf owning its data. NaN/Inf are allowed in leaves; ops reject
    /// non-finite results.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t.data),
            shape: t.shape,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing a parameter tensor.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(&t.data),
            shape: t.shape.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor { shape: self.shape(v).to_vec(), data: self.value(v).to_vec() }
    }

    /// Scalar value of a one-element var.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, p);
        self.push("matmul", out, vec![m, p], Op::MatMul { a, b, m, k, p })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        self.push("transpose", out, vec![cols, rows], Op::Transpose { x, rows, cols })
    }

    // ---- elementwise binary ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        self.push("add", out, shape, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        self.push("sub", out, shape, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("hadamard", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        self.push("hadamard", out, shape, Op::Mul(a, b))
    }

    /// Sum of several same-shape values.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| shape_err("add_n", "no operands"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", out, shape, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", out, shape, Op::Shift(x))
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar", out, shape, Op::MulScalarVar { x, s })
    }

    // ---- elementwise unary ----

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, out, shape, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    // ---- reductions and reshaping ----

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![s], Vec::new(), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("sum_axis", self.shape(x), axis)?;
        let mut shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_extents(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &v[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        shape.remove(axis);
        self.push("sum_axis", out, shape, Op::SumAxis { x, outer, n, inner })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", self.shape(x), axis)?;
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", out, shape.to_vec(), Op::Reshape(x))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis("narrow", self.shape(x), axis)?;
        let mut shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(shape_err("narrow", format!("{start}+{len} exceeds axis of {}", shape[axis])));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        shape[axis] = len;
        self.push("narrow", out, shape, Op::Narrow { x, outer, n, inner, start, len })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = vars.first().ok_or_else(|| shape_err("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        let parts: Vec<(Var, usize)> = vars.iter().map(|&v| (v, self.shape(v)[axis])).collect();
        for o in 0..outer {
            for &(v, n) in &parts {
                out.extend_from_slice(&self.value(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", out, shape, Op::Concat { parts, outer, inner })
    }

    /// Insert a new axis of length `n` at position `axis`, replicating `x`.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(shape_err("expand", format!("axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&v[o * inner..(o + 1) * inner]);
            }
        }
        shape.insert(axis, n);
        self.push("expand", out, shape, Op::Expand { x, outer, n, inner })
    }

    /// Single element at flat `index`, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .get(index)
            .ok_or_else(|| shape_err("pick", format!("index {index} out of range")))?;
        self.push("pick", vec![v], Vec::new(), Op::Pick { x, index })
    }

    // ---- normalisation ----

    /// Normalise to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        check_axis("layer_norm", self.shape(x), axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_extents(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| v[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (v[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[idx(j)] = (v[idx(j)] - mean) * inv;
                }
            }
        }
        self.push("layer_norm", out, shape, Op::LayerNorm { x, outer, n, inner, eps })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(x), axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_extents(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| v[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (v[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        self.push("softmax", out, shape, Op::Softmax { x, outer, n, inner })
    }

    /// `log Σ exp` along `axis`, with max subtraction; the axis is removed.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("logsumexp", self.shape(x), axis)?;
        let mut shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_extents(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                out[o * inner + i] = logsumexp_slice((0..n).map(|j| v[idx(j)]));
            }
        }
        shape.remove(axis);
        self.push("logsumexp", out, shape, Op::LogSumExp { x, outer, n, inner })
    }

    /// Maximum over the spatial extent of a `[C×H×W]` map, giving `[C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err("global_max_pool", format!("expected [C,H,W], got {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &v[ch * hw..(ch + 1) * hw];
            let (best, val) = plane
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
            out.push(val);
            argmax.push(ch * hw + best);
        }
        self.push("global_max_pool", out, vec![c], Op::GlobalMaxPool { x, argmax })
    }

    // ---- convolutions ----

    /// Same-padded 2-D cross-correlation of `x[C_in×H×W]` with
    /// `kernels[C_out×C_in×k_h×k_w]`. Kernel extents must be odd.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let dims = conv::Conv2dDims::new(self.shape(x), self.shape(k))?;
        let out = conv::conv2d_forward(self.value(x), self.value(k), &dims);
        self.push("conv2d", out, vec![dims.c_out, dims.h, dims.w], Op::Conv2d { x, k, dims })
    }

    /// Depthwise 1-D convolution of `x[C×L]` with `kernel[C×w]`; tap `j`
    /// weights the sample `j` steps earlier (shifted by the padding mode).
    pub fn conv1d(&mut self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 2 || sk.len() != 2 || sx[0] != sk[0] || sk[1] == 0 {
            return Err(shape_err("conv1d", format!("x {sx:?}, kernel {sk:?}")));
        }
        let (channels, len, width) = (sx[0], sx[1], sk[1]);
        let out = conv::conv1d_forward(self.value(x), self.value(k), channels, len, width, padding);
        self.push("conv1d", out, vec![channels, len], Op::Conv1d { x, k, channels, len, width, padding })
    }

    // ---- extension point ----

    /// Record an operation computed outside the tape with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Vec<f64>,
        shape: Vec<usize>,
        rule: Box<dyn Backward>,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(shape_err(rule.name(), format!("output shape {shape:?} vs {} values", value.len())));
        }
        let name = rule.name();
        self.push(name, value, shape, Op::Custom { inputs: inputs.to_vec(), rule })
    }

    // ---- reverse pass ----

    /// Propagate gradients from a scalar `loss` back to every tracked value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.shape.clone()).collect() })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, p } => {
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let bv = self.value(b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * p..(i + 1) * p];
                        for kk in 0..k {
                            da[i * k + kk] = grow.iter().zip(&bv[kk * p..(kk + 1) * p]).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, a, da);
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let av = self.value(a);
                    let mut db = vec![0.0; k * p];
                    for i in 0..m {
                        let grow = &g[i * p..(i + 1) * p];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[kk * p..(kk + 1) * p].iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    accumulate(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, d);
                }
                if self.needs(b) {
                    let d = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, d);
                }
            }
            &Op::Scale(x, c) => accumulate(grads, x, g.iter().map(|v| v * c).collect()),
            &Op::Shift(x) | &Op::Reshape(x) => accumulate(grads, x, g.to_vec()),
            &Op::MulScalarVar { x, s } => {
                let sv = self.value(s)[0];
                if self.needs(x) {
                    accumulate(grads, x, g.iter().map(|v| v * sv).collect());
                }
                if self.needs(s) {
                    let d = g.iter().zip(self.value(x)).map(|(a, b)| a * b).sum();
                    accumulate(grads, s, vec![d]);
                }
            }
            &Op::Relu(x) => {
                let d = g.iter().zip(self.value(x)).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = g.iter().zip(out.iter()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                accumulate(grads, x, d);
            }
            &Op::Softplus(x) => {
                let d = g.iter().zip(self.value(x)).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                accumulate(grads, x, d);
            }
            &Op::Silu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, x, d);
            }
            &Op::Exp(x) => accumulate(grads, x, g.iter().zip(out.iter()).map(|(a, b)| a * b).collect()),
            &Op::Log(x) => accumulate(grads, x, g.iter().zip(self.value(x)).map(|(a, b)| a / b).collect()),
            &Op::Sum(x) => {
                let n = self.value(x).len();
                accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::SumAxis { x, outer, n, inner } => {
                let mut d = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, x, d);
            }
            &Op::Transpose { x, rows, cols } => {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] = g[c * rows + r];
                    }
                }
                accumulate(grads, x, d);
            }
            &Op::Narrow { x, outer, n, inner, start, len } => {
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    d[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, x, d);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, n) in parts {
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + n * inner]);
                        }
                        accumulate(grads, v, d);
                    }
                    offset += n;
                }
            }
            &Op::Expand { x, outer, n, inner } => {
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (a, b) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                accumulate(grads, x, d);
            }
            &Op::Pick { x, index } => {
                let mut d = vec![0.0; self.value(x).len()];
                d[index] = g[0];
                accumulate(grads, x, d);
            }
            &Op::LayerNorm { x, outer, n, inner, eps } => {
                let v = self.value(x);
                let mut d = vec![0.0; v.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mean = (0..n).map(|j| v[idx(j)]).sum::<f64>() / n as f64;
                        let var = (0..n).map(|j| (v[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gm = (0..n).map(|j| g[idx(j)]).sum::<f64>() / n as f64;
                        let gy = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[idx(j)] = inv * (g[idx(j)] - gm - out[idx(j)] * gy);
                        }
                    }
                }
                accumulate(grads, x, d);
            }
            &Op::Softmax { x, outer, n, inner } => {
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, x, d);
            }
            &Op::LogSumExp { x, outer, n, inner } => {
                let v = self.value(x);
                let mut d = vec![0.0; v.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = out[o * inner + i];
                        let gv = g[o * inner + i];
                        for j in 0..n {
                            let k = (o * n + j) * inner + i;
                            d[k] = gv * (v[k] - lse).exp();
                        }
                    }
                }
                accumulate(grads, x, d);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    d[idx] += gv;
                }
                accumulate(grads, *x, d);
            }
            Op::Conv2d { x, k, dims } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                if self.needs(*x) {
                    accumulate(grads, *x, conv::conv2d_grad_input(g, kv, dims));
                }
                if self.needs(*k) {
                    accumulate(grads, *k, conv::conv2d_grad_kernel(g, xv, dims));
                }
            }
            &Op::Conv1d { x, k, channels, len, width, padding } => {
                let (dx, dk) =
                    conv::conv1d_backward(g, self.value(x), self.value(k), channels, len, width, padding);
                if self.needs(x) {
                    accumulate(grads, x, dx);
                }
                if self.needs(k) {
                    accumulate(grads, k, dk);
                }
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let results = rule.backward(&values, out, g, &needs);
                for ((&v, need), d) in inputs.iter().zip(needs).zip(results) {
                    if let (true, Some(d)) = (need, d) {
                        debug_assert_eq!(d.len(), self.value(v).len(), "{} gradient length", rule.name());
                        accumulate(grads, v, d);
                    }
                }
            }
        }
    }
}

/// Overflow-safe `log Σ exp`. An all `-inf` input yields `-inf`.
pub fn logsumexp_slice(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}
