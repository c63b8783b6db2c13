//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the handles of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products into the leaves that
//! were created with [`Graph::param`]. Leaves created with
//! [`Graph::constant`] never receive gradients, which is how frozen layers
//! are expressed.
//!
//! Every op checks its output for NaN/Inf and returns
//! [`Error::NonFinite`] instead of letting them propagate.

use super::broadcast::{binary, reduce_to};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sigmoid,
    Abs,
    Powf(f64),
    Gelu,
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Unary, Var),
    SoftmaxLast(Var),
    SumAxis { x: Var, axis: usize, mean: bool },
    SumAll { x: Var, mean: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    RmsNorm { x: Var, gain: Var, eps: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Rotary { x: Var, positions: Vec<usize>, base: f64 },
    MaskedSoftmax { scores: Var, mask: Var, scale: f64 },
    KronMask { g: Var, temporal: Tensor },
    StraightThrough(Var),
    IndexSelect { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the `param` leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is a constant or does not reach
    /// the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when it is absent. Parameters that do
    /// not reach the loss are reported on the `log` warning channel.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                log::warn!("variable {} does not reach the loss; gradient is zero", v.0);
                Tensor::zeros(&self.shapes[v.0])
            }
        }
    }
}

/// `c = a·b + beta·c` with arbitrary strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every offset matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rotary_tables(positions: &[usize], dh: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = dh / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for k in 0..half {
            let theta = base.powf(-2.0 * k as f64 / dh as f64);
            let ang = p as f64 * theta;
            cos.push(ang.cos());
            sin.push(ang.sin());
        }
    }
    (cos, sin)
}

/// Large negative logit standing in for −∞ on blocked attention entries.
pub const MASK_NEG: f64 = -1e9;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- matmul

    /// `a: [.., m, k]` times `b: [k, n]` (shared) or `b: [.., k, n]` with the
    /// same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = matmul_forward(&self.nodes[a.0].value, &self.nodes[b.0].value)
            .ok_or_else(|| Error::shape("matmul", format!("{sa:?} x {sb:?}")))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    // ----------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Division; a zero divisor is a domain error (use [`Graph::div_eps`]
    /// for the guarded form).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&x| x == 0.0) {
            return Err(Error::domain("div", "zero divisor"));
        }
        let v = binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    /// `a / (b + eps)`.
    pub fn div_eps(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let d = self.add_scalar(b, eps)?;
        self.div(a, d)
    }

    fn unary(&mut self, name: &'static str, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        match kind {
            Unary::Log if xv.data().iter().any(|&v| v <= 0.0) => {
                return Err(Error::domain("log", "non-positive operand"));
            }
            Unary::Powf(p) => {
                if p.fract() != 0.0 && xv.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::domain("power", "negative base with fractional exponent"));
                }
                if p < 0.0 && xv.data().iter().any(|&v| v == 0.0) {
                    return Err(Error::domain("power", "zero base with negative exponent"));
                }
            }
            _ => {}
        }
        let v = xv.map(|a| match kind {
            Unary::Neg => -a,
            Unary::Scale(c) => c * a,
            Unary::AddScalar(c) => a + c,
            Unary::Exp => a.exp(),
            Unary::Log => a.ln(),
            Unary::Sigmoid => sigmoid(a),
            Unary::Abs => a.abs(),
            Unary::Powf(p) => a.powf(p),
            Unary::Gelu => gelu(a).0,
            Unary::Clamp(lo, hi) => a.clamp(lo, hi),
        });
        self.push(name, v, Op::Unary(kind, x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", Unary::AddScalar(c), x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", Unary::Log, x)
    }

    /// `log(x + eps)`.
    pub fn log_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let y = self.add_scalar(x, eps)?;
        self.log(y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", Unary::Sigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", Unary::Abs, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary("power", Unary::Powf(p), x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", Unary::Gelu, x)
    }

    /// Clamp; the gradient is passed only where the input lies strictly
    /// inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", Unary::Clamp(lo, hi), x)
    }

    // ------------------------------------------------------------ reductions

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax_lastdim", "scalar input"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("softmax_lastdim", v, Op::SoftmaxLast(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let src = xv.data();
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean && n > 0 {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut oshape = shape.clone();
        if keepdim {
            oshape[axis] = 1;
        } else {
            oshape.remove(axis);
        }
        let v = Tensor::from_parts(oshape, out);
        let name = if mean { "mean_axis" } else { "sum_axis" };
        self.push(name, v, Op::SumAxis { x, axis, mean }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { x, mean: false }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum() / xv.numel().max(1) as f64;
        self.push("mean_all", Tensor::scalar(s), Op::SumAll { x, mean: true }, &[x])
    }

    // --------------------------------------------------------------- layout

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        self.push(
            "permute",
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        self.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        let v = Tensor::from_parts(oshape, out);
        self.push("slice", v, Op::Slice { x, axis, start }, &[x])
    }

    // ----------------------------------------------------------- normalizers

    /// `x / sqrt(mean(x²) + eps) * gain` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] {
            return Err(Error::shape(
                "rmsnorm",
                format!("gain {:?} for feature size {d}", self.shape(gain)),
            ));
        }
        let g = self.value(gain).data().to_vec();
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = (ms + eps).sqrt();
            row.iter_mut().zip(&g).for_each(|(v, gi)| *v = *v / r * gi);
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("rmsnorm", v, Op::RmsNorm { x, gain, eps }, &[x, gain])
    }

    /// Layer normalization over the last axis with gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layernorm", "gain/bias must match feature size"));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let s = (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) / s * g[i] + b[i];
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("layernorm", v, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias])
    }

    // ------------------------------------------------------------- attention

    /// Rotary position embedding on `x: [.., T, dh]` with one position per
    /// row of the second-to-last axis; dimension pairs `(2k, 2k+1)` rotate by
    /// `pos · base^(−2k/dh)`.
    pub fn rotary(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != positions.len() || shape[r - 1] % 2 != 0 {
            return Err(Error::shape(
                "rotary",
                format!("{shape:?} with {} positions (head dim must be even)", positions.len()),
            ));
        }
        let (t, dh) = (shape[r - 2], shape[r - 1]);
        let (cos, sin) = rotary_tables(positions, dh, base);
        let mut out = self.value(x).data().to_vec();
        for block in out.chunks_mut(t * dh) {
            for (ti, row) in block.chunks_mut(dh).enumerate() {
                for k in 0..dh / 2 {
                    let (c, s) = (cos[ti * dh / 2 + k], sin[ti * dh / 2 + k]);
                    let (a, b) = (row[2 * k], row[2 * k + 1]);
                    row[2 * k] = a * c - b * s;
                    row[2 * k + 1] = a * s + b * c;
                }
            }
        }
        let v = Tensor::from_parts(shape, out);
        self.push(
            "rotary",
            v,
            Op::Rotary {
                x,
                positions: positions.to_vec(),
                base,
            },
            &[x],
        )
    }

    /// Row softmax of `(scores + M_add) / scale` where `M_add` is 0 on visible
    /// entries (`mask > 0`) and [`MASK_NEG`] on blocked ones; visible weights
    /// are additionally multiplied by the mask value, which is exactly 1 for
    /// a hard mask.
    ///
    /// `scores: [I, H, T, T]`; `mask: [I, T, T]` or `[T, T]` (broadcast over
    /// heads and instances). The mask gradient is that of the multiplicative
    /// relaxation `exp(score/scale)·mask / Σ`, so a straight-through mask
    /// receives a meaningful gradient.
    pub fn masked_softmax(&mut self, scores: Var, mask: Var, scale: f64) -> Result<Var> {
        let ss = self.shape(scores).to_vec();
        let ms = self.shape(mask).to_vec();
        if ss.len() != 4 || ss[2] != ss[3] {
            return Err(Error::shape("masked_softmax", format!("scores {ss:?}")));
        }
        let (inst, heads, t) = (ss[0], ss[1], ss[2]);
        let ok = ms == [t, t] || ms == [inst, t, t];
        if !ok || scale <= 0.0 {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask {ms:?} for scores {ss:?}"),
            ));
        }
        let per_inst = ms.len() == 3;
        let sv = self.value(scores).data();
        let mv = self.value(mask).data();
        let mut out = vec![0.0; sv.len()];
        for i in 0..inst {
            let mbase = if per_inst { i * t * t } else { 0 };
            for h in 0..heads {
                for r in 0..t {
                    let off = ((i * heads + h) * t + r) * t;
                    let mrow = &mv[mbase + r * t..mbase + (r + 1) * t];
                    let srow = &sv[off..off + t];
                    let orow = &mut out[off..off + t];
                    let mut mx = f64::NEG_INFINITY;
                    for k in 0..t {
                        let add = if mrow[k] > 0.0 { 0.0 } else { MASK_NEG };
                        orow[k] = (srow[k] + add) / scale;
                        mx = mx.max(orow[k]);
                    }
                    let mut sum = 0.0;
                    for k in 0..t {
                        orow[k] = (orow[k] - mx).exp() * mrow[k].max(0.0);
                        sum += orow[k];
                    }
                    if sum <= 0.0 {
                        return Err(Error::domain("masked_softmax", "fully masked attention row"));
                    }
                    orow.iter_mut().for_each(|v| *v /= sum);
                }
            }
        }
        let v = Tensor::from_parts(ss, out);
        self.push(
            "masked_softmax",
            v,
            Op::MaskedSoftmax {
                scores,
                mask,
                scale,
            },
            &[scores, mask],
        )
    }

    /// `G ⊗ T` for `g: [C, C]` or `[I, C, C]` and a constant `temporal: [N, N]`.
    pub fn kron_mask(&mut self, g: Var, temporal: &Tensor) -> Result<Var> {
        let gs = self.shape(g).to_vec();
        let ts = temporal.shape();
        let r = gs.len();
        if !(r == 2 || r == 3) || gs[r - 1] != gs[r - 2] || ts.len() != 2 || ts[0] != ts[1] {
            return Err(Error::shape("kron_mask", format!("{gs:?} ⊗ {ts:?}")));
        }
        let (c, n) = (gs[r - 1], ts[0]);
        let inst = if r == 3 { gs[0] } else { 1 };
        let cn = c * n;
        let gv = self.value(g).data();
        let tv = temporal.data();
        let mut out = vec![0.0; inst * cn * cn];
        for b in 0..inst {
            for i in 0..c {
                for m in 0..n {
                    for j in 0..c {
                        let gij = gv[(b * c + i) * c + j];
                        for k in 0..n {
                            out[b * cn * cn + (i * n + m) * cn + j * n + k] = gij * tv[m * n + k];
                        }
                    }
                }
            }
        }
        let shape = if r == 3 { vec![inst, cn, cn] } else { vec![cn, cn] };
        let v = Tensor::from_parts(shape, out);
        self.push(
            "kron_mask",
            v,
            Op::KronMask {
                g,
                temporal: temporal.clone(),
            },
            &[g],
        )
    }

    /// Forward value `hard`, backward gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", "hard/soft shape mismatch"));
        }
        self.push("straight_through", hard, Op::StraightThrough(soft), &[soft])
    }

    // -------------------------------------------------------------- routing

    /// Rows of `x` (axis 0) at the given indices.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("index_select", "scalar"))?;
        if idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("index_select", "index out of range"));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        let v = Tensor::from_parts(oshape, out);
        self.push(
            "index_select",
            v,
            Op::IndexSelect {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Inverse of [`Graph::index_select`]: a zero tensor with `rows` rows into
    /// which row `r` of `x` is added at row `idx[r]`.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&idx.len()) || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("scatter_rows", "index/row mismatch"));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * row];
        for (r, &i) in idx.iter().enumerate() {
            for k in 0..row {
                out[i * row + k] += src[r * row + k];
            }
        }
        let mut oshape = shape;
        oshape[0] = rows;
        let v = Tensor::from_parts(oshape, out);
        self.push(
            "scatter_rows",
            v,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    // ------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), g, wants(*a), wants(*b));
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, reduce_to(g, val(*a).shape()));
                }
                if wants(*b) {
                    acc(*b, reduce_to(g, val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, reduce_to(g, val(*a).shape()));
                }
                if wants(*b) {
                    acc(*b, reduce_to(g, val(*b).shape()).map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let t = binary("mul", g, val(*b), |x, y| x * y)?;
                    acc(*a, reduce_to(&t, val(*a).shape()));
                }
                if wants(*b) {
                    let t = binary("mul", g, val(*a), |x, y| x * y)?;
                    acc(*b, reduce_to(&t, val(*b).shape()));
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    let t = binary("div", g, val(*b), |x, y| x / y)?;
                    acc(*a, reduce_to(&t, val(*a).shape()));
                }
                if wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = binary("mul", g, &node.value, |x, y| x * y)?;
                    let t = binary("div", &q, val(*b), |x, y| -x / y)?;
                    acc(*b, reduce_to(&t, val(*b).shape()));
                }
            }
            Op::Unary(kind, x) => {
                let xv = val(*x).data();
                let yv = node.value.data();
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let (a, y) = (xv[i], yv[i]);
                        gi * match *kind {
                            Unary::Neg => -1.0,
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Exp => y,
                            Unary::Log => 1.0 / a,
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Abs => {
                                if a > 0.0 {
                                    1.0
                                } else if a < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Powf(p) => {
                                if p == 0.0 {
                                    0.0
                                } else {
                                    p * a.powf(p - 1.0)
                                }
                            }
                            Unary::Gelu => gelu(a).1,
                            Unary::Clamp(lo, hi) => {
                                if a > lo && a < hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                acc(*x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for ((orow, yrow), grow) in out
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        orow[k] = yrow[k] * (grow[k] - dot);
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::SumAxis { x, axis, mean } => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let scale = if *mean { 1.0 / n as f64 } else { 1.0 };
                let gd = g.data();
                let mut out = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            out[(o * n + a) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(shape.to_vec(), out));
            }
            Op::SumAll { x, mean } => {
                let xv = val(*x);
                let s = if *mean {
                    g.item() / xv.numel().max(1) as f64
                } else {
                    g.item()
                };
                acc(*x, Tensor::full(xv.shape(), s));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, g.permute(&inv)?);
            }
            Op::Reshape(x) => {
                acc(*x, g.clone().reshape(val(*x).shape())?);
            }
            Op::Concat { xs, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let vs = val(v).shape().to_vec();
                    let len = vs[*axis];
                    if wants(v) {
                        let mut out = Vec::with_capacity(val(v).numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        acc(v, Tensor::from_parts(vs, out));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let n = shape[*axis];
                let len = g.shape()[*axis];
                let mut out = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*x, Tensor::from_parts(shape, out));
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = val(*x);
                let gn = val(*gain).data();
                let d = gn.len();
                let mut dx = vec![0.0; xv.numel()];
                let mut dg = vec![0.0; d];
                for ((xrow, grow), dxrow) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let ms = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let r = (ms + eps).sqrt();
                    let mut dot = 0.0;
                    for k in 0..d {
                        let xh = xrow[k] / r;
                        dg[k] += grow[k] * xh;
                        dot += grow[k] * gn[k] * xh;
                    }
                    dot /= d as f64;
                    for k in 0..d {
                        dxrow[k] = (grow[k] * gn[k] - xrow[k] / r * dot) / r;
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                acc(*gain, Tensor::from_parts(vec![d], dg));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let gn = val(*gain).data();
                let d = gn.len();
                let mut dx = vec![0.0; xv.numel()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for ((xrow, grow), dxrow) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let mu = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let s = (var + eps).sqrt();
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for k in 0..d {
                        let xh = (xrow[k] - mu) / s;
                        dg[k] += grow[k] * xh;
                        db[k] += grow[k];
                        let dxh = grow[k] * gn[k];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for k in 0..d {
                        let xh = (xrow[k] - mu) / s;
                        dxrow[k] = (grow[k] * gn[k] - mean_dxh - xh * mean_dxh_xh) / s;
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                acc(*gain, Tensor::from_parts(vec![d], dg));
                acc(*bias, Tensor::from_parts(vec![d], db));
            }
            Op::Rotary { x, positions, base } => {
                let shape = g.shape();
                let r = shape.len();
                let (t, dh) = (shape[r - 2], shape[r - 1]);
                let (cos, sin) = rotary_tables(positions, dh, *base);
                let mut out = g.data().to_vec();
                for block in out.chunks_mut(t * dh) {
                    for (ti, row) in block.chunks_mut(dh).enumerate() {
                        for k in 0..dh / 2 {
                            let (c, s) = (cos[ti * dh / 2 + k], sin[ti * dh / 2 + k]);
                            let (a, b) = (row[2 * k], row[2 * k + 1]);
                            row[2 * k] = a * c + b * s;
                            row[2 * k + 1] = -a * s + b * c;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(shape.to_vec(), out));
            }
            Op::MaskedSoftmax {
                scores,
                mask,
                scale,
            } => {
                let ss = val(*scores).shape().to_vec();
                let (inst, heads, t) = (ss[0], ss[1], ss[2]);
                let mshape = val(*mask).shape().to_vec();
                let per_inst = mshape.len() == 3;
                let sv = val(*scores).data();
                let mv = val(*mask).data();
                let y = node.value.data();
                let gd = g.data();
                let want_s = wants(*scores);
                let want_m = wants(*mask);
                let mut ds = if want_s { vec![0.0; sv.len()] } else { Vec::new() };
                let mut dm = if want_m { vec![0.0; mv.len()] } else { Vec::new() };
                for i in 0..inst {
                    let mbase = if per_inst { i * t * t } else { 0 };
                    for h in 0..heads {
                        for r in 0..t {
                            let off = ((i * heads + h) * t + r) * t;
                            let mrow = &mv[mbase + r * t..mbase + (r + 1) * t];
                            let dot: f64 = (0..t).map(|k| gd[off + k] * y[off + k]).sum();
                            if want_s {
                                for k in 0..t {
                                    ds[off + k] = y[off + k] * (gd[off + k] - dot) / scale;
                                }
                            }
                            if want_m {
                                // exp(score/scale - max) without the additive
                                // mask, normalised by the masked row sum
                                let mut mx = f64::NEG_INFINITY;
                                for k in 0..t {
                                    if mrow[k] > 0.0 {
                                        mx = mx.max(sv[off + k] / scale);
                                    }
                                }
                                let e: Vec<f64> = (0..t)
                                    .map(|k| (sv[off + k] / scale - mx).min(60.0).exp())
                                    .collect();
                                let w: f64 = (0..t).map(|k| e[k] * mrow[k].max(0.0)).sum();
                                for k in 0..t {
                                    dm[mbase + r * t + k] += (gd[off + k] - dot) * e[k] / w;
                                }
                            }
                        }
                    }
                }
                if want_s {
                    acc(*scores, Tensor::from_parts(ss, ds));
                }
                if want_m {
                    acc(*mask, Tensor::from_parts(mshape, dm));
                }
            }
            Op::KronMask { g: gv, temporal } => {
                let gs = val(*gv).shape().to_vec();
                let r = gs.len();
                let c = gs[r - 1];
                let n = temporal.shape()[0];
                let inst = if r == 3 { gs[0] } else { 1 };
                let cn = c * n;
                let tv = temporal.data();
                let gd = g.data();
                let mut out = vec![0.0; inst * c * c];
                for b in 0..inst {
                    for i in 0..c {
                        for j in 0..c {
                            let mut s = 0.0;
                            for m in 0..n {
                                for k in 0..n {
                                    s += gd[b * cn * cn + (i * n + m) * cn + j * n + k]
                                        * tv[m * n + k];
                                }
                            }
                            out[(b * c + i) * c + j] = s;
                        }
                    }
                }
                acc(*gv, Tensor::from_parts(gs, out));
            }
            Op::StraightThrough(soft) => acc(*soft, g.clone()),
            Op::IndexSelect { x, idx } => {
                let shape = val(*x).shape().to_vec();
                let row: usize = shape[1..].iter().product();
                let mut out = vec![0.0; val(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..row {
                        out[i * row + k] += g.data()[r * row + k];
                    }
                }
                acc(*x, Tensor::from_parts(shape, out));
            }
            Op::ScatterRows { x, idx } => {
                let shape = val(*x).shape().to_vec();
                let row: usize = shape[1..].iter().product();
                let mut out = Vec::with_capacity(val(*x).numel());
                for &i in idx {
                    out.extend_from_slice(&g.data()[i * row..(i + 1) * row]);
                }
                acc(*x, Tensor::from_parts(shape, out));
            }
        }
        Ok(())
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Option<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return None;
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != kb {
        return None;
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut shape = sa[..sa.len() - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![0.0; batch * m * n];
    if sb.len() == 2 {
        gemm(batch * m, k, n, a.data(), k, 1, b.data(), n, 1, &mut out, 0.0);
    } else {
        if sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return None;
        }
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                k,
                1,
                &b.data()[i * k * n..],
                n,
                1,
                &mut out[i * m * n..],
                0.0,
            );
        }
    }
    Some(Tensor::from_parts(shape, out))
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let mut ga = want_a.then(|| vec![0.0; a.numel()]);
    let mut gb = want_b.then(|| vec![0.0; b.numel()]);
    if sb.len() == 2 {
        let rows = batch * m;
        if let Some(ga) = ga.as_mut() {
            // dA = dC · Bᵀ
            gemm(rows, n, k, g.data(), n, 1, b.data(), 1, n, ga, 0.0);
        }
        if let Some(gb) = gb.as_mut() {
            // dB = Aᵀ · dC
            gemm(k, rows, n, a.data(), 1, k, g.data(), n, 1, gb, 0.0);
        }
    } else {
        for i in 0..batch {
            let gi = &g.data()[i * m * n..];
            if let Some(ga) = ga.as_mut() {
                gemm(m, n, k, gi, n, 1, &b.data()[i * k * n..], 1, n, &mut ga[i * m * k..], 0.0);
            }
            if let Some(gb) = gb.as_mut() {
                gemm(k, m, n, &a.data()[i * m * k..], 1, k, gi, n, 1, &mut gb[i * k * n..], 0.0);
            }
        }
    }
    (
        ga.map(|d| Tensor::from_parts(sa.to_vec(), d)),
        gb.map(|d| Tensor::from_parts(sb.to_vec(), d)),
    )
}
