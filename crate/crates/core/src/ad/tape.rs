//! Wengert-list reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its value and enough saved
//! state to apply its vector-Jacobian product. `backward` walks the list once,
//! newest to oldest. Gradients are kept only for leaves created with
//! [`Tape::param`]; intermediate gradients are dropped as soon as they have been
//! pushed to their inputs.

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Sqrt,
    Neg,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Matmul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    AddBias(Var, Var),
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    Conv2d(Box<ConvSaved>),
    Bilinear(Box<BilinearSaved>),
    MeanVar(Box<MeanVarSaved>),
    Composite(Box<CompositeSaved>),
}

struct ConvSaved {
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: ConvGeom,
    cols: Vec<f64>,
}

struct BilinearSaved {
    map: Var,
    coords: Var,
    /// Per sample: `None` when invalid, else (x0, y0, x1, y1, fx, fy, dx_live, dy_live).
    taps: Vec<Option<BilinearTap>>,
}

#[derive(Clone, Copy)]
struct BilinearTap {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_live: bool,
    y_live: bool,
}

struct MeanVarSaved {
    inputs: Vec<Var>,
    weights: Vec<f64>,
}

struct CompositeSaved {
    sigma: Var,
    colors: Var,
    deltas: Vec<f64>,
    /// Transmittance `T_0..=T_K` per ray, `K + 1` entries each.
    trans: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by the leaves they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::param`].
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Number of nodes whose vector-Jacobian product was applied.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Recording of executed operations. One tape per worker; clear it between
/// iterations with [`Tape::clear`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
    let data = (0..n).map(|i| f(pick(ad, i), pick(bd, i))).collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn clear(&mut self) {
        self.nodes.clear();
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar("add", ta, tb)?;
        let out = broadcast_binary(ta, tb, shape, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar("sub", ta, tb)?;
        let out = broadcast_binary(ta, tb, shape, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = same_or_scalar("mul", ta, tb)?;
        let out = broadcast_binary(ta, tb, shape, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let f: fn(f64) -> f64 = match u {
            Unary::Relu => |v| v.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Sqrt => f64::sqrt,
            Unary::Neg => |v| -v,
        };
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(x, u), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    // ---- reductions and shape ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Swaps the two innermost axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose_last2", s, &[]));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = t.len() / (m * n).max(1);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let out = transpose_batched(t.data(), batch, m, n);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::TransposeLast2(x), rg))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, end]));
        }
        let (m, n) = (s[0], s[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in t.data().chunks_exact(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(vec![m, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(ta.data(), m, k), MatRef::new(tb.data(), k, n), &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                MatRef::new(&ta.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&tb.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![bs, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Bmm(a, b), rg))
    }

    /// Adds a bias vector `[n]` to every row of `[.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [n] {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        if n > 0 {
            for row in out.data_mut().chunks_exact_mut(n) {
                for (o, bias) in row.iter_mut().zip(tb.data()) {
                    *o += bias;
                }
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() {
            return Err(Error::Range(format!("softmax axis {axis} for shape {s:?}")));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).fold(f64::NEG_INFINITY, |m, j| m.max(d[idx(j)]));
                let mut z = 0.0;
                for j in 0..len {
                    let e = (d[idx(j)] - mx).exp();
                    d[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    d[idx(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    // ---- convolution ---------------------------------------------------

    /// Same-padded cross-correlation of `[C, H, W]` with `[F, C, k, k]`,
    /// optionally adding a per-filter bias `[F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (si, sk) = (ti.shape(), tk.shape());
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] || sk[2] != sk[3] {
            return Err(Error::shape("conv2d", si, sk));
        }
        let k = sk[2];
        if k % 2 == 0 {
            return Err(Error::Contract(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [sk[0]] {
                return Err(Error::shape("conv2d bias", self.value(b).shape(), &[sk[0]]));
            }
        }
        let (c, h, w, f) = (si[0], si[1], si[2], sk[0]);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { c, h, w, f, k, stride, ho, wo };
        let cols = im2col(ti.data(), &geom);
        let mut out = vec![0.0; f * ho * wo];
        gemm(MatRef::new(tk.data(), f, c * k * k), MatRef::new(&cols, c * k * k, ho * wo), &mut out, false);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (fi, plane) in out.chunks_exact_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v += bd[fi]);
            }
        }
        let out = Tensor::new(vec![f, ho, wo], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let saved = ConvSaved { input, kernel, bias, geom, cols };
        Ok(self.push(out, Op::Conv2d(Box::new(saved)), rg))
    }

    // ---- fused rendering ops ---------------------------------------------

    /// Bilinear lookup of a `[C, H, W]` map at `M` index-space coordinates
    /// `[M, 2]` (x, y), where integer coordinates hit pixel centres.
    ///
    /// A sample is valid when `mask[m]` holds and the point lies inside the
    /// image rectangle `[-0.5, W - 0.5] x [-0.5, H - 0.5]`; invalid samples
    /// produce a zero row. Returns the `[M, C]` result and the validity flags.
    pub fn bilinear_gather(&mut self, map: Var, coords: Var, mask: &[bool]) -> Result<(Var, Vec<bool>)> {
        let (tm, tc) = (self.value(map), self.value(coords));
        let (sm, sc) = (tm.shape(), tc.shape());
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 || mask.len() != sc[0] {
            return Err(Error::shape("bilinear_gather", sm, sc));
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let m = sc[0];
        let md = tm.data();
        let mut out = vec![0.0; m * c];
        let mut taps = Vec::with_capacity(m);
        let mut valid = Vec::with_capacity(m);
        for (i, xy) in tc.data().chunks_exact(2).enumerate() {
            let tap = bilinear_tap(xy[0], xy[1], w, h).filter(|_| mask[i]);
            valid.push(tap.is_some());
            if let Some(t) = tap {
                let row = &mut out[i * c..(i + 1) * c];
                let (w00, w01, w10, w11) = t.weights();
                for (ch, o) in row.iter_mut().enumerate() {
                    let plane = &md[ch * h * w..(ch + 1) * h * w];
                    *o = w00 * plane[t.y0 * w + t.x0]
                        + w01 * plane[t.y0 * w + t.x1]
                        + w10 * plane[t.y1 * w + t.x0]
                        + w11 * plane[t.y1 * w + t.x1];
                }
            }
            taps.push(tap);
        }
        let out = Tensor::new(vec![m, c], out)?;
        let rg = self.rg(&[map, coords]);
        let saved = BilinearSaved { map, coords, taps };
        Ok((self.push(out, Op::Bilinear(Box::new(saved)), rg), valid))
    }

    /// Weighted mean and variance over `S` views. `inputs` are `S` tensors of
    /// shape `[M, C]`; `weights` is `[M, S]` row-major. Output `[M, 2C]` holds
    /// the mean in the first `C` columns and the variance in the rest. Rows with
    /// zero total weight produce zeros.
    pub fn mean_var(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        let s = inputs.len();
        if s == 0 {
            return Err(Error::Contract("mean_var needs at least one view".into()));
        }
        let shape0 = self.value(inputs[0]).shape().to_vec();
        if shape0.len() != 2 {
            return Err(Error::shape("mean_var", &shape0, &[]));
        }
        for v in inputs {
            if self.value(*v).shape() != shape0.as_slice() {
                return Err(Error::shape("mean_var", &shape0, self.value(*v).shape()));
            }
        }
        let (m, c) = (shape0[0], shape0[1]);
        if weights.len() != m * s {
            return Err(Error::shape("mean_var weights", &[weights.len()], &[m, s]));
        }
        let mut out = vec![0.0; m * 2 * c];
        for row in 0..m {
            let wr = &weights[row * s..(row + 1) * s];
            let total: f64 = wr.iter().sum();
            if total <= 0.0 {
                continue;
            }
            let o = &mut out[row * 2 * c..(row + 1) * 2 * c];
            for (v, &wv) in inputs.iter().zip(wr) {
                if wv == 0.0 {
                    continue;
                }
                let x = &self.nodes[v.0].value.data()[row * c..(row + 1) * c];
                for ch in 0..c {
                    o[ch] += wv * x[ch];
                }
            }
            for ch in 0..c {
                o[ch] /= total;
            }
            for (v, &wv) in inputs.iter().zip(wr) {
                if wv == 0.0 {
                    continue;
                }
                let x = &self.nodes[v.0].value.data()[row * c..(row + 1) * c];
                for ch in 0..c {
                    let d = x[ch] - o[ch];
                    o[c + ch] += wv * d * d;
                }
            }
            for ch in 0..c {
                o[c + ch] /= total;
            }
        }
        let out = Tensor::new(vec![m, 2 * c], out)?;
        let rg = self.rg(inputs);
        let saved = MeanVarSaved { inputs: inputs.to_vec(), weights: weights.to_vec() };
        Ok(self.push(out, Op::MeanVar(Box::new(saved)), rg))
    }

    /// Emission-absorption compositing of `N` rays with `K` samples each.
    ///
    /// `sigma` is `[N, K]`, `colors` is `[N, K, 3]`, `deltas` holds the `N * K`
    /// sample spacings. Returns the `[N, 3]` pixel colors; the compositing
    /// weights are available through [`Tape::composite_weights`].
    pub fn composite(&mut self, sigma: Var, colors: Var, deltas: &[f64]) -> Result<Var> {
        let (ts, tc) = (self.value(sigma), self.value(colors));
        let (ss, sc) = (ts.shape(), tc.shape());
        if ss.len() != 2 || sc.len() != 3 || sc[0] != ss[0] || sc[1] != ss[1] || sc[2] != 3 {
            return Err(Error::shape("composite", ss, sc));
        }
        let (n, k) = (ss[0], ss[1]);
        if deltas.len() != n * k {
            return Err(Error::shape("composite deltas", &[deltas.len()], ss));
        }
        let mut trans = vec![0.0; n * (k + 1)];
        let mut weights = vec![0.0; n * k];
        let mut out = vec![0.0; n * 3];
        let (sd, cd) = (ts.data(), tc.data());
        for r in 0..n {
            let tr = &mut trans[r * (k + 1)..(r + 1) * (k + 1)];
            tr[0] = 1.0;
            for j in 0..k {
                let tau = sd[r * k + j] * deltas[r * k + j];
                let alpha = -(-tau).exp_m1();
                let wgt = tr[j] * alpha;
                weights[r * k + j] = wgt;
                tr[j + 1] = tr[j] * (-tau).exp();
                for ch in 0..3 {
                    out[r * 3 + ch] += wgt * cd[(r * k + j) * 3 + ch];
                }
            }
        }
        let out = Tensor::new(vec![n, 3], out)?;
        let rg = self.rg(&[sigma, colors]);
        let saved = CompositeSaved { sigma, colors, deltas: deltas.to_vec(), trans, weights };
        Ok(self.push(out, Op::Composite(Box::new(saved)), rg))
    }

    /// Compositing weights `[N, K]` recorded by a [`Tape::composite`] node.
    pub fn composite_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Composite(s) => Some(&s.weights),
            _ => None,
        }
    }

    // ---- backward ------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every [`Tape::param`] leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", t.shape())));
        }
        let seed = Tensor::full(t.shape(), 1.0);
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Vector-Jacobian product: propagates the given output gradients back to
    /// every [`Tape::param`] leaf.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::Contract(format!("seed {:?} is not on this tape", v)));
            }
            if g.shape() != self.nodes[v.0].value.shape() {
                return Err(Error::shape("backward seed", g.shape(), self.nodes[v.0].value.shape()));
            }
            accumulate(&mut grads, v, g);
            top = top.max(v.0 + 1);
        }
        let mut visited = 0;
        for id in (0..top).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            self.apply_vjp(node, &g, &mut grads);
        }
        // Leaves that received nothing still get a zero gradient.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn apply_vjp(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    accumulate(grads, *a, reduce_to(self.value(*a), g.clone()));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, reduce_to(self.value(*b), g.map(|v| sign * v)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let full = broadcast_binary(g, tb, g.shape().to_vec(), |x, y| x * y);
                    accumulate(grads, *a, reduce_to(ta, full));
                }
                if self.wants(*b) {
                    let full = broadcast_binary(g, ta, g.shape().to_vec(), |x, y| x * y);
                    accumulate(grads, *b, reduce_to(tb, full));
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| c * v)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shaped = g.clone().reshape(self.value(*x).shape()).expect("reshape grad");
                accumulate(grads, *x, shaped);
            }
            Op::Unary(x, u) => {
                let xin = self.value(*x).data();
                let y = node.value.data();
                let d: Vec<f64> = match u {
                    Unary::Relu => gd.iter().zip(xin).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Sigmoid => gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Softplus => gd.iter().zip(xin).map(|(g, &x)| g * sigmoid(x)).collect(),
                    Unary::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Sqrt => gd.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect(),
                    Unary::Neg => gd.iter().map(|g| -g).collect(),
                };
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("unary grad"));
            }
            Op::Sum(x) => accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let t = self.value(*x);
                accumulate(grads, *x, Tensor::full(t.shape(), gd[0] / t.len() as f64));
            }
            Op::TransposeLast2(x) => {
                let s = g.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (m * n).max(1);
                let d = transpose_batched(gd, batch, m, n);
                let t = Tensor::new(self.value(*x).shape().to_vec(), d).expect("transpose grad");
                accumulate(grads, *x, t);
            }
            Op::SliceCols { x, start } => {
                let s = self.value(*x).shape();
                let (m, n) = (s[0], s[1]);
                let w = g.shape()[1];
                let mut d = vec![0.0; m * n];
                for (row, grow) in d.chunks_exact_mut(n).zip(gd.chunks_exact(w.max(1))) {
                    row[*start..*start + w].copy_from_slice(grow);
                }
                accumulate(grads, *x, Tensor::new(vec![m, n], d).expect("slice grad"));
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(MatRef::new(gd, m, n), MatRef::t(tb.data(), k, n), &mut d, false);
                    accumulate(grads, *a, Tensor::new(vec![m, k], d).expect("matmul grad"));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(MatRef::t(ta.data(), m, k), MatRef::new(gd, m, n), &mut d, false);
                    accumulate(grads, *b, Tensor::new(vec![k, n], d).expect("matmul grad"));
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if self.wants(*a) {
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::t(&tb.data()[i * k * n..(i + 1) * k * n], k, n),
                            &mut d[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).expect("bmm grad"));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            MatRef::t(&ta.data()[i * m * k..(i + 1) * m * k], m, k),
                            MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n),
                            &mut d[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d).expect("bmm grad"));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut d = vec![0.0; n];
                    if n > 0 {
                        for row in gd.chunks_exact(n) {
                            for (acc, v) in d.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![n], d).expect("bias grad"));
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d).expect("softmax grad"));
            }
            Op::Conv2d(s) => self.conv_vjp(s, gd, grads),
            Op::Bilinear(s) => self.bilinear_vjp(s, gd, grads),
            Op::MeanVar(s) => self.mean_var_vjp(s, node, gd, grads),
            Op::Composite(s) => self.composite_vjp(s, gd, grads),
        }
    }

    fn conv_vjp(&self, s: &ConvSaved, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let ConvGeom { c, f, k, ho, wo, .. } = s.geom;
        let ckk = c * k * k;
        if self.wants(s.kernel) {
            let mut d = vec![0.0; f * ckk];
            gemm(MatRef::new(gd, f, ho * wo), MatRef::t(&s.cols, ckk, ho * wo), &mut d, false);
            let shape = self.value(s.kernel).shape().to_vec();
            accumulate(grads, s.kernel, Tensor::new(shape, d).expect("kernel grad"));
        }
        if let Some(b) = s.bias.filter(|b| self.wants(*b)) {
            let d = gd.chunks_exact(ho * wo).map(|p| p.iter().sum()).collect();
            accumulate(grads, b, Tensor::new(vec![f], d).expect("bias grad"));
        }
        if self.wants(s.input) {
            let kd = self.value(s.kernel).data();
            let mut dcols = vec![0.0; ckk * ho * wo];
            gemm(MatRef::t(kd, f, ckk), MatRef::new(gd, f, ho * wo), &mut dcols, false);
            let d = col2im(&dcols, &s.geom);
            let shape = self.value(s.input).shape().to_vec();
            accumulate(grads, s.input, Tensor::new(shape, d).expect("input grad"));
        }
    }

    fn bilinear_vjp(&self, s: &BilinearSaved, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let tm = self.value(s.map);
        let (c, h, w) = (tm.shape()[0], tm.shape()[1], tm.shape()[2]);
        let want_map = self.wants(s.map);
        let want_xy = self.wants(s.coords);
        let mut dmap = if want_map { vec![0.0; c * h * w] } else { Vec::new() };
        let mut dxy = if want_xy { vec![0.0; s.taps.len() * 2] } else { Vec::new() };
        let md = tm.data();
        for (i, tap) in s.taps.iter().enumerate() {
            let Some(t) = tap else { continue };
            let (w00, w01, w10, w11) = t.weights();
            let grow = &gd[i * c..(i + 1) * c];
            for (ch, &gv) in grow.iter().enumerate() {
                let base = ch * h * w;
                let (i00, i01) = (base + t.y0 * w + t.x0, base + t.y0 * w + t.x1);
                let (i10, i11) = (base + t.y1 * w + t.x0, base + t.y1 * w + t.x1);
                if want_map {
                    dmap[i00] += w00 * gv;
                    dmap[i01] += w01 * gv;
                    dmap[i10] += w10 * gv;
                    dmap[i11] += w11 * gv;
                }
                if want_xy {
                    if t.x_live {
                        dxy[2 * i] += gv * ((1.0 - t.fy) * (md[i01] - md[i00]) + t.fy * (md[i11] - md[i10]));
                    }
                    if t.y_live {
                        dxy[2 * i + 1] += gv * ((1.0 - t.fx) * (md[i10] - md[i00]) + t.fx * (md[i11] - md[i01]));
                    }
                }
            }
        }
        if want_map {
            accumulate(grads, s.map, Tensor::new(vec![c, h, w], dmap).expect("map grad"));
        }
        if want_xy {
            accumulate(grads, s.coords, Tensor::new(vec![s.taps.len(), 2], dxy).expect("coord grad"));
        }
    }

    fn mean_var_vjp(&self, s: &MeanVarSaved, node: &Node, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let nv = s.inputs.len();
        let shape = self.value(s.inputs[0]).shape().to_vec();
        let (m, c) = (shape[0], shape[1]);
        let out = node.value.data();
        for (vi, v) in s.inputs.iter().enumerate() {
            if !self.wants(*v) {
                continue;
            }
            let x = self.value(*v).data();
            let mut d = vec![0.0; m * c];
            for row in 0..m {
                let wr = &s.weights[row * nv..(row + 1) * nv];
                let total: f64 = wr.iter().sum();
                let wv = wr[vi];
                if total <= 0.0 || wv == 0.0 {
                    continue;
                }
                let scale = wv / total;
                let o = &out[row * 2 * c..(row + 1) * 2 * c];
                let g = &gd[row * 2 * c..(row + 1) * 2 * c];
                for ch in 0..c {
                    let dev = x[row * c + ch] - o[ch];
                    d[row * c + ch] = scale * (g[ch] + 2.0 * g[c + ch] * dev);
                }
            }
            accumulate(grads, *v, Tensor::new(shape.clone(), d).expect("mean_var grad"));
        }
    }

    fn composite_vjp(&self, s: &CompositeSaved, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let tc = self.value(s.colors);
        let (n, k) = (tc.shape()[0], tc.shape()[1]);
        let cd = tc.data();
        if self.wants(s.colors) {
            let mut d = vec![0.0; n * k * 3];
            for r in 0..n {
                for j in 0..k {
                    let wgt = s.weights[r * k + j];
                    for ch in 0..3 {
                        d[(r * k + j) * 3 + ch] = wgt * gd[r * 3 + ch];
                    }
                }
            }
            accumulate(grads, s.colors, Tensor::new(vec![n, k, 3], d).expect("color grad"));
        }
        if self.wants(s.sigma) {
            // dL/dtau_j = T_{j+1} g_j - sum_{i>j} g_i w_i, with g_i = <dL/dpixel, c_i>.
            let mut d = vec![0.0; n * k];
            for r in 0..n {
                let gp = &gd[r * 3..r * 3 + 3];
                let mut tail = 0.0;
                for j in (0..k).rev() {
                    let c = &cd[(r * k + j) * 3..(r * k + j) * 3 + 3];
                    let gj = gp[0] * c[0] + gp[1] * c[1] + gp[2] * c[2];
                    let dtau = s.trans[r * (k + 1) + j + 1] * gj - tail;
                    d[r * k + j] = dtau * s.deltas[r * k + j];
                    tail += gj * s.weights[r * k + j];
                }
            }
            accumulate(grads, s.sigma, Tensor::new(vec![n, k], d).expect("sigma grad"));
        }
    }
}

impl BilinearTap {
    fn weights(&self) -> (f64, f64, f64, f64) {
        let (fx, fy) = (self.fx, self.fy);
        ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy)
    }
}

fn bilinear_tap(x: f64, y: f64, w: usize, h: usize) -> Option<BilinearTap> {
    let (wf, hf) = (w as f64, h as f64);
    if !(x >= -0.5 && x <= wf - 0.5 && y >= -0.5 && y <= hf - 0.5) {
        return None;
    }
    let xc = x.clamp(0.0, wf - 1.0);
    let yc = y.clamp(0.0, hf - 1.0);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    Some(BilinearTap {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        fx: xc - x0 as f64,
        fy: yc - y0 as f64,
        x_live: xc == x && w > 1,
        y_live: yc == y && h > 1,
    })
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g).expect("gradient shape"),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to a scalar operand's shape.
fn reduce_to(target: &Tensor, g: Tensor) -> Tensor {
    if target.shape() == g.shape() {
        g
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_batched(d: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        let src = &d[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pad = g.k / 2;
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.k * g.k * hw];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dst[oy * g.wo + ox] = input[(c * g.h + iy as usize) * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let pad = g.k / 2;
    let hw = g.ho * g.wo;
    let mut out = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        out[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
    out
}
