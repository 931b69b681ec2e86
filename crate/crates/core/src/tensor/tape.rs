// Wengert tape: every primitive appends one node holding its realized value and
// the inputs its backward rule needs. `backward` walks the nodes in reverse.

use std::collections::BTreeMap;

use super::shape::{broadcast_map, broadcast_shape, inverse_permutation, reduce_map, split_at_axis};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Softplus,
    Sigmoid,
    Silu,
    Abs,
}

impl Unary {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Abs => x.abs(),
        }
    }

    /// d(apply)/dx given the input and the already computed output.
    #[inline]
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// A fused operation whose forward is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait Function<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// One optional gradient per input, in input order.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    Flip(Var, usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Sum { x: Var, axes: Vec<usize> },
    Mean { x: Var, axes: Vec<usize> },
    RmsNorm { x: Var, scale: Var, rstd: Vec<T> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Custom { inputs: Vec<Var>, f: Box<dyn Function<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Single-owner recording of a computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    consumed: bool,
    track_params: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), consumed: false, track_params: true }
    }

    /// A tape whose parameters are constants, so nothing keeps backward state.
    pub fn inference() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named trainable leaf once per tape; later calls return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), self.track_params);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Gradients of every registered parameter, zero-filled where the loss did not reach.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let node = &self.nodes[v.0];
                let g = node.grad.clone().unwrap_or_else(|| Tensor::zeros_like(&node.value));
                (name.clone(), g)
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // constant subgraphs keep no backward state
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(va.shape().to_vec(), data));
        }
        let out = broadcast_shape(va.shape(), vb.shape())
            .ok_or_else(|| shape_err!("{what}: cannot broadcast {:?} with {:?}", va.shape(), vb.shape()))?;
        let ma = broadcast_map(va.shape(), &out);
        let mb = broadcast_map(vb.shape(), &out);
        let (da, db) = (va.data(), vb.data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok(Tensor::from_parts(out, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let out = self.value(a).map(|x| kind.apply(x));
        self.push(out, Op::Unary(a, kind), &[a], "unary")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).flip(axis)?;
        self.push(out, Op::Flip(a, axis), &[a], "flip")
    }

    // ---- linear algebra ----------------------------------------------------

    /// `x[..., din] · w[din, dout] (+ b[dout])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.rank() != 2 || vx.rank() == 0 || *vx.shape().last().unwrap() != vw.shape()[0] {
            return Err(shape_err!("linear: x {:?} with w {:?}", vx.shape(), vw.shape()));
        }
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        let m = vx.numel() / k;
        let mut out = vec![T::zero(); m * n];
        matmul_acc(vx.data(), vw.data(), m, k, n, &mut out);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [n] {
                return Err(shape_err!("linear: bias {:?} for output width {n}", vb.shape()));
            }
            for row in out.chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(vb.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs, "linear")
    }

    // ---- reductions --------------------------------------------------------

    fn check_axes(&self, x: Var, axes: &[usize]) -> Result<()> {
        let rank = self.value(x).rank();
        if axes.is_empty() || axes.iter().any(|&a| a >= rank) {
            return Err(shape_err!("reduce axes {axes:?} on rank {rank}"));
        }
        Ok(())
    }

    fn reduce_sum(&self, x: Var, axes: &[usize]) -> Tensor<T> {
        let v = self.value(x);
        let (map, out_shape) = reduce_map(v.shape(), axes);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&o, &val) in map.iter().zip(v.data()) {
            out[o] += val;
        }
        Tensor::from_parts(out_shape, out)
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let out = self.reduce_sum(x, axes);
        self.push(out, Op::Sum { x, axes: axes.to_vec() }, &[x], "sum")
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let count: usize = axes.iter().map(|&a| self.value(x).shape()[a]).product();
        let inv = T::one() / T::of(count as f64);
        let out = self.reduce_sum(x, axes).map(|v| v * inv);
        self.push(out, Op::Mean { x, axes: axes.to_vec() }, &[x], "mean")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.mean(x, &axes)
    }

    /// `x / sqrt(mean(x^2, last axis) + eps) * scale`.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Invalid("rms_norm eps must be positive".into()));
        }
        let (vx, vs) = (self.value(x), self.value(scale));
        let d = *vx.shape().last().ok_or_else(|| shape_err!("rms_norm on a scalar"))?;
        if vs.shape() != [d] {
            return Err(shape_err!("rms_norm scale {:?} for width {d}", vs.shape()));
        }
        let inv_d = T::one() / T::of(d as f64);
        let mut out = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(vx.numel() / d);
        for row in vx.data().chunks(d) {
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) * inv_d;
            let r = T::one() / (ms + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().zip(vs.data()).map(|(&v, &s)| v * r * s));
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(out, Op::RmsNorm { x, scale, rstd }, &[x, scale], "rms_norm")
    }

    // ---- rearrangement -----------------------------------------------------

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x], "permute")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| shape_err!("concat of nothing"))?).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} on rank {}", first.len()));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat {:?} with {:?} on axis {axis}", first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, xs, "concat")
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::Index(format!("slice [{start}, {}) of axis {axis} in {:?}", start + len, v.shape())));
        }
        let (outer, n, inner) = split_at_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, &[x], "slice")
    }

    /// Selects rows (slices along axis 0): `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let out = gather_rows(v, idx)?;
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x], "gather_rows")
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let out = scatter_rows(self.value(x), idx, rows)?;
        self.push(out, Op::ScatterRows { x, idx: idx.to_vec() }, &[x], "scatter_rows")
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, f: Box<dyn Function<T>>) -> Result<Var> {
        let name = f.name();
        self.push(output, Op::Custom { inputs: inputs.to_vec(), f }, inputs, name)
    }

    // ---- reverse pass ------------------------------------------------------

    /// Populates `grad` on every trainable leaf reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            for (input, gi) in self.vjp(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, self.unbroadcast(g, *a)), (*b, self.unbroadcast(g, *b))],
            Op::Sub(a, b) => vec![(*a, self.unbroadcast(g, *a)), (*b, self.unbroadcast(&g.map(|v| -v), *b))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ga, gb) = if va.shape() == vb.shape() {
                    let ga = zip_with(g, vb, |x, y| x * y);
                    let gb = zip_with(g, va, |x, y| x * y);
                    (ga, gb)
                } else {
                    let out = g.shape();
                    let (ma, mb) = (broadcast_map(va.shape(), out), broadcast_map(vb.shape(), out));
                    let mut ga = vec![T::zero(); va.numel()];
                    let mut gb = vec![T::zero(); vb.numel()];
                    for ((&gv, &ia), &ib) in g.data().iter().zip(&ma).zip(&mb) {
                        ga[ia] += gv * vb.data()[ib];
                        gb[ib] += gv * va.data()[ia];
                    }
                    (Tensor::from_parts(va.shape().to_vec(), ga), Tensor::from_parts(vb.shape().to_vec(), gb))
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(node.value.data())
                    .map(|((&gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                    .collect();
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
            }
            Op::Flip(a, axis) => vec![(*a, g.flip(*axis)?)],
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.numel() / k;
                let (gd, xd, wd) = (g.data(), vx.data(), vw.data());
                let mut res = Vec::with_capacity(3);
                if self.requires_grad(*x) {
                    // gx = g · wᵀ, with wᵀ materialized so the inner loop is contiguous
                    let mut wt = vec![T::zero(); k * n];
                    for kk in 0..k {
                        for j in 0..n {
                            wt[j * k + kk] = wd[kk * n + j];
                        }
                    }
                    let mut gx = vec![T::zero(); m * k];
                    matmul_acc(gd, &wt, m, n, k, &mut gx);
                    res.push((*x, Tensor::from_parts(vx.shape().to_vec(), gx)));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    for r in 0..m {
                        let grow = &gd[r * n..(r + 1) * n];
                        for (kk, &a) in xd[r * k..(r + 1) * k].iter().enumerate() {
                            for (gwv, &gv) in gw[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *gwv += a * gv;
                            }
                        }
                    }
                    res.push((*w, Tensor::from_parts(vw.shape().to_vec(), gw)));
                }
                if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
                    let mut gb = vec![T::zero(); n];
                    for grow in gd.chunks(n) {
                        for (a, &v) in gb.iter_mut().zip(grow) {
                            *a += v;
                        }
                    }
                    res.push((b, Tensor::from_parts(vec![n], gb)));
                }
                res
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let vx = self.value(*x);
                let (map, _) = reduce_map(vx.shape(), axes);
                let factor = if matches!(node.op, Op::Mean { .. }) {
                    let count: usize = axes.iter().map(|&a| vx.shape()[a]).product();
                    T::one() / T::of(count as f64)
                } else {
                    T::one()
                };
                let data = map.iter().map(|&o| g.data()[o] * factor).collect();
                vec![(*x, Tensor::from_parts(vx.shape().to_vec(), data))]
            }
            Op::RmsNorm { x, scale, rstd } => {
                let (vx, vs) = (self.value(*x), self.value(*scale));
                let d = vs.numel();
                let inv_d = T::one() / T::of(d as f64);
                let mut gx = Vec::with_capacity(vx.numel());
                let mut gs = vec![T::zero(); d];
                for ((xrow, grow), &r) in vx.data().chunks(d).zip(g.data().chunks(d)).zip(rstd) {
                    // n = x * r; dn = g * scale; dx = r * (dn - n * mean(dn * n))
                    let mut proj = T::zero();
                    for j in 0..d {
                        let nrm = xrow[j] * r;
                        gs[j] += grow[j] * nrm;
                        proj += grow[j] * vs.data()[j] * nrm;
                    }
                    proj *= inv_d;
                    for j in 0..d {
                        let nrm = xrow[j] * r;
                        gx.push(r * (grow[j] * vs.data()[j] - nrm * proj));
                    }
                }
                vec![
                    (*x, Tensor::from_parts(vx.shape().to_vec(), gx)),
                    (*scale, Tensor::from_parts(vec![d], gs)),
                ]
            }
            Op::Permute { x, perm } => vec![(*x, g.permute(&inverse_permutation(perm))?)],
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x).to_vec())?)],
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = split_at_axis(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut res = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &x in xs {
                    let shape = self.shape(x).to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(shape.iter().product());
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[s..s + len * inner]);
                    }
                    offset += len;
                    res.push((x, Tensor::from_parts(shape, data)));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_at_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut data = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*x, Tensor::from_parts(shape, data))]
            }
            Op::GatherRows { x, idx } => {
                let shape = self.shape(*x).to_vec();
                let row = shape[1..].iter().product::<usize>();
                let mut data = vec![T::zero(); shape.iter().product()];
                for (i, &r) in idx.iter().enumerate() {
                    for (d, &s) in data[r * row..(r + 1) * row].iter_mut().zip(&g.data()[i * row..(i + 1) * row]) {
                        *d += s;
                    }
                }
                vec![(*x, Tensor::from_parts(shape, data))]
            }
            Op::ScatterRows { x, idx } => vec![(*x, gather_rows(g, idx)?)],
            Op::Custom { inputs, f } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = f.backward(&values, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Invalid(format!("{} returned {} gradients for {} inputs", f.name(), gs.len(), inputs.len())));
                }
                inputs.iter().zip(gs).filter_map(|(&v, g)| g.map(|g| (v, g))).collect()
            }
        };
        Ok(out)
    }

    /// Sums a gradient of broadcast shape back onto the shape of `target`.
    fn unbroadcast(&self, g: &Tensor<T>, target: Var) -> Tensor<T> {
        let shape = self.shape(target);
        if shape == g.shape() {
            return g.clone();
        }
        let map = broadcast_map(shape, g.shape());
        let mut data = vec![T::zero(); shape.iter().product()];
        for (&m, &v) in map.iter().zip(g.data()) {
            data[m] += v;
        }
        Tensor::from_parts(shape.to_vec(), data)
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

#[inline]
/// `out[m, n] += x[m, k] · w[k, n]`, summing over `k` in ascending order.
pub(crate) fn matmul_acc<T: Scalar>(x: &[T], w: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for r in 0..m {
        let xrow = &x[r * k..(r + 1) * k];
        let orow = &mut out[r * n..(r + 1) * n];
        for (kk, &a) in xrow.iter().enumerate() {
            let wrow = &w[kk * n..(kk + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += a * wv;
            }
        }
    }
}

pub(crate) fn gather_rows<T: Scalar>(v: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if v.rank() == 0 || idx.is_empty() {
        return Err(shape_err!("gather_rows of {} rows from {:?}", idx.len(), v.shape()));
    }
    let rows = v.shape()[0];
    let row = v.numel() / rows;
    let mut out = Vec::with_capacity(idx.len() * row);
    for &r in idx {
        if r >= rows {
            return Err(Error::Index(format!("row {r} of {rows}")));
        }
        out.extend_from_slice(&v.data()[r * row..(r + 1) * row]);
    }
    let mut shape = v.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn scatter_rows<T: Scalar>(v: &Tensor<T>, idx: &[usize], rows: usize) -> Result<Tensor<T>> {
    if v.rank() == 0 || v.shape()[0] != idx.len() || rows == 0 {
        return Err(shape_err!("scatter_rows of {:?} with {} indices", v.shape(), idx.len()));
    }
    let row = v.numel() / idx.len();
    let mut out = vec![T::zero(); rows * row];
    let mut taken = vec![false; rows];
    for (i, &r) in idx.iter().enumerate() {
        if r >= rows {
            return Err(Error::Index(format!("row {r} of {rows}")));
        }
        if std::mem::replace(&mut taken[r], true) {
            return Err(Error::ScatterCollision(r));
        }
        out[r * row..(r + 1) * row].copy_from_slice(&v.data()[i * row..(i + 1) * row]);
    }
    let mut shape = v.shape().to_vec();
    shape[0] = rows;
    Ok(Tensor::from_parts(shape, out))
}
