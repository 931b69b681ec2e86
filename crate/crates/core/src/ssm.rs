//! Selective state-space scan.
//!
//! Continuous dynamics `h' = A h + B x`, `y = C h + D x` with a diagonal,
//! strictly negative `A` per channel. Each step is discretized by zero-order
//! hold with an input-dependent step `Δ_t`:
//!
//! ```text
//! Ā_t = exp(Δ_t A)        B̄_t = Δ_t B_t
//! h_t = Ā_t h_{t-1} + B̄_t x_t
//! y_t = C_t h_t + D x_t
//! ```
//!
//! `B_t`, `C_t` and `Δ_t` are projections of the input itself (the selection
//! mechanism). The scan runs sequentially over time and is recorded on the tape
//! as one fused node with a hand-written reverse pass.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{fan_in_uniform, uniform, Module, Param};
use crate::rng::StreamRng;
use crate::tensor::{Function, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Learned parameters of one selective SSM.
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    /// `log(-A)`, shape `[d_inner, n_state]`.
    pub a_log: Param<T>,
    /// Feed-through `D`, shape `[d_inner]`.
    pub d_skip: Param<T>,
    pub w_b: Param<T>,
    pub w_c: Param<T>,
    pub w_dt_down: Param<T>,
    pub w_dt_up: Param<T>,
    pub b_dt: Param<T>,
}

/// Default low rank of the Δ projection.
pub fn dt_rank(d_inner: usize) -> usize {
    d_inner.div_ceil(16).max(1)
}

impl<T: Scalar> SsmParams<T> {
    /// `-A = [1..n_state]` per channel, `D = 1`, and a Δ bias whose softplus
    /// lands log-uniformly in `[1e-3, 1e-1]`.
    pub fn init(name: &str, d_inner: usize, n_state: usize, rng: &mut StreamRng) -> Self {
        assert!(d_inner >= 1 && n_state >= 1);
        let rank = dt_rank(d_inner);
        let a_log = Tensor::from_fn([d_inner, n_state], |i| T::of(((i % n_state) + 1) as f64).ln());
        let w_b = fan_in_uniform(&[d_inner, n_state], d_inner, rng);
        let w_c = fan_in_uniform(&[d_inner, n_state], d_inner, rng);
        let w_dt_down = fan_in_uniform(&[d_inner, rank], d_inner, rng);
        let w_dt_up = uniform(&[rank, d_inner], (rank as f64).powf(-0.5), rng);
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let b_dt = Tensor::from_fn([d_inner], |_| {
            let dt = rng.random_range(lo..hi).exp().max(1e-4);
            // inverse softplus
            T::of(dt + (-(-dt).exp_m1()).ln())
        });
        Self {
            a_log: Param::new(format!("{name}.a_log"), a_log),
            d_skip: Param::new(format!("{name}.d_skip"), Tensor::ones([d_inner])),
            w_b: Param::new(format!("{name}.w_b"), w_b),
            w_c: Param::new(format!("{name}.w_c"), w_c),
            w_dt_down: Param::new(format!("{name}.w_dt_down"), w_dt_down),
            w_dt_up: Param::new(format!("{name}.w_dt_up"), w_dt_up),
            b_dt: Param::new(format!("{name}.b_dt"), b_dt),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.value.shape()[0]
    }

    pub fn n_state(&self) -> usize {
        self.a_log.value.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> SsmVars {
        SsmVars {
            a_log: self.a_log.bind(tape),
            d_skip: self.d_skip.bind(tape),
            w_b: self.w_b.bind(tape),
            w_c: self.w_c.bind(tape),
            w_dt_down: self.w_dt_down.bind(tape),
            w_dt_up: self.w_dt_up.bind(tape),
            b_dt: self.b_dt.bind(tape),
        }
    }
}

impl<T: Scalar> Module<T> for SsmParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for p in [&self.a_log, &self.d_skip, &self.w_b, &self.w_c, &self.w_dt_down, &self.w_dt_up, &self.b_dt] {
            f(p);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in [
            &mut self.a_log,
            &mut self.d_skip,
            &mut self.w_b,
            &mut self.w_c,
            &mut self.w_dt_down,
            &mut self.w_dt_up,
            &mut self.b_dt,
        ] {
            f(p);
        }
    }
}

/// Tape nodes of bound [`SsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt_down: Var,
    pub w_dt_up: Var,
    pub b_dt: Var,
}

/// Input-dependent `(B_t, C_t, Δ_t)` for `x[..., T, d_inner]`.
pub fn selection_projections<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &SsmVars) -> Result<(Var, Var, Var)> {
    let b = tape.linear(x, p.w_b, None)?;
    let c = tape.linear(x, p.w_c, None)?;
    let low = tape.linear(x, p.w_dt_down, None)?;
    let dt = tape.linear(low, p.w_dt_up, Some(p.b_dt))?;
    let dt = tape.softplus(dt)?;
    Ok((b, c, dt))
}

/// Zero-order-hold discretization for diagonal `A[d, n]` with per-step
/// `B_t[..., T, n]` and `Δ_t[..., T, d]`. Returns `(Ā, B̄)`, both `[..., T, d, n]`.
pub fn zoh_discretize<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, delta: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, n) = (a.shape()[0], a.shape()[1]);
    let steps = delta.numel() / d;
    if b.numel() != steps * n || delta.shape().last() != Some(&d) || b.shape().last() != Some(&n) {
        return Err(shape_err!("zoh: A {:?}, B {:?}, Δ {:?}", a.shape(), b.shape(), delta.shape()));
    }
    let mut abar = Vec::with_capacity(steps * d * n);
    let mut bbar = Vec::with_capacity(steps * d * n);
    for s in 0..steps {
        for dd in 0..d {
            let dt = delta.data()[s * d + dd];
            if dt < T::zero() {
                return Err(Error::Invalid("zoh step Δ must be non-negative".into()));
            }
            for nn in 0..n {
                abar.push((dt * a.data()[dd * n + nn]).exp());
                bbar.push(dt * b.data()[s * n + nn]);
            }
        }
    }
    let mut shape = delta.shape().to_vec();
    shape.push(n);
    let abar = Tensor::new(shape.clone(), abar)?;
    abar.check_finite("zoh_discretize")?;
    Ok((abar, Tensor::new(shape, bbar)?))
}

struct ScanShape {
    batch: usize,
    steps: usize,
    d: usize,
    n: usize,
}

fn scan_shape<T: Scalar>(u: &Tensor<T>, delta: &Tensor<T>, a_log: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, d_skip: &Tensor<T>) -> Result<ScanShape> {
    if a_log.rank() != 2 || u.rank() < 2 {
        return Err(shape_err!("scan: u {:?}, A_log {:?}", u.shape(), a_log.shape()));
    }
    let (d, n) = (a_log.shape()[0], a_log.shape()[1]);
    let steps = u.shape()[u.rank() - 2];
    let batch = u.numel() / (steps * d);
    let lead = &u.shape()[..u.rank() - 1];
    let ok = u.shape()[u.rank() - 1] == d
        && delta.shape() == u.shape()
        && b.shape().len() == u.rank()
        && &b.shape()[..u.rank() - 1] == lead
        && b.shape()[u.rank() - 1] == n
        && c.shape() == b.shape()
        && d_skip.shape() == [d];
    if !ok {
        return Err(shape_err!(
            "scan: u {:?}, Δ {:?}, A_log {:?}, B {:?}, C {:?}, D {:?}",
            u.shape(),
            delta.shape(),
            a_log.shape(),
            b.shape(),
            c.shape(),
            d_skip.shape()
        ));
    }
    Ok(ScanShape { batch, steps, d, n })
}

/// Saved forward quantities, each `[batch, T, d, n]`.
#[derive(Default)]
struct ScanTrace<T> {
    states: Vec<T>,
    abar: Vec<T>,
}

/// Forward recurrence. Returns `y` and, when requested, every post-update
/// state `h_t` with its decay `Ā_t`.
fn scan_kernel<T: Scalar>(
    u: &[T],
    delta: &[T],
    a_log: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    sh: &ScanShape,
    keep_states: bool,
) -> Result<(Vec<T>, Option<ScanTrace<T>>)> {
    let ScanShape { batch, steps, d, n } = *sh;
    let a: Vec<T> = a_log.iter().map(|&v| -v.exp()).collect();
    let mut y = vec![T::zero(); batch * steps * d];
    let mut trace = keep_states.then(|| ScanTrace { states: vec![T::zero(); batch * steps * d * n], abar: vec![T::zero(); batch * steps * d * n] });
    let mut h = vec![T::zero(); d * n];
    let mut abar = vec![T::zero(); d * n];
    for bi in 0..batch {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..steps {
            let row = bi * steps + t;
            let (brow, crow) = (&b[row * n..(row + 1) * n], &c[row * n..(row + 1) * n]);
            for dd in 0..d {
                let dt = delta[row * d + dd];
                let x = u[row * d + dd];
                let dtx = dt * x;
                let hd = &mut h[dd * n..(dd + 1) * n];
                let ab = &mut abar[dd * n..(dd + 1) * n];
                for (e, &av) in ab.iter_mut().zip(&a[dd * n..(dd + 1) * n]) {
                    *e = (dt * av).exp();
                }
                let mut acc = T::zero();
                for nn in 0..n {
                    hd[nn] = ab[nn] * hd[nn] + brow[nn] * dtx;
                    acc += crow[nn] * hd[nn];
                }
                y[row * d + dd] = acc + d_skip[dd] * x;
            }
            if let Some(tr) = trace.as_mut() {
                tr.states[row * d * n..(row + 1) * d * n].copy_from_slice(&h);
                tr.abar[row * d * n..(row + 1) * d * n].copy_from_slice(&abar);
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("selective_scan state".into()));
        }
    }
    Ok((y, trace))
}

struct ScanBackward<T> {
    shape: ScanShape,
    trace: ScanTrace<T>,
}

impl<T: Scalar> Function<T> for ScanBackward<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let [u, delta, a_log, b, c, d_skip] = inputs else {
            return Err(Error::Invalid("selective_scan expects six inputs".into()));
        };
        let ScanShape { batch, steps, d, n } = self.shape;
        let (u, delta, b, c, ds, gy) = (u.data(), delta.data(), b.data(), c.data(), d_skip.data(), grad.data());
        let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
        let (h, abars) = (&self.trace.states, &self.trace.abar);
        let mut gu = vec![T::zero(); u.len()];
        let mut gdelta = vec![T::zero(); delta.len()];
        let mut ga = vec![T::zero(); d * n];
        let mut gb = vec![T::zero(); b.len()];
        let mut gc = vec![T::zero(); c.len()];
        let mut gds = vec![T::zero(); d];
        let mut dh = vec![T::zero(); d * n];
        let (mut tdt, mut tx) = (vec![T::zero(); n], vec![T::zero(); n]);
        let zeros = vec![T::zero(); d * n];
        for bi in 0..batch {
            dh.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..steps).rev() {
                let row = bi * steps + t;
                let h_t = &h[row * d * n..(row + 1) * d * n];
                let h_prev = if t > 0 { &h[(row - 1) * d * n..row * d * n] } else { &zeros[..] };
                let (brow, crow) = (&b[row * n..(row + 1) * n], &c[row * n..(row + 1) * n]);
                for dd in 0..d {
                    let i = row * d + dd;
                    let (g, x, dt) = (gy[i], u[i], delta[i]);
                    gds[dd] += g * x;
                    let r = dd * n..(dd + 1) * n;
                    let (dhd, ht, hp, ab, ad) = (&mut dh[r.clone()], &h_t[r.clone()], &h_prev[r.clone()], &abars[row * d * n..][r.clone()], &a[r.clone()]);
                    let (gad, gbr) = (&mut ga[r.clone()], &mut gb[row * n..(row + 1) * n]);
                    let (tdt, tx) = (&mut tdt[..n], &mut tx[..n]);
                    for ((dv, &cv), (gcv, &hv)) in dhd.iter_mut().zip(crow).zip(gc[row * n..(row + 1) * n].iter_mut().zip(ht)) {
                        *dv += g * cv;
                        *gcv += g * hv;
                    }
                    // terms of dL/dΔ and dL/dx, summed in state order below
                    for nn in 0..n {
                        tdt[nn] = dhd[nn] * (hp[nn] * ab[nn] * ad[nn] + brow[nn] * x);
                        tx[nn] = dhd[nn] * dt * brow[nn];
                        gad[nn] += dhd[nn] * hp[nn] * ab[nn] * dt;
                        gbr[nn] += dhd[nn] * dt * x;
                        dhd[nn] *= ab[nn];
                    }
                    let mut gx = g * ds[dd];
                    let mut gdt = T::zero();
                    for nn in 0..n {
                        gdt += tdt[nn];
                        gx += tx[nn];
                    }
                    gu[i] = gx;
                    gdelta[i] = gdt;
                }
            }
        }
        // A = -exp(a_log)  =>  dA/da_log = A
        let ga_log: Vec<T> = ga.iter().zip(&a).map(|(&g, &av)| g * av).collect();
        let s = |t: &Tensor<T>, v: Vec<T>| Some(Tensor::new(t.shape().to_vec(), v).expect("grad shape"));
        Ok(vec![
            s(inputs[0], gu),
            s(inputs[1], gdelta),
            s(inputs[2], ga_log),
            s(inputs[3], gb),
            s(inputs[4], gc),
            s(inputs[5], gds),
        ])
    }
}

/// Forward-direction scan over `u[..., T, d]` with explicit selection tensors.
pub fn selective_scan_raw<T: Scalar>(tape: &mut Tape<T>, u: Var, delta: Var, a_log: Var, b: Var, c: Var, d_skip: Var) -> Result<Var> {
    let inputs = [u, delta, a_log, b, c, d_skip];
    let shape = {
        let v: Vec<&Tensor<T>> = inputs.iter().map(|&v| tape.value(v)).collect();
        scan_shape(v[0], v[1], v[2], v[3], v[4], v[5])?
    };
    let keep = inputs.iter().any(|&v| tape.requires_grad(v));
    let (y, trace) = scan_kernel(
        tape.value(u).data(),
        tape.value(delta).data(),
        tape.value(a_log).data(),
        tape.value(b).data(),
        tape.value(c).data(),
        tape.value(d_skip).data(),
        &shape,
        keep,
    )?;
    let out = Tensor::new(tape.value(u).shape().to_vec(), y)?;
    let f = ScanBackward { shape, trace: trace.unwrap_or_default() };
    tape.custom(&inputs, out, Box::new(f))
}

/// Output of a full selective scan, with the step sizes kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ScanOutput {
    pub y: Var,
    /// `Δ_t` in the caller's time order.
    pub delta: Var,
}

/// Selection, discretization and recurrence over `x[..., T, d_inner]`. The
/// reverse direction runs the same recurrence on the time-flipped sequence and
/// flips the result back.
pub fn selective_scan<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &SsmVars, direction: Direction) -> Result<ScanOutput> {
    let rank = tape.value(x).rank();
    if rank < 2 {
        return Err(shape_err!("selective_scan input {:?}", tape.shape(x)));
    }
    let time_axis = rank - 2;
    let xin = match direction {
        Direction::Forward => x,
        Direction::Reverse => tape.flip(x, time_axis)?,
    };
    let (b, c, delta) = selection_projections(tape, xin, p)?;
    let y = selective_scan_raw(tape, xin, delta, p.a_log, b, c, p.d_skip)?;
    Ok(match direction {
        Direction::Forward => ScanOutput { y, delta },
        Direction::Reverse => ScanOutput { y: tape.flip(y, time_axis)?, delta: tape.flip(delta, time_axis)? },
    })
}
