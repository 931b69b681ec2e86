//! Gated Mamba layer and the Mamba-3D block.
//!
//! A block runs six independent layers in series over a token cube
//! `[L, H, W, D]`: forward and reverse scans over the axis orders HWL, LWH and
//! LHW, where the last letter names the contiguous (fastest) axis after
//! flattening. Each sub-step is a pre-norm residual update
//! `x <- x + layer(rms_norm(x))`.

use crate::error::{shape_err, Error, Result};
use crate::params::{fan_in_uniform, Module, Param};
use crate::rng::StreamRng;
use crate::ssm::{selective_scan, Direction, SsmParams};
use crate::tensor::{Function, Scalar, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    pub d_model: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub n_state: usize,
}

impl LayerConfig {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, expand: 2, conv_kernel: 4, n_state: 16 }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expand == 0 || self.conv_kernel == 0 || self.n_state == 0 {
            return Err(Error::Config(format!("invalid layer config {self:?}")));
        }
        Ok(())
    }
}

/// Axis order of a scan over the `[L, H, W]` cube; the last axis is contiguous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    Hwl,
    Lwh,
    Lhw,
}

impl ScanOrder {
    /// Orders in the sequence a block visits them.
    pub const BLOCK: [ScanOrder; 3] = [ScanOrder::Hwl, ScanOrder::Lwh, ScanOrder::Lhw];

    /// Cube axes (L=0, H=1, W=2) from slowest to fastest.
    pub fn axes(self) -> [usize; 3] {
        match self {
            ScanOrder::Hwl => [1, 2, 0],
            ScanOrder::Lwh => [0, 2, 1],
            ScanOrder::Lhw => [0, 1, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanOrder::Hwl => "hwl",
            ScanOrder::Lwh => "lwh",
            ScanOrder::Lhw => "lhw",
        }
    }

    /// For each position of this order's raster, its flat LHW index.
    pub fn lhw_indices(self, extents: [usize; 3]) -> Vec<usize> {
        let ax = self.axes();
        let lhw_strides = [extents[1] * extents[2], extents[2], 1];
        let mut out = Vec::with_capacity(extents.iter().product());
        for i in 0..extents[ax[0]] {
            for j in 0..extents[ax[1]] {
                for k in 0..extents[ax[2]] {
                    out.push(i * lhw_strides[ax[0]] + j * lhw_strides[ax[1]] + k * lhw_strides[ax[2]]);
                }
            }
        }
        out
    }
}

// ---- causal depthwise convolution -------------------------------------------

struct ConvBackward {
    channels: usize,
    kernel: usize,
    steps: usize,
}

impl<T: Scalar> Function<T> for ConvBackward {
    fn name(&self) -> &'static str {
        "causal_conv1d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (c, k, steps) = (self.channels, self.kernel, self.steps);
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let g = grad.data();
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); c * k];
        let mut gb = vec![T::zero(); c];
        let batch = x.len() / (steps * c);
        for bi in 0..batch {
            let base = bi * steps * c;
            for t in 0..steps {
                let grow = &g[base + t * c..base + (t + 1) * c];
                for (gbv, &gv) in gb.iter_mut().zip(grow) {
                    *gbv += gv;
                }
                for kk in 0..k {
                    // tap kk reads x[t - (k-1) + kk]
                    let Some(s) = (t + kk).checked_sub(k - 1) else { continue };
                    let xrow = &x[base + s * c..base + (s + 1) * c];
                    for ch in 0..c {
                        gw[ch * k + kk] += grow[ch] * xrow[ch];
                        gx[base + s * c + ch] += grow[ch] * w[ch * k + kk];
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), gx)?),
            Some(Tensor::new(vec![c, k], gw)?),
            Some(Tensor::new(vec![c], gb)?),
        ])
    }
}

/// Depthwise causal convolution over `x[..., T, C]` with kernels `w[C, K]`:
/// `y[t, c] = b[c] + Σ_k w[c, k] x[t - (K-1) + k, c]`, zero before the start.
pub fn causal_conv1d<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(b));
    if xv.rank() < 2 || wv.rank() != 2 || xv.shape()[xv.rank() - 1] != wv.shape()[0] || bv.shape() != [wv.shape()[0]] {
        return Err(shape_err!("causal_conv1d: x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()));
    }
    let (c, k) = (wv.shape()[0], wv.shape()[1]);
    let steps = xv.shape()[xv.rank() - 2];
    let batch = xv.numel() / (steps * c);
    let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
    let mut out = Vec::with_capacity(xv.numel());
    for bi in 0..batch {
        let base = bi * steps * c;
        for t in 0..steps {
            for ch in 0..c {
                let mut acc = T::zero();
                for kk in 0..k {
                    if let Some(s) = (t + kk).checked_sub(k - 1) {
                        acc += wd[ch * k + kk] * xd[base + s * c + ch];
                    }
                }
                out.push(acc + bd[ch]);
            }
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), out)?;
    tape.custom(&[x, w, b], out, Box::new(ConvBackward { channels: c, kernel: k, steps }))
}

// ---- Mamba layer --------------------------------------------------------------

/// Expansion projection, causal convolution, selective scan, gating and output
/// projection. `norm_scale` belongs to the pre-norm that wraps the layer.
#[derive(Clone, Debug)]
pub struct MambaLayer<T> {
    pub in_proj: Param<T>,
    pub conv_w: Param<T>,
    pub conv_b: Param<T>,
    pub ssm: SsmParams<T>,
    pub out_proj: Param<T>,
    pub norm_scale: Param<T>,
}

/// Layer output plus the scan step sizes `Δ_t[..., T, d_inner]` in input time order.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub y: Var,
    pub delta: Var,
}

impl<T: Scalar> MambaLayer<T> {
    pub fn init(name: &str, cfg: &LayerConfig, rng: &mut StreamRng) -> Self {
        let (d, di, k) = (cfg.d_model, cfg.d_inner(), cfg.conv_kernel);
        Self {
            in_proj: Param::new(format!("{name}.in_proj"), fan_in_uniform(&[d, 2 * di], d, rng)),
            conv_w: Param::new(format!("{name}.conv_w"), fan_in_uniform(&[di, k], k, rng)),
            conv_b: Param::new(format!("{name}.conv_b"), fan_in_uniform(&[di], k, rng)),
            ssm: SsmParams::init(&format!("{name}.ssm"), di, cfg.n_state, rng),
            out_proj: Param::new(format!("{name}.out_proj"), fan_in_uniform(&[di, d], di, rng)),
            norm_scale: Param::new(format!("{name}.norm"), Tensor::ones([d])),
        }
    }

    pub fn d_model(&self) -> usize {
        self.in_proj.value.shape()[0]
    }

    pub fn d_inner(&self) -> usize {
        self.conv_w.value.shape()[0]
    }

    /// `seq[..., T, D] -> [..., T, D]`. The reverse direction runs the whole
    /// layer on the time-flipped sequence and flips the result back.
    pub fn forward(&self, tape: &mut Tape<T>, seq: Var, direction: Direction) -> Result<LayerOutput> {
        let rank = tape.value(seq).rank();
        if rank < 2 || tape.shape(seq)[rank - 1] != self.d_model() {
            return Err(shape_err!("mamba layer of width {} on {:?}", self.d_model(), tape.shape(seq)));
        }
        let time = rank - 2;
        let x = match direction {
            Direction::Forward => seq,
            Direction::Reverse => tape.flip(seq, time)?,
        };
        let di = self.d_inner();
        let w_in = self.in_proj.bind(tape);
        let xz = tape.linear(x, w_in, None)?;
        let u = tape.slice(xz, rank - 1, 0, di)?;
        let gate = tape.slice(xz, rank - 1, di, di)?;
        let (cw, cb) = (self.conv_w.bind(tape), self.conv_b.bind(tape));
        let u = causal_conv1d(tape, u, cw, cb)?;
        let u = tape.silu(u)?;
        let ssm = self.ssm.bind(tape);
        let scan = selective_scan(tape, u, &ssm, Direction::Forward)?;
        let gate = tape.silu(gate)?;
        let gated = tape.mul(scan.y, gate)?;
        let w_out = self.out_proj.bind(tape);
        let y = tape.linear(gated, w_out, None)?;
        Ok(match direction {
            Direction::Forward => LayerOutput { y, delta: scan.delta },
            Direction::Reverse => LayerOutput { y: tape.flip(y, time)?, delta: tape.flip(scan.delta, time)? },
        })
    }

    /// `x + layer(rms_norm(x))` over a sequence `[..., T, D]`.
    pub fn residual(&self, tape: &mut Tape<T>, x: Var, direction: Direction) -> Result<LayerOutput> {
        let scale = self.norm_scale.bind(tape);
        let n = tape.rms_norm(x, scale, T::of(NORM_EPS))?;
        let out = self.forward(tape, n, direction)?;
        Ok(LayerOutput { y: tape.add(x, out.y)?, delta: out.delta })
    }
}

impl<T: Scalar> Module<T> for MambaLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.in_proj);
        f(&self.conv_w);
        f(&self.conv_b);
        self.ssm.visit(f);
        f(&self.out_proj);
        f(&self.norm_scale);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.in_proj);
        f(&mut self.conv_w);
        f(&mut self.conv_b);
        self.ssm.visit_mut(f);
        f(&mut self.out_proj);
        f(&mut self.norm_scale);
    }
}

// ---- cube scans ---------------------------------------------------------------

fn cube_extents<T: Scalar>(tape: &Tape<T>, cube: Var) -> Result<[usize; 4]> {
    match *tape.shape(cube) {
        [l, h, w, d] => Ok([l, h, w, d]),
        ref s => Err(shape_err!("token cube must be [L, H, W, D], got {s:?}")),
    }
}

/// Channel-averaged Δ of one layer, indexed by LHW raster position.
#[derive(Clone, Debug)]
pub struct DeltaTrace {
    pub order: ScanOrder,
    pub direction: Direction,
    pub per_position: Vec<f64>,
}

pub(crate) fn channel_mean_delta<T: Scalar>(tape: &Tape<T>, delta: Var, positions: &[usize], total: usize) -> Vec<f64> {
    let dv = tape.value(delta);
    let di = *dv.shape().last().expect("delta rank");
    let mut out = vec![0.0; total];
    for (row, &pos) in dv.data().chunks(di).zip(positions) {
        out[pos] = row.iter().map(|v| v.as_f64()).sum::<f64>() / di as f64;
    }
    out
}

/// Permutes the cube so `order`'s last axis is contiguous, flattens it to
/// `[T, D]`, applies `f`, and restores the cube layout.
fn with_order<T: Scalar>(
    tape: &mut Tape<T>,
    cube: Var,
    order: ScanOrder,
    f: impl FnOnce(&mut Tape<T>, Var) -> Result<LayerOutput>,
) -> Result<LayerOutput> {
    let [l, h, w, d] = cube_extents(tape, cube)?;
    let ext = [l, h, w];
    let ax = order.axes();
    let perm = [ax[0], ax[1], ax[2], 3];
    let permuted = if order == ScanOrder::Lhw { cube } else { tape.permute(cube, &perm)? };
    let seq = tape.reshape(permuted, &[l * h * w, d])?;
    let out = f(tape, seq)?;
    let back = tape.reshape(out.y, &[ext[ax[0]], ext[ax[1]], ext[ax[2]], d])?;
    let inv = crate::tensor::shape::inverse_permutation(&perm);
    let y = if order == ScanOrder::Lhw { back } else { tape.permute(back, &inv)? };
    Ok(LayerOutput { y, delta: out.delta })
}

/// One directional layer over a cube `[L, H, W, D]`, same shape out.
pub fn directional_scan<T: Scalar>(
    tape: &mut Tape<T>,
    cube: Var,
    order: ScanOrder,
    layer: &MambaLayer<T>,
    direction: Direction,
) -> Result<LayerOutput> {
    with_order(tape, cube, order, |tape, seq| layer.forward(tape, seq, direction))
}

/// Six serial directional layers: (HWL f, r), (LWH f, r), (LHW f, r).
#[derive(Clone, Debug)]
pub struct Mamba3dBlock<T> {
    pub layers: Vec<MambaLayer<T>>,
}

pub const BLOCK_STEPS: [(ScanOrder, Direction); 6] = [
    (ScanOrder::Hwl, Direction::Forward),
    (ScanOrder::Hwl, Direction::Reverse),
    (ScanOrder::Lwh, Direction::Forward),
    (ScanOrder::Lwh, Direction::Reverse),
    (ScanOrder::Lhw, Direction::Forward),
    (ScanOrder::Lhw, Direction::Reverse),
];

impl<T: Scalar> Mamba3dBlock<T> {
    pub fn init(name: &str, cfg: &LayerConfig, rng: &mut StreamRng) -> Self {
        let layers = BLOCK_STEPS
            .iter()
            .map(|(order, dir)| {
                let tag = if *dir == Direction::Forward { "f" } else { "r" };
                MambaLayer::init(&format!("{name}.{}_{tag}", order.name()), cfg, rng)
            })
            .collect();
        Self { layers }
    }

    /// Full-cube forward: each sub-step is `x + directional_scan(rms_norm(x))`.
    pub fn forward(&self, tape: &mut Tape<T>, cube: Var, mut trace: Option<&mut Vec<DeltaTrace>>) -> Result<Var> {
        let [l, h, w, _] = cube_extents(tape, cube)?;
        let mut x = cube;
        for (layer, &(order, direction)) in self.layers.iter().zip(BLOCK_STEPS.iter()) {
            let out = with_order(tape, x, order, |tape, seq| layer.residual(tape, seq, direction))?;
            if let Some(tr) = trace.as_deref_mut() {
                let positions = order.lhw_indices([l, h, w]);
                let per_position = channel_mean_delta(tape, out.delta, &positions, l * h * w);
                tr.push(DeltaTrace { order, direction, per_position });
            }
            x = out.y;
        }
        Ok(x)
    }
}

impl<T: Scalar> Module<T> for Mamba3dBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.layers.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.visit_mut(f);
    }
}

/// A cascade of blocks followed by a final RMS normalization.
#[derive(Clone, Debug)]
pub struct Mamba3dStack<T> {
    pub blocks: Vec<Mamba3dBlock<T>>,
    pub final_norm: Param<T>,
}

impl<T: Scalar> Mamba3dStack<T> {
    pub fn init(name: &str, depth: usize, cfg: &LayerConfig, rng: &mut StreamRng) -> Self {
        Self {
            blocks: (0..depth).map(|i| Mamba3dBlock::init(&format!("{name}.block{i}"), cfg, rng)).collect(),
            final_norm: Param::new(format!("{name}.final_norm"), Tensor::ones([cfg.d_model])),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Full-cube path over `[L, H, W, D]`.
    pub fn forward(&self, tape: &mut Tape<T>, cube: Var, mut trace: Option<&mut Vec<DeltaTrace>>) -> Result<Var> {
        let mut x = cube;
        for block in &self.blocks {
            x = block.forward(tape, x, trace.as_deref_mut())?;
        }
        let scale = self.final_norm.bind(tape);
        tape.rms_norm(x, scale, T::of(NORM_EPS))
    }
}

impl<T: Scalar> Module<T> for Mamba3dStack<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.blocks.visit(f);
        f(&self.final_norm);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.visit_mut(f);
        f(&mut self.final_norm);
    }
}
