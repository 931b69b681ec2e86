//! Synthetic pulsating-ellipse videos and their binary file format.
//!
//! Each sample is a filled ellipse whose area oscillates sinusoidally,
//! `A(t) = A0·(1 + a·sin(2πt/P + φ))`, rendered with 4×4 supersampling on a
//! dim background plus Gaussian pixel noise. The regression label is the
//! ejection-fraction analogue `100·(1 − min A / max A)` over the rendered
//! frames; the classification label is `a ≥ amp_max / 2`.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{ids, stream};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"M3DDATA\0";
pub const VERSION: u32 = 1;

const BACKGROUND: f64 = 0.1;
const FOREGROUND: f64 = 0.9;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    EfRegress,
    MotionClassify,
}

impl SynthTask {
    pub fn name(self) -> &'static str {
        match self {
            SynthTask::EfRegress => "ef_regress",
            SynthTask::MotionClassify => "motion_classify",
        }
    }
}

impl std::str::FromStr for SynthTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ef_regress" | "regress" => Ok(SynthTask::EfRegress),
            "motion_classify" | "classify" => Ok(SynthTask::MotionClassify),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub frames: usize,
    pub side: usize,
    pub task: SynthTask,
    pub seed: u64,
    pub noise: f64,
    pub amp_max: f64,
    /// Global index of the first sample, so disjoint splits share one seed.
    pub first_index: usize,
}

/// Geometry of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub theta: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl Ellipse {
    fn draw(rng: &mut impl Rng, frames: usize, side: usize, amp_max: f64) -> Self {
        let s = side as f64;
        Self {
            cx: s * rng.random_range(0.4..0.6),
            cy: s * rng.random_range(0.4..0.6),
            rx: s * rng.random_range(0.15..0.28),
            ry: s * rng.random_range(0.15..0.28),
            theta: rng.random_range(0.0..PI),
            amplitude: rng.random_range(0.0..=amp_max),
            period: frames as f64 * rng.random_range(0.5..1.0),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Relative area `A(t)/A0`.
    pub fn area_factor(&self, t: usize) -> f64 {
        1.0 + self.amplitude * (2.0 * PI * t as f64 / self.period + self.phase).sin()
    }

    pub fn ef_label(&self, frames: usize) -> f64 {
        let areas: Vec<f64> = (0..frames).map(|t| self.area_factor(t)).collect();
        let lo = areas.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = areas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        100.0 * (1.0 - lo / hi)
    }

    /// Fraction of each pixel covered by the ellipse at frame `t`.
    pub fn coverage(&self, t: usize, side: usize) -> Vec<f64> {
        let k = self.area_factor(t).sqrt();
        let (rx, ry) = (self.rx * k, self.ry * k);
        let (sin, cos) = self.theta.sin_cos();
        let mut out = vec![0.0; side * side];
        let sub = 1.0 / SUPERSAMPLE as f64;
        for y in 0..side {
            for x in 0..side {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let dx = x as f64 + (sx as f64 + 0.5) * sub - self.cx;
                        let dy = y as f64 + (sy as f64 + 0.5) * sub - self.cy;
                        let u = (dx * cos + dy * sin) / rx;
                        let v = (-dx * sin + dy * cos) / ry;
                        if u * u + v * v <= 1.0 {
                            hits += 1;
                        }
                    }
                }
                out[y * side + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            }
        }
        out
    }
}

/// Videos `[n, 1, frames, side, side]` stored flat, with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub side: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn frame_len(&self) -> usize {
        self.frames * self.side * self.side
    }

    /// Sample `i` as a `[1, frames, side, side]` tensor.
    pub fn video<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let n = self.frame_len();
        let data = self.pixels[i * n..(i + 1) * n].iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(vec![1, self.frames, self.side, self.side], data).expect("consistent dataset")
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i] as f64
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.pixels.len() * 4 + self.labels.len() * 4 + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.len(), self.frames, self.side] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let n = self.frame_len();
        for (i, label) in self.labels.iter().enumerate() {
            for v in &self.pixels[i * n..(i + 1) * n] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&label.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(m.to_string());
        if bytes.len() < 28 + 4 {
            return Err(bad("dataset file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
            return Err(bad("dataset checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(bad("not a dataset file"));
        }
        let word = |at: usize| u32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes")) as usize;
        if word(8) != VERSION as usize {
            return Err(Error::Data(format!("dataset version {}, expected {VERSION}", word(8))));
        }
        let (n, frames, side) = (word(12), word(16), word(20));
        let per = frames * side * side;
        if body.len() != 24 + n * (per + 1) * 4 {
            return Err(bad("dataset size does not match its header"));
        }
        let floats: Vec<f32> = body[24..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut pixels = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for rec in floats.chunks_exact(per + 1) {
            pixels.extend_from_slice(&rec[..per]);
            labels.push(rec[per]);
        }
        Ok(Self { frames, side, pixels, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 16 || self.frames < 8 {
            return Err(Error::Data(format!("need side >= 16 and frames >= 8, got {}x{}", self.frames, self.side)));
        }
        if !(0.0..=0.6).contains(&self.amp_max) || !(self.noise >= 0.0) {
            return Err(Error::Data("amplitude must lie in [0, 0.6] and noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn ellipse(&self, i: usize) -> Ellipse {
        Ellipse::draw(&mut stream(self.seed, ids::DATA | (self.first_index + i) as u64), self.frames, self.side, self.amp_max)
    }

    fn label(&self, e: &Ellipse) -> f64 {
        match self.task {
            SynthTask::EfRegress => e.ef_label(self.frames),
            SynthTask::MotionClassify => f64::from(u8::from(e.amplitude >= self.amp_max / 2.0)),
        }
    }

    fn render(&self, i: usize) -> (Vec<f32>, f32) {
        let e = self.ellipse(i);
        let mut rng = stream(self.seed, ids::NOISE | (self.first_index + i) as u64);
        let noise = Normal::new(0.0, self.noise).expect("finite sigma");
        let mut pixels = Vec::with_capacity(self.frames * self.side * self.side);
        for t in 0..self.frames {
            for c in e.coverage(t, self.side) {
                let n = if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                pixels.push((BACKGROUND + (FOREGROUND - BACKGROUND) * c + n) as f32);
            }
        }
        (pixels, self.label(&e) as f32)
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let samples: Vec<(Vec<f32>, f32)> = (0..self.n).into_par_iter().map(|i| self.render(i)).collect();
        let mut pixels = Vec::with_capacity(self.n * self.frames * self.side * self.side);
        let mut labels = Vec::with_capacity(self.n);
        for (p, l) in samples {
            pixels.extend(p);
            labels.push(l);
        }
        Ok(Dataset { frames: self.frames, side: self.side, pixels, labels })
    }
}
