//! Wall-time comparison of the masked encoder against the full encoder.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::masking::{cache_for, masked_encode, stc_mask};
use crate::model::{Model, ModelConfig};
use crate::rng::{ids, stream};
use crate::tensor::{Scalar, Tape};

pub const CSV_HEADER: &str = "gamma_t,gamma_s,p_mask,S_unmasked,cache_build_us,encode_us_masked,encode_us_full";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub gamma_t: usize,
    pub gamma_s: usize,
    pub p_mask: f64,
    pub s_unmasked: usize,
    /// Medians over the repetitions, in microseconds.
    pub cache_build_us: f64,
    pub encode_us_masked: f64,
    pub encode_us_full: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.encode_us_masked / self.encode_us_full
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.1},{:.1},{:.1}",
            self.gamma_t, self.gamma_s, self.p_mask, self.s_unmasked, self.cache_build_us, self.encode_us_masked, self.encode_us_full
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn micros(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e6
}

/// Times encoder forward passes on one random video. Each repetition draws
/// a fresh mask, builds its permutation cache, and runs both encoders on
/// inference tapes.
pub fn bench_mask<T: Scalar>(config: &ModelConfig, reps: usize, seed: u64) -> Result<BenchRow> {
    if reps == 0 {
        return Err(Error::Config("bench needs at least one repetition".into()));
    }
    let model: Model<T> = Model::new(config.clone(), seed)?;
    let video = crate::tensor::Tensor::from_fn(config.patch.video_shape().to_vec(), |i| T::of(((i * 7919) % 1000) as f64 / 1000.0));
    let mut tape = Tape::inference();
    let (cube, _) = model.tokens(&mut tape, &video)?;
    let cube = tape.value(cube).clone();
    let geo = &model.geometry;
    let [l, h, w] = geo.extents;
    let d = config.patch.d_model;

    let (mut build, mut masked, mut full) = (Vec::new(), Vec::new(), Vec::new());
    let mut s_unmasked = 0;
    for r in 0..reps {
        let mask = stc_mask(config.patch.grid(), config.mask, &mut stream(seed, ids::step_sample(ids::MASK, r as u64, 0)))?;
        let t = Instant::now();
        let cache = cache_for(&mask, geo)?;
        build.push(micros(t));
        s_unmasked = cache.len();

        let mut tape = Tape::inference();
        let x = tape.constant(cube.clone());
        let t = Instant::now();
        masked_encode(&mut tape, &model.encoder, x, &cache)?;
        masked.push(micros(t));

        let mut tape = Tape::inference();
        let x = tape.constant(cube.clone().reshape(vec![l, h, w, d])?);
        let t = Instant::now();
        model.encoder.forward(&mut tape, x, None)?;
        full.push(micros(t));
    }
    Ok(BenchRow {
        gamma_t: config.mask.gamma_t,
        gamma_s: config.mask.gamma_s,
        p_mask: config.mask.p_mask,
        s_unmasked,
        cache_build_us: median(build),
        encode_us_masked: median(masked),
        encode_us_full: median(full),
    })
}
