//! Masked autoencoder and downstream network assembled from the token space,
//! the Mamba-3D stacks and a small MLP head.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::mamba::{DeltaTrace, LayerConfig, Mamba3dStack};
use crate::masking::{cache_for, masked_encode, MaskConfig, MaskGrid};
use crate::params::{normal, Dense, Module, Param};
use crate::rng::{ids, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokens::{extract_head_features, patchify, unpatchify, EgtConfig, GlobalTokens, PatchConfig, PatchEmbed, PositionalEmbeddings, TokenGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Regress,
    Classify,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Regress => "regress",
            Task::Classify => "classify",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regress" | "ef_regress" => Ok(Task::Regress),
            "classify" | "motion_classify" => Ok(Task::Classify),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub egt: EgtConfig,
    pub layer: LayerConfig,
    /// Encoder depth in blocks.
    pub n_blocks: usize,
    /// Decoder depth in blocks.
    pub m_blocks: usize,
    /// Head widths after the feature vector; a final layer maps to one output.
    pub head_hidden: Vec<usize>,
    pub mask: MaskConfig,
    pub task: Task,
}

impl ModelConfig {
    /// The reference pre-training shape: 64 frames of 112×112, patches 16/1,
    /// width 384, six encoder and two decoder blocks, three planes per axis.
    pub fn reference() -> Self {
        let d = 384;
        Self {
            patch: PatchConfig { channels: 1, frames: 64, height: 112, width: 112, p_t: 1, p_s: 16, d_model: d },
            egt: EgtConfig { lg: 3, hg: 3, wg: 3, inner_param_set: true },
            layer: LayerConfig::new(d),
            n_blocks: 6,
            m_blocks: 2,
            head_hidden: vec![512, 512, 512],
            mask: MaskConfig { gamma_t: 4, gamma_s: 1, p_mask: 0.8 },
            task: Task::Regress,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.egt.validate()?;
        self.layer.validate()?;
        self.mask.validate()?;
        if self.layer.d_model != self.patch.d_model {
            return Err(Error::Config(format!("layer width {} vs embedding width {}", self.layer.d_model, self.patch.d_model)));
        }
        // the decoder is meant to be much shallower; equal depth is allowed for toy models
        if self.m_blocks == 0 || self.m_blocks > self.n_blocks {
            return Err(Error::Config(format!("decoder depth {} must be in 1..={}", self.m_blocks, self.n_blocks)));
        }
        if self.head_hidden.is_empty() || self.head_hidden.contains(&0) {
            return Err(Error::Config(format!("invalid head widths {:?}", self.head_hidden)));
        }
        Ok(())
    }

    pub fn head_input_width(&self) -> usize {
        self.egt.lg * self.egt.hg * self.egt.wg * self.patch.d_model
    }

    /// Fingerprint of everything that determines parameter names and shapes.
    pub fn architecture_hash(&self) -> u64 {
        let mut s = String::new();
        let p = &self.patch;
        let _ = write!(s, "patch:{},{},{},{},{},{},{};", p.channels, p.frames, p.height, p.width, p.p_t, p.p_s, p.d_model);
        let e = &self.egt;
        let _ = write!(s, "egt:{},{},{},{};", e.lg, e.hg, e.wg, e.inner_param_set);
        let l = &self.layer;
        let _ = write!(s, "layer:{},{},{},{};", l.d_model, l.expand, l.conv_kernel, l.n_state);
        let _ = write!(s, "depth:{},{};head:{:?}", self.n_blocks, self.m_blocks, self.head_hidden);
        let digest = Sha256::digest(s.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub geometry: TokenGeometry,
    pub embed: PatchEmbed<T>,
    pub globals: GlobalTokens<T>,
    pub pos: PositionalEmbeddings<T>,
    pub encoder: Mamba3dStack<T>,
    pub decoder: Mamba3dStack<T>,
    pub mask_token: Param<T>,
    /// Projection `g: D -> D'` back to raw patch values.
    pub recon: Dense<T>,
    pub head: Vec<Dense<T>>,
}

/// Result of one masked-reconstruction pass over a single video.
pub struct PretrainOutput {
    /// `[Lp·Hp·Wp, D']` predictions for every patch.
    pub pred: Var,
    pub target: Tensor<f64>,
    pub token_mask: Vec<bool>,
    pub loss: Var,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let geometry = TokenGeometry::new(config.patch.grid(), &config.egt)?;
        let rng = &mut stream(seed, ids::INIT);
        let d = config.patch.d_model;
        let mut widths = vec![config.head_input_width()];
        widths.extend(&config.head_hidden);
        widths.push(1);
        Ok(Self {
            embed: PatchEmbed::init("embed", &config.patch, rng),
            globals: GlobalTokens::init("egt", &config.egt, d, rng),
            pos: PositionalEmbeddings::init("pos", geometry.extents, d, rng),
            encoder: Mamba3dStack::init("encoder", config.n_blocks, &config.layer, rng),
            decoder: Mamba3dStack::init("decoder", config.m_blocks, &config.layer, rng),
            mask_token: Param::new("mask_token", normal(&[d], 0.02, rng)),
            recon: Dense::new("recon", d, config.patch.patch_dim(), true, rng),
            head: widths.windows(2).enumerate().map(|(i, w)| Dense::new(&format!("head{i}"), w[0], w[1], true, rng)).collect(),
            geometry,
            config,
        })
    }

    fn cube_shape(&self) -> [usize; 4] {
        let [l, h, w] = self.geometry.extents;
        [l, h, w, self.config.patch.d_model]
    }

    fn add_positional(&self, tape: &mut Tape<T>, flat: Var) -> Result<Var> {
        let cube = tape.reshape(flat, &self.cube_shape())?;
        let cube = self.pos.add(tape, cube)?;
        tape.reshape(cube, &[self.geometry.num_tokens(), self.config.patch.d_model])
    }

    /// Patchify, embed, insert global tokens and add positions. Returns the
    /// flattened input cube and the raw patches.
    pub fn tokens(&self, tape: &mut Tape<T>, video: &Tensor<T>) -> Result<(Var, Tensor<T>)> {
        let patches = patchify(video, &self.config.patch)?;
        let p = tape.constant(patches.clone());
        let emb = self.embed.forward(tape, p)?;
        let cube = self.globals.insert(tape, emb, &self.geometry)?;
        Ok((self.add_positional(tape, cube)?, patches))
    }

    pub fn pretrain_forward(&self, tape: &mut Tape<T>, video: &Tensor<T>, mask: &MaskGrid) -> Result<PretrainOutput> {
        let (cube, patches) = self.tokens(tape, video)?;
        let cache = cache_for(mask, &self.geometry)?;
        let encoded = masked_encode(tape, &self.encoder, cube, &cache)?;

        let total = self.geometry.num_tokens();
        let mut indicator = vec![T::zero(); total];
        for (&p, &m) in self.geometry.patch_positions.iter().zip(&mask.token_mask) {
            if m {
                indicator[p] = T::one();
            }
        }
        let ind = tape.constant(Tensor::new(vec![total, 1], indicator)?);
        let mt = self.mask_token.bind(tape);
        let fill = tape.mul(ind, mt)?;
        let dec_in = tape.add(encoded, fill)?;
        let dec_in = self.add_positional(tape, dec_in)?;
        let dec_in = tape.reshape(dec_in, &self.cube_shape())?;
        let dec = self.decoder.forward(tape, dec_in, None)?;
        let dec = tape.reshape(dec, &[total, self.config.patch.d_model])?;
        let patch_tokens = tape.gather_rows(dec, &self.geometry.patch_positions)?;
        let pred = self.recon.forward(tape, patch_tokens)?;
        let target = tape.constant(patches.clone());
        let loss = mvm_loss(tape, pred, target, &mask.token_mask)?;
        Ok(PretrainOutput { pred, target: patches.cast(), token_mask: mask.token_mask.clone(), loss })
    }

    /// Full (unmasked) encoder over the flattened cube.
    pub fn encode(&self, tape: &mut Tape<T>, video: &Tensor<T>, trace: Option<&mut Vec<DeltaTrace>>) -> Result<Var> {
        let (cube, _) = self.tokens(tape, video)?;
        let cube = tape.reshape(cube, &self.cube_shape())?;
        let out = self.encoder.forward(tape, cube, trace)?;
        tape.reshape(out, &[self.geometry.num_tokens(), self.config.patch.d_model])
    }

    /// Scalar prediction `[1]`: a regression value or a classification logit.
    pub fn downstream_forward(&self, tape: &mut Tape<T>, video: &Tensor<T>) -> Result<Var> {
        let enc = self.encode(tape, video, None)?;
        let feat = extract_head_features(tape, enc, &self.geometry)?;
        let mut x = tape.reshape(feat, &[1, self.config.head_input_width()])?;
        for (i, layer) in self.head.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i + 1 < self.head.len() {
                x = tape.silu(x)?;
            }
        }
        tape.reshape(x, &[1])
    }

    /// Gradient-free prediction.
    pub fn predict(&self, video: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::inference();
        let y = self.downstream_forward(&mut tape, video)?;
        Ok(tape.value(y).item().as_f64())
    }

    /// Overwrites parameters from `values`; every name must be present with
    /// its exact shape, and nothing changes unless all of them are.
    pub fn load_values(&mut self, values: &std::collections::BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut problems = Vec::new();
        self.visit(&mut |p| match values.get(&p.name) {
            Some(v) if v.shape() == p.value.shape() => {}
            Some(v) => problems.push(format!("{}: shape {:?} vs {:?}", p.name, v.shape(), p.value.shape())),
            None => problems.push(format!("{}: missing", p.name)),
        });
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        self.visit_mut(&mut |p| p.value = values[&p.name].clone());
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.embed.visit(f);
        self.globals.visit(f);
        self.pos.visit(f);
        self.encoder.visit(f);
        self.decoder.visit(f);
        f(&self.mask_token);
        self.recon.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.embed.visit_mut(f);
        self.globals.visit_mut(f);
        self.pos.visit_mut(f);
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        f(&mut self.mask_token);
        self.recon.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Mean squared error over masked patches and patch values only.
pub fn mvm_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, token_mask: &[bool]) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) || tape.shape(pred)[0] != token_mask.len() {
        return Err(shape_err!("mvm_loss: pred {:?}, target {:?}, mask {}", tape.shape(pred), tape.shape(target), token_mask.len()));
    }
    let masked: Vec<usize> = (0..token_mask.len()).filter(|&i| token_mask[i]).collect();
    if masked.is_empty() {
        return Err(Error::Invalid("reconstruction loss needs at least one masked patch".into()));
    }
    let p = tape.gather_rows(pred, &masked)?;
    let t = tape.gather_rows(target, &masked)?;
    let diff = tape.sub(p, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Inverse-frequency weights `[w_negative, w_positive]` with `w_c = n / (2 n_c)`.
pub fn class_weights(labels: &[f64]) -> Result<[f64; 2]> {
    let pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!("class weights need both classes ({neg} negative, {pos} positive)")));
    }
    let n = labels.len() as f64;
    Ok([n / (2.0 * neg as f64), n / (2.0 * pos as f64)])
}

/// Task loss over a batch of predictions `[B]`: mean absolute error, or
/// class-weighted binary cross-entropy on logits.
pub fn task_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, targets: &[f64], task: Task, weights: [f64; 2]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Invalid("loss over an empty batch".into()));
    }
    if tape.shape(pred) != [targets.len()] {
        return Err(shape_err!("predictions {:?} for {} targets", tape.shape(pred), targets.len()));
    }
    let y = tape.constant(Tensor::from_f64([targets.len()], targets)?);
    match task {
        Task::Regress => {
            let d = tape.sub(pred, y)?;
            let a = tape.abs(d)?;
            tape.mean_all(a)
        }
        Task::Classify => {
            // softplus(z) - y z is the cross-entropy of a logit z
            let sp = tape.softplus(pred)?;
            let yz = tape.mul(y, pred)?;
            let ce = tape.sub(sp, yz)?;
            let w: Vec<f64> = targets.iter().map(|&t| if t >= 0.5 { weights[1] } else { weights[0] }).collect();
            let w = tape.constant(Tensor::from_f64([targets.len()], &w)?);
            let weighted = tape.mul(ce, w)?;
            tape.mean_all(weighted)
        }
    }
}

/// Channel- and layer-averaged step sizes of one encoder block over the
/// patch grid, min-max normalized.
#[derive(Clone, Debug)]
pub struct DeltaMap {
    pub group: usize,
    pub grid: [usize; 3],
    pub values: Vec<f64>,
}

/// Min-max normalization to `[0, 1]`; a constant input maps to zeros.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn delta_maps<T: Scalar>(model: &Model<T>, video: &Tensor<T>) -> Result<Vec<DeltaMap>> {
    let mut trace = Vec::new();
    let mut tape = Tape::inference();
    model.encode(&mut tape, video, Some(&mut trace))?;
    let geo = &model.geometry;
    Ok(trace
        .chunks(6)
        .enumerate()
        .map(|(group, layers)| {
            let avg: Vec<f64> = geo
                .patch_positions
                .iter()
                .map(|&p| layers.iter().map(|t| t.per_position[p]).sum::<f64>() / layers.len() as f64)
                .collect();
            DeltaMap { group, grid: geo.patch_grid, values: normalize_unit(&avg) }
        })
        .collect())
}

/// Binary PGM with maxval 255 from values in `[0, 1]`, row-major.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(shape_err!("pgm {width}x{height} with {} values", values.len()));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// One PGM per group and frame; returns the written paths.
pub fn export_delta_maps<T: Scalar>(model: &Model<T>, video: &Tensor<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for map in delta_maps(model, video)? {
        let [l, h, w] = map.grid;
        for f in 0..l {
            let path = dir.join(format!("delta_g{}_f{:03}.pgm", map.group, f));
            write_pgm(&path, w, h, &map.values[f * h * w..(f + 1) * h * w])?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Writes `orig`, `masked` (masked patches blanked) and `recon` (masked
/// patches replaced by predictions) frames of channel 0 as PGMs.
pub fn export_reconstruction<T: Scalar>(model: &Model<T>, video: &Tensor<T>, mask: &MaskGrid, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut tape = Tape::inference();
    let out = model.pretrain_forward(&mut tape, video, mask)?;
    let pred = tape.value(out.pred).cast::<f64>();
    let dim = model.config.patch.patch_dim();
    let mut blanked = out.target.clone();
    let mut recon = out.target.clone();
    for (i, &m) in out.token_mask.iter().enumerate() {
        if m {
            blanked.data_mut()[i * dim..(i + 1) * dim].fill(0.0);
            recon.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(&pred.data()[i * dim..(i + 1) * dim]);
        }
    }
    let cfg = &model.config.patch;
    let frame = cfg.height * cfg.width;
    let mut written = Vec::new();
    for (kind, patches) in [("orig", &out.target), ("masked", &blanked), ("recon", &recon)] {
        let v = unpatchify(patches, cfg)?;
        for f in 0..cfg.frames {
            let path = dir.join(format!("{kind}_f{f:03}.pgm"));
            write_pgm(&path, cfg.width, cfg.height, &v.data()[f * frame..(f + 1) * frame])?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests;
