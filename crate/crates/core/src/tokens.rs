//! Video patchification, enclosure global tokens and positional embeddings.
//!
//! Token cubes are channel-last and flattened in LHW raster order: a cube of
//! extents `[L, H, W]` and width `D` is a `[L·H·W, D]` matrix whose row
//! `(l·H + h)·W + w` holds token `(l, h, w)`.

use crate::error::{shape_err, Error, Result};
use crate::params::{normal, Dense, Module, Param};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub p_t: usize,
    pub p_s: usize,
    pub d_model: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.channels > 0
            && self.p_t > 0
            && self.p_s > 0
            && self.d_model > 0
            && self.frames > 0
            && self.height > 0
            && self.width > 0
            && self.frames % self.p_t == 0
            && self.height % self.p_s == 0
            && self.width % self.p_s == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("patch sizes do not tile the video: {self:?}")))
        }
    }

    /// `[Lp, Hp, Wp]`.
    pub fn grid(&self) -> [usize; 3] {
        [self.frames / self.p_t, self.height / self.p_s, self.width / self.p_s]
    }

    pub fn num_patches(&self) -> usize {
        self.grid().iter().product()
    }

    /// Flattened patch length `C·p_t·p_s·p_s`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.p_t * self.p_s * self.p_s
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }
}

fn patch_offsets(cfg: &PatchConfig) -> impl Iterator<Item = (usize, usize)> + '_ {
    // (patch row, video offset) for every element, patch-major then C, t, h, w.
    let [lp, hp, wp] = cfg.grid();
    let (l, h, w) = (cfg.frames, cfg.height, cfg.width);
    let dp = cfg.patch_dim();
    (0..lp * hp * wp).flat_map(move |p| {
        let (pl, ph, pw) = (p / (hp * wp), (p / wp) % hp, p % wp);
        (0..dp).map(move |k| {
            let c = k / (cfg.p_t * cfg.p_s * cfg.p_s);
            let t = (k / (cfg.p_s * cfg.p_s)) % cfg.p_t;
            let y = (k / cfg.p_s) % cfg.p_s;
            let x = k % cfg.p_s;
            let off = ((c * l + pl * cfg.p_t + t) * h + ph * cfg.p_s + y) * w + pw * cfg.p_s + x;
            (p, off)
        })
    })
}

/// `[C, L, H, W] -> [Lp·Hp·Wp, D']`, each row one non-overlapping block
/// flattened channel-major then t, h, w.
pub fn patchify<T: Scalar>(video: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if video.shape() != cfg.video_shape() {
        return Err(shape_err!("video {:?} does not match {:?}", video.shape(), cfg.video_shape()));
    }
    let data: Vec<T> = patch_offsets(cfg).map(|(_, off)| video.data()[off]).collect();
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(shape_err!("patches {:?} for {cfg:?}", patches.shape()));
    }
    let mut out = vec![T::zero(); patches.numel()];
    for (i, (_, off)) in patch_offsets(cfg).enumerate() {
        out[off] = patches.data()[i];
    }
    Tensor::new(cfg.video_shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EgtConfig {
    pub lg: usize,
    pub hg: usize,
    pub wg: usize,
    /// 27 parameter families instead of 26: inner-plane tokens get their own.
    pub inner_param_set: bool,
}

impl EgtConfig {
    pub fn counts(&self) -> [usize; 3] {
        [self.lg, self.hg, self.wg]
    }

    pub fn families(&self) -> usize {
        if self.inner_param_set {
            27
        } else {
            26
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts().iter().any(|&g| g < 2) {
            return Err(Error::Config(format!("need at least two global planes per axis: {self:?}")));
        }
        Ok(())
    }
}

/// Global-plane indices along one axis of extent `patches + globals`:
/// `round(k·(P+G−1)/(G−1))`, halves rounded up.
pub fn plane_positions(patches: usize, globals: usize) -> Result<Vec<usize>> {
    if globals < 2 || patches == 0 {
        return Err(Error::Config(format!("plane_positions({patches}, {globals})")));
    }
    let span = (patches + globals - 1) as f64;
    let out: Vec<usize> = (0..globals).map(|k| (k as f64 * span / (globals - 1) as f64).round() as usize).collect();
    if out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("global planes collide: {out:?}")));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Patch,
    Face,
    Edge,
    Vertex,
    Inner,
}

pub const FACE_FAMILIES: std::ops::Range<usize> = 0..6;
pub const EDGE_FAMILIES: std::ops::Range<usize> = 6..18;
pub const VERTEX_FAMILIES: std::ops::Range<usize> = 18..26;
pub const INNER_FAMILY: usize = 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Plane {
    None,
    Boundary(usize),
    Middle,
}

/// Where every token of the enlarged cube comes from.
#[derive(Clone, Debug)]
pub struct TokenGeometry {
    pub patch_grid: [usize; 3],
    pub extents: [usize; 3],
    pub planes: [Vec<usize>; 3],
    pub classes: Vec<TokenClass>,
    /// Cube position of every patch token, in patch raster order.
    pub patch_positions: Vec<usize>,
    pub global_positions: Vec<usize>,
    /// Parameter family feeding each entry of `global_positions`.
    pub global_families: Vec<usize>,
    /// Geometric family of each global token before any inner fallback.
    pub geometric_families: Vec<usize>,
    /// Intersections of global planes of all three axes, lexicographic.
    pub head_positions: Vec<usize>,
}

fn nearest_face(coord: [usize; 3], ext: [usize; 3]) -> usize {
    let mut best = (usize::MAX, 0);
    for axis in 0..3 {
        for end in 0..2 {
            let dist = if end == 0 { coord[axis] } else { ext[axis] - 1 - coord[axis] };
            if dist < best.0 {
                best = (dist, axis * 2 + end);
            }
        }
    }
    best.1
}

impl TokenGeometry {
    pub fn new(patch_grid: [usize; 3], egt: &EgtConfig) -> Result<Self> {
        egt.validate()?;
        let counts = egt.counts();
        let mut planes: [Vec<usize>; 3] = Default::default();
        let mut extents = [0; 3];
        let mut kinds: [Vec<Plane>; 3] = Default::default();
        for a in 0..3 {
            planes[a] = plane_positions(patch_grid[a], counts[a])?;
            extents[a] = patch_grid[a] + counts[a];
            kinds[a] = vec![Plane::None; extents[a]];
            for (k, &p) in planes[a].iter().enumerate() {
                kinds[a][p] = if k == 0 {
                    Plane::Boundary(0)
                } else if k + 1 == counts[a] {
                    Plane::Boundary(1)
                } else {
                    Plane::Middle
                };
            }
        }
        let total: usize = extents.iter().product();
        let mut geo = Self {
            patch_grid,
            extents,
            planes,
            classes: Vec::with_capacity(total),
            patch_positions: Vec::new(),
            global_positions: Vec::new(),
            global_families: Vec::new(),
            geometric_families: Vec::new(),
            head_positions: Vec::new(),
        };
        for pos in 0..total {
            let coord = geo.coord(pos);
            let k = [kinds[0][coord[0]], kinds[1][coord[1]], kinds[2][coord[2]]];
            if k.iter().all(|p| *p == Plane::None) {
                geo.classes.push(TokenClass::Patch);
                geo.patch_positions.push(pos);
                continue;
            }
            if k.iter().all(|p| *p != Plane::None) {
                geo.head_positions.push(pos);
            }
            let ends: Vec<(usize, usize)> = (0..3)
                .filter_map(|a| match k[a] {
                    Plane::Boundary(e) => Some((a, e)),
                    _ => None,
                })
                .collect();
            let (class, family) = match ends.as_slice() {
                [] => (TokenClass::Inner, INNER_FAMILY),
                [(a, e)] => (TokenClass::Face, FACE_FAMILIES.start + a * 2 + e),
                [(a0, e0), (a1, e1)] => {
                    // axis pairs (0,1), (0,2), (1,2) -> 0, 1, 2
                    let pair = a0 + a1 - 1;
                    (TokenClass::Edge, EDGE_FAMILIES.start + pair * 4 + e0 * 2 + e1)
                }
                [(_, e0), (_, e1), (_, e2)] => (TokenClass::Vertex, VERTEX_FAMILIES.start + e0 * 4 + e1 * 2 + e2),
                _ => unreachable!(),
            };
            let param_family = if family == INNER_FAMILY && !egt.inner_param_set { nearest_face(coord, extents) } else { family };
            geo.classes.push(class);
            geo.global_positions.push(pos);
            geo.global_families.push(param_family);
            geo.geometric_families.push(family);
        }
        Ok(geo)
    }

    pub fn num_tokens(&self) -> usize {
        self.classes.len()
    }

    pub fn coord(&self, pos: usize) -> [usize; 3] {
        let [_, h, w] = self.extents;
        [pos / (h * w), (pos / w) % h, pos % w]
    }

    pub fn position(&self, coord: [usize; 3]) -> usize {
        (coord[0] * self.extents[1] + coord[1]) * self.extents[2] + coord[2]
    }
}

/// Linear tokenizer `f: D' -> D` applied to raw patches.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T> {
    pub proj: Dense<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn init(name: &str, cfg: &PatchConfig, rng: &mut StreamRng) -> Self {
        Self { proj: Dense::new(name, cfg.patch_dim(), cfg.d_model, true, rng) }
    }

    pub fn forward(&self, tape: &mut Tape<T>, patches: Var) -> Result<Var> {
        self.proj.forward(tape, patches)
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.proj.visit_mut(f);
    }
}

/// One learnable vector per global-token family, `[26 or 27, D]`.
#[derive(Clone, Debug)]
pub struct GlobalTokens<T> {
    pub families: Param<T>,
}

impl<T: Scalar> GlobalTokens<T> {
    pub fn init(name: &str, egt: &EgtConfig, d: usize, rng: &mut StreamRng) -> Self {
        Self { families: Param::new(format!("{name}.families"), normal(&[egt.families(), d], EMBED_STD, rng)) }
    }

    /// Builds the flattened cube `[L_in·H_in·W_in, D]` from patch embeddings
    /// `[Lp·Hp·Wp, D]` and the family vectors.
    pub fn insert(&self, tape: &mut Tape<T>, emb: Var, geo: &TokenGeometry) -> Result<Var> {
        let total = geo.num_tokens();
        if tape.shape(emb)[0] != geo.patch_positions.len() {
            return Err(shape_err!("{} patch embeddings for {} patch slots", tape.shape(emb)[0], geo.patch_positions.len()));
        }
        let fam = self.families.bind(tape);
        let patches = tape.scatter_rows(emb, &geo.patch_positions, total)?;
        let rows = tape.gather_rows(fam, &geo.global_families)?;
        let globals = tape.scatter_rows(rows, &geo.global_positions, total)?;
        tape.add(patches, globals)
    }
}

impl<T: Scalar> Module<T> for GlobalTokens<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.families);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.families);
    }
}

/// Learnable per-axis embeddings `P_L [L_in, D]`, `P_H [H_in, D]`, `P_W [W_in, D]`.
#[derive(Clone, Debug)]
pub struct PositionalEmbeddings<T> {
    pub p_l: Param<T>,
    pub p_h: Param<T>,
    pub p_w: Param<T>,
}

impl<T: Scalar> PositionalEmbeddings<T> {
    pub fn init(name: &str, extents: [usize; 3], d: usize, rng: &mut StreamRng) -> Self {
        Self {
            p_l: Param::new(format!("{name}.l"), normal(&[extents[0], d], EMBED_STD, rng)),
            p_h: Param::new(format!("{name}.h"), normal(&[extents[1], d], EMBED_STD, rng)),
            p_w: Param::new(format!("{name}.w"), normal(&[extents[2], d], EMBED_STD, rng)),
        }
    }

    /// Broadcast sum over a cube `[L_in, H_in, W_in, D]`.
    pub fn add(&self, tape: &mut Tape<T>, cube: Var) -> Result<Var> {
        let (l, h, w) = (self.p_l.value.shape()[0], self.p_h.value.shape()[0], self.p_w.value.shape()[0]);
        let d = self.p_l.value.shape()[1];
        if tape.shape(cube) != [l, h, w, d] {
            return Err(shape_err!("positional extents {:?} vs cube {:?}", [l, h, w, d], tape.shape(cube)));
        }
        let pl = self.p_l.bind(tape);
        let pl = tape.reshape(pl, &[l, 1, 1, d])?;
        let ph = self.p_h.bind(tape);
        let ph = tape.reshape(ph, &[h, 1, d])?;
        let pw = self.p_w.bind(tape);
        let x = tape.add(cube, pl)?;
        let x = tape.add(x, ph)?;
        tape.add(x, pw)
    }
}

impl<T: Scalar> Module<T> for PositionalEmbeddings<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.p_l);
        f(&self.p_h);
        f(&self.p_w);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.p_l);
        f(&mut self.p_h);
        f(&mut self.p_w);
    }
}

/// Tokens at the plane intersections of a flattened cube, concatenated into
/// one `[Lg·Hg·Wg·D]` vector.
pub fn extract_head_features<T: Scalar>(tape: &mut Tape<T>, cube_flat: Var, geo: &TokenGeometry) -> Result<Var> {
    let d = tape.shape(cube_flat)[1];
    let rows = tape.gather_rows(cube_flat, &geo.head_positions)?;
    tape.reshape(rows, &[geo.head_positions.len() * d])
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng::stream;

    fn table_patch() -> PatchConfig {
        PatchConfig { channels: 1, frames: 64, height: 112, width: 112, p_t: 1, p_s: 16, d_model: 384 }
    }

    fn table_egt() -> EgtConfig {
        EgtConfig { lg: 3, hg: 3, wg: 3, inner_param_set: true }
    }

    #[test]
    fn default_patch_arithmetic() {
        let cfg = table_patch();
        assert_eq!(cfg.grid(), [64, 7, 7]);
        assert_eq!(cfg.patch_dim(), 256);
        let bad = PatchConfig { p_s: 5, ..cfg };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unit_patches_are_the_video() {
        let cfg = PatchConfig { channels: 1, frames: 2, height: 3, width: 4, p_t: 1, p_s: 1, d_model: 2 };
        let v = Tensor::<f64>::from_fn([1, 2, 3, 4], |i| i as f64);
        let p = patchify(&v, &cfg).unwrap();
        assert_eq!(p.shape(), &[24, 1]);
        assert_eq!(p.data(), v.data());
    }

    #[test]
    fn patch_layout_is_channel_major_then_t_h_w() {
        let cfg = PatchConfig { channels: 2, frames: 2, height: 2, width: 2, p_t: 2, p_s: 2, d_model: 1 };
        let v = Tensor::<f64>::from_fn([2, 2, 2, 2], |i| i as f64);
        // one patch; video is already laid out C, L, H, W
        assert_eq!(patchify(&v, &cfg).unwrap().data(), v.data());
        let cfg = PatchConfig { channels: 1, frames: 1, height: 2, width: 4, p_t: 1, p_s: 2, d_model: 1 };
        let v = Tensor::<f64>::from_fn([1, 1, 2, 4], |i| i as f64);
        assert_eq!(patchify(&v, &cfg).unwrap().data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(c in 1usize..3, lt in 1usize..3, pt in 1usize..3, hs in 1usize..3, ws in 1usize..3, ps in 1usize..4, seed in any::<u64>()) {
            let cfg = PatchConfig { channels: c, frames: lt * pt, height: hs * ps, width: ws * ps, p_t: pt, p_s: ps, d_model: 1 };
            let mut rng = stream(seed, 0);
            let v = Tensor::<f32>::from_fn(cfg.video_shape().to_vec(), |_| rng.random());
            let back = unpatchify(&patchify(&v, &cfg).unwrap(), &cfg).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn shape_law_and_class_partition(lp in 1usize..6, hp in 1usize..5, wp in 1usize..5, lg in 2usize..4, hg in 2usize..4, wg in 2usize..4, inner in any::<bool>()) {
            let egt = EgtConfig { lg, hg, wg, inner_param_set: inner };
            let geo = TokenGeometry::new([lp, hp, wp], &egt).unwrap();
            prop_assert_eq!(geo.extents, [lp + lg, hp + hg, wp + wg]);
            prop_assert_eq!(geo.patch_positions.len(), lp * hp * wp);
            prop_assert_eq!(geo.global_positions.len() + geo.patch_positions.len(), geo.num_tokens());
            let fams: HashSet<usize> = geo.geometric_families.iter().copied().collect();
            prop_assert_eq!(fams.iter().filter(|f| FACE_FAMILIES.contains(f)).count(), 6);
            prop_assert_eq!(fams.iter().filter(|f| EDGE_FAMILIES.contains(f)).count(), 12);
            prop_assert_eq!(fams.iter().filter(|f| VERTEX_FAMILIES.contains(f)).count(), 8);
            prop_assert_eq!(geo.classes.iter().filter(|c| **c == TokenClass::Vertex).count(), 8);
            prop_assert_eq!(geo.head_positions.len(), lg * hg * wg);
            for &h in &geo.head_positions {
                prop_assert!(geo.classes[h] != TokenClass::Patch);
            }
            prop_assert!(geo.global_families.iter().all(|&f| f < egt.families()));
        }
    }

    #[test]
    fn plane_position_examples() {
        assert_eq!(plane_positions(64, 3).unwrap(), vec![0, 33, 66]);
        assert_eq!(plane_positions(7, 2).unwrap(), vec![0, 8]);
        assert_eq!(plane_positions(7, 3).unwrap(), vec![0, 5, 9]);
        assert!(plane_positions(7, 1).is_err());
    }

    #[test]
    fn default_cube_counts() {
        let geo = TokenGeometry::new(table_patch().grid(), &table_egt()).unwrap();
        assert_eq!(geo.extents, [67, 10, 10]);
        assert_eq!(geo.num_tokens(), 6700);
        assert_eq!(geo.global_positions.len(), 3564);
        assert_eq!(geo.head_positions.len() * 384, 10368);
    }

    #[test]
    fn shell_only_counts() {
        let (lp, hp, wp) = (3, 2, 4);
        let geo = TokenGeometry::new([lp, hp, wp], &EgtConfig { lg: 2, hg: 2, wg: 2, inner_param_set: false }).unwrap();
        assert_eq!(geo.global_positions.len(), (lp + 2) * (hp + 2) * (wp + 2) - lp * hp * wp);
        assert!(geo.classes.iter().all(|c| *c != TokenClass::Inner));
        let heads: Vec<TokenClass> = geo.head_positions.iter().map(|&p| geo.classes[p]).collect();
        assert_eq!(heads, vec![TokenClass::Vertex; 8]);
    }

    #[test]
    fn middle_plane_only_token_is_inner() {
        let egt = EgtConfig { lg: 3, hg: 2, wg: 2, inner_param_set: true };
        let geo = TokenGeometry::new([4, 2, 2], &egt).unwrap();
        let mid = geo.planes[0][1];
        let pos = geo.position([mid, 1, 1]);
        assert_eq!(geo.classes[pos], TokenClass::Inner);
        let i = geo.global_positions.iter().position(|&p| p == pos).unwrap();
        assert_eq!(geo.global_families[i], INNER_FAMILY);
        // shell wins when a middle plane meets a boundary plane
        assert_eq!(geo.classes[geo.position([mid, 0, 1])], TokenClass::Face);
        assert_eq!(geo.classes[geo.position([mid, 0, 0])], TokenClass::Edge);
    }

    #[test]
    fn inner_tokens_fall_back_to_nearest_face() {
        let egt = EgtConfig { lg: 3, hg: 2, wg: 2, inner_param_set: false };
        let geo = TokenGeometry::new([4, 2, 2], &egt).unwrap();
        // extents [7, 4, 4]; the middle L plane sits at 3; (3, 1, 2) is one step from h=0 and w=3
        let pos = geo.position([3, 1, 2]);
        let i = geo.global_positions.iter().position(|&p| p == pos).unwrap();
        assert_eq!(geo.geometric_families[i], INNER_FAMILY);
        assert_eq!(geo.global_families[i], 2); // H axis, first end: ties go to the lower face
    }

    #[test]
    fn insert_places_patches_and_family_vectors() {
        let egt = EgtConfig { lg: 2, hg: 2, wg: 2, inner_param_set: true };
        let geo = TokenGeometry::new([2, 1, 1], &egt).unwrap();
        let gt: GlobalTokens<f64> = GlobalTokens::init("egt", &egt, 2, &mut stream(0, 1));
        let mut tape = Tape::new();
        let emb = tape.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let cube = gt.insert(&mut tape, emb, &geo).unwrap();
        let v = tape.value(cube);
        assert_eq!(v.shape(), &[36, 2]);
        for (k, &p) in geo.patch_positions.iter().enumerate() {
            assert_eq!(&v.data()[p * 2..p * 2 + 2], &[1.0 + 2.0 * k as f64, 2.0 + 2.0 * k as f64]);
        }
        for (&p, &f) in geo.global_positions.iter().zip(&geo.global_families) {
            assert_eq!(&v.data()[p * 2..p * 2 + 2], &gt.families.value.data()[f * 2..f * 2 + 2]);
        }
    }

    #[test]
    fn positional_broadcast_and_gradient() {
        let mut pe: PositionalEmbeddings<f64> = PositionalEmbeddings::init("pos", [3, 4, 5], 2, &mut stream(0, 2));
        let cube = Tensor::<f64>::from_fn([3, 4, 5, 2], |i| i as f64);
        let zeroed = {
            let mut z = pe.clone();
            z.visit_mut(&mut |p| p.value = Tensor::zeros(p.value.shape().to_vec()));
            z
        };
        let mut tape = Tape::new();
        let c = tape.constant(cube.clone());
        let y = zeroed.add(&mut tape, c).unwrap();
        assert_eq!(tape.value(y), &cube);

        pe.p_h.value = Tensor::zeros([4, 2]);
        pe.p_w.value = Tensor::zeros([5, 2]);
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros([3, 4, 5, 2]));
        let y = pe.add(&mut tape, c).unwrap();
        let v = tape.value(y);
        for l in 0..3 {
            let first = &v.data()[l * 40..l * 40 + 2];
            for hw in 0..20 {
                assert_eq!(&v.data()[l * 40 + hw * 2..l * 40 + hw * 2 + 2], first);
            }
        }
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        let grads = tape.param_grads();
        assert!(grads["pos.h"].data().iter().all(|&g| g == 3.0 * 5.0));
        assert!(grads["pos.l"].data().iter().all(|&g| g == 20.0));
    }

    #[test]
    fn head_features_read_plane_intersections() {
        let egt = EgtConfig { lg: 2, hg: 3, wg: 2, inner_param_set: true };
        let geo = TokenGeometry::new([2, 2, 1], &egt).unwrap();
        let n = geo.num_tokens();
        let mut vals = Tensor::<f64>::from_fn([n, 3], |i| i as f64 + 1.0);
        let mut tape = Tape::new();
        let c = tape.constant(vals.clone());
        let f = extract_head_features(&mut tape, c, &geo).unwrap();
        assert_eq!(tape.shape(f), &[12 * 3]);
        let first = geo.position([geo.planes[0][0], geo.planes[1][0], geo.planes[2][0]]);
        assert_eq!(&tape.value(f).data()[..3], &vals.data()[first * 3..first * 3 + 3]);
        let second = geo.position([geo.planes[0][0], geo.planes[1][0], geo.planes[2][1]]);
        assert_eq!(&tape.value(f).data()[3..6], &vals.data()[second * 3..second * 3 + 3]);

        for &p in &geo.global_positions {
            vals.data_mut()[p * 3..p * 3 + 3].fill(0.0);
        }
        let c = tape.constant(vals);
        let f = extract_head_features(&mut tape, c, &geo).unwrap();
        assert_eq!(tape.value(f).max_abs(), 0.0);
    }
}
