//! Spatial-temporal chained masking and the encoder that runs on visible
//! tokens only.
//!
//! Masks are drawn on a coarse cell grid (`γt` frames by `γs × γs` patches
//! per cell) and expanded to tokens, so random, tube and frame masking are the
//! extreme settings of the two factors. The masked encoder keeps the visible
//! tokens as one flat sequence and moves between scan orders with cached
//! gathers instead of rebuilding the 3D cube.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::mamba::{Mamba3dStack, ScanOrder, BLOCK_STEPS, NORM_EPS};
use crate::tensor::{Scalar, Tape, Var};
use crate::tokens::TokenGeometry;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub gamma_t: usize,
    pub gamma_s: usize,
    pub p_mask: f64,
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_t == 0 || self.gamma_s == 0 {
            return Err(Error::Config(format!("expansion factors must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.p_mask) {
            return Err(Error::Config(format!("p_mask must lie in [0, 1): {}", self.p_mask)));
        }
        Ok(())
    }

    pub fn cell_grid(&self, grid: [usize; 3]) -> [usize; 3] {
        [grid[0].div_ceil(self.gamma_t), grid[1].div_ceil(self.gamma_s), grid[2].div_ceil(self.gamma_s)]
    }
}

/// Number of masked cells: `p·cells`, ties to even.
pub fn masked_cell_count(p_mask: f64, cells: usize) -> usize {
    (p_mask * cells as f64).round_ties_even() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub config: MaskConfig,
    pub cell_grid: [usize; 3],
    pub cell_mask: Vec<bool>,
    pub token_grid: [usize; 3],
    /// `true` marks a masked patch, in patch raster order.
    pub token_mask: Vec<bool>,
}

impl MaskGrid {
    pub fn masked_tokens(&self) -> usize {
        self.token_mask.iter().filter(|&&m| m).count()
    }

    pub fn cell_of(&self, l: usize, h: usize, w: usize) -> usize {
        let c = &self.config;
        ((l / c.gamma_t) * self.cell_grid[1] + h / c.gamma_s) * self.cell_grid[2] + w / c.gamma_s
    }
}

/// Masks exactly `round(p·cells)` cells chosen uniformly without replacement.
pub fn stc_mask<R: Rng + ?Sized>(grid: [usize; 3], config: MaskConfig, rng: &mut R) -> Result<MaskGrid> {
    config.validate()?;
    if grid.iter().any(|&e| e == 0) {
        return Err(shape_err!("empty token grid {grid:?}"));
    }
    let cell_grid = config.cell_grid(grid);
    let cells: usize = cell_grid.iter().product();
    let mut cell_mask = vec![false; cells];
    for i in rand::seq::index::sample(rng, cells, masked_cell_count(config.p_mask, cells)) {
        cell_mask[i] = true;
    }
    let mut mg = MaskGrid { config, cell_grid, cell_mask, token_grid: grid, token_mask: Vec::with_capacity(grid.iter().product()) };
    for l in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                mg.token_mask.push(mg.cell_mask[mg.cell_of(l, h, w)]);
            }
        }
    }
    Ok(mg)
}

/// Mask over the whole token cube; global tokens are never masked.
pub fn lift_mask(mg: &MaskGrid, geo: &TokenGeometry) -> Result<Vec<bool>> {
    if mg.token_grid != geo.patch_grid {
        return Err(shape_err!("mask grid {:?} vs patch grid {:?}", mg.token_grid, geo.patch_grid));
    }
    let mut full = vec![false; geo.num_tokens()];
    for (&pos, &m) in geo.patch_positions.iter().zip(&mg.token_mask) {
        full[pos] = m;
    }
    Ok(full)
}

/// Index maps between the visible-token sequences of the three scan orders.
/// Each map sends a position in the target order to a rank in the source
/// order, so `x_target = x_source[Ψ]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationCache {
    pub extents: [usize; 3],
    /// Visible cube positions in LHW raster order.
    pub visible: Vec<usize>,
    pub lhw_to_hwl: Vec<usize>,
    pub hwl_to_lwh: Vec<usize>,
    pub lwh_to_lhw: Vec<usize>,
}

impl PermutationCache {
    pub fn build(full_mask: &[bool], extents: [usize; 3]) -> Result<Self> {
        let total: usize = extents.iter().product();
        if full_mask.len() != total {
            return Err(shape_err!("mask of {} entries for extents {extents:?}", full_mask.len()));
        }
        let visible_in = |order: ScanOrder| -> Vec<usize> { order.lhw_indices(extents).into_iter().filter(|&p| !full_mask[p]).collect() };
        let ranks = |seq: &[usize]| -> Vec<usize> {
            let mut r = vec![usize::MAX; total];
            for (i, &p) in seq.iter().enumerate() {
                r[p] = i;
            }
            r
        };
        let lhw = visible_in(ScanOrder::Lhw);
        if lhw.is_empty() {
            return Err(Error::Invalid("every token is masked".into()));
        }
        let hwl = visible_in(ScanOrder::Hwl);
        let lwh = visible_in(ScanOrder::Lwh);
        let (r_lhw, r_hwl, r_lwh) = (ranks(&lhw), ranks(&hwl), ranks(&lwh));
        Ok(Self {
            extents,
            lhw_to_hwl: hwl.iter().map(|&p| r_lhw[p]).collect(),
            hwl_to_lwh: lwh.iter().map(|&p| r_hwl[p]).collect(),
            lwh_to_lhw: lhw.iter().map(|&p| r_lwh[p]).collect(),
            visible: lhw,
        })
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    /// The map applied before entering `order`'s pair of layers.
    pub fn into_order(&self, order: ScanOrder) -> &[usize] {
        match order {
            ScanOrder::Hwl => &self.lhw_to_hwl,
            ScanOrder::Lwh => &self.hwl_to_lwh,
            ScanOrder::Lhw => &self.lwh_to_lhw,
        }
    }
}

/// Cache for a sample's patch mask on the given token geometry.
pub fn cache_for(mg: &MaskGrid, geo: &TokenGeometry) -> Result<PermutationCache> {
    PermutationCache::build(&lift_mask(mg, geo)?, geo.extents)
}

/// Runs the encoder on visible tokens only. `cube` is the flattened
/// `[L·H·W, D]` input; the result has the same shape with encoder outputs at
/// visible positions and zeros elsewhere.
pub fn masked_encode<T: Scalar>(tape: &mut Tape<T>, stack: &Mamba3dStack<T>, cube: Var, cache: &PermutationCache) -> Result<Var> {
    let total: usize = cache.extents.iter().product();
    if tape.shape(cube).len() != 2 || tape.shape(cube)[0] != total {
        return Err(shape_err!("masked_encode: cube {:?} vs cache extents {:?}", tape.shape(cube), cache.extents));
    }
    let mut x = tape.gather_rows(cube, &cache.visible)?;
    for block in &stack.blocks {
        for (pair, order) in block.layers.chunks(2).zip(ScanOrder::BLOCK) {
            x = tape.gather_rows(x, cache.into_order(order))?;
            for (layer, &(o, dir)) in pair.iter().zip(BLOCK_STEPS.iter().filter(|(o, _)| *o == order)) {
                debug_assert_eq!(o, order);
                x = layer.residual(tape, x, dir)?.y;
            }
        }
    }
    let scale = stack.final_norm.bind(tape);
    let x = tape.rms_norm(x, scale, T::of(NORM_EPS))?;
    tape.scatter_rows(x, &cache.visible, total)
}

#[cfg(test)]
mod tests;
