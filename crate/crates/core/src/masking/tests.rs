use rand::Rng;

use super::*;
use crate::mamba::LayerConfig;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::tokens::EgtConfig;

fn cfg(gamma_t: usize, gamma_s: usize, p_mask: f64) -> MaskConfig {
    MaskConfig { gamma_t, gamma_s, p_mask }
}

#[test]
fn default_shape_counts() {
    let mg = stc_mask([64, 7, 7], cfg(4, 1, 0.8), &mut stream(0, 0)).unwrap();
    assert_eq!(mg.cell_mask.len(), 784);
    assert_eq!(mg.cell_mask.iter().filter(|&&m| m).count(), 627);
    assert_eq!(mg.masked_tokens(), 2508);
    let geo = TokenGeometry::new([64, 7, 7], &EgtConfig { lg: 3, hg: 3, wg: 3, inner_param_set: true }).unwrap();
    let full = lift_mask(&mg, &geo).unwrap();
    assert_eq!(full.iter().filter(|&&m| !m).count(), 4192);
}

#[test]
fn rejects_full_masking_and_zero_factors() {
    assert!(stc_mask([2, 2, 2], cfg(1, 1, 1.0), &mut stream(0, 0)).is_err());
    assert!(stc_mask([2, 2, 2], cfg(0, 1, 0.5), &mut stream(0, 0)).is_err());
}

#[test]
fn masked_count_rounds_ties_to_even() {
    assert_eq!(masked_cell_count(0.5, 5), 2);
    assert_eq!(masked_cell_count(0.5, 7), 4);
    assert_eq!(masked_cell_count(0.8, 784), 627);
}

#[test]
fn tokens_follow_their_cells() {
    for seed in 0..20 {
        let mut rng = stream(seed, 3);
        let grid = [rng.random_range(1..9), rng.random_range(1..6), rng.random_range(1..6)];
        let c = cfg(rng.random_range(1..4), rng.random_range(1..4), rng.random_range(0.0..0.95));
        let mg = stc_mask(grid, c, &mut rng).unwrap();
        let expected_cells = [grid[0].div_ceil(c.gamma_t), grid[1].div_ceil(c.gamma_s), grid[2].div_ceil(c.gamma_s)];
        assert_eq!(mg.cell_grid, expected_cells);
        assert_eq!(mg.cell_mask.iter().filter(|&&m| m).count(), masked_cell_count(c.p_mask, mg.cell_mask.len()));
        let mut i = 0;
        for l in 0..grid[0] {
            for h in 0..grid[1] {
                for w in 0..grid[2] {
                    let cell = ((l / c.gamma_t) * expected_cells[1] + h / c.gamma_s) * expected_cells[2] + w / c.gamma_s;
                    assert_eq!(mg.token_mask[i], mg.cell_mask[cell]);
                    i += 1;
                }
            }
        }
    }
}

#[test]
fn tube_and_frame_special_cases() {
    let grid = [6, 4, 5];
    for seed in 0..10 {
        let tube = stc_mask(grid, cfg(6, 1, 0.5), &mut stream(seed, 1)).unwrap();
        for hw in 0..20 {
            let column: Vec<bool> = (0..6).map(|l| tube.token_mask[l * 20 + hw]).collect();
            assert!(column.iter().all(|&m| m == column[0]));
        }
        let frames = stc_mask(grid, cfg(1, 5, 0.5), &mut stream(seed, 2)).unwrap();
        for l in 0..6 {
            let f = &frames.token_mask[l * 20..(l + 1) * 20];
            assert!(f.iter().all(|&m| m == f[0]));
        }
        assert_eq!(frames.masked_tokens(), 3 * 20);
    }
}

#[test]
fn lift_leaves_globals_visible() {
    let geo = TokenGeometry::new([4, 3, 3], &EgtConfig { lg: 2, hg: 3, wg: 2, inner_param_set: true }).unwrap();
    let none = stc_mask([4, 3, 3], cfg(1, 1, 0.0), &mut stream(0, 0)).unwrap();
    assert!(lift_mask(&none, &geo).unwrap().iter().all(|&m| !m));
    let mg = stc_mask([4, 3, 3], cfg(2, 1, 0.6), &mut stream(1, 0)).unwrap();
    let full = lift_mask(&mg, &geo).unwrap();
    assert_eq!(full.iter().filter(|&&m| m).count(), mg.masked_tokens());
    assert!(geo.global_positions.iter().all(|&p| !full[p]));
}

#[test]
fn unmasked_cache_examples() {
    let one = PermutationCache::build(&[false], [1, 1, 1]).unwrap();
    assert_eq!((one.lhw_to_hwl.as_slice(), one.hwl_to_lwh.as_slice(), one.lwh_to_lhw.as_slice()), (&[0][..], &[0][..], &[0][..]));
    let c = PermutationCache::build(&[false; 8], [2, 2, 2]).unwrap();
    assert_eq!(c.lhw_to_hwl, vec![0, 4, 1, 5, 2, 6, 3, 7]);
    assert_eq!(c.hwl_to_lwh, vec![0, 4, 2, 6, 1, 5, 3, 7]);
    assert_eq!(c.lwh_to_lhw, vec![0, 2, 1, 3, 4, 6, 5, 7]);
    assert!(PermutationCache::build(&[true; 8], [2, 2, 2]).is_err());
}

fn random_mask(rng: &mut impl Rng, ext: [usize; 3]) -> Vec<bool> {
    let n: usize = ext.iter().product();
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let keep = rng.random_range(0..n);
    m[keep] = false;
    m
}

#[test]
fn permutations_compose_to_identity_and_match_cube_reorders() {
    for trial in 0..100 {
        let mut rng = stream(trial, 5);
        let ext = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
        let mask = random_mask(&mut rng, ext);
        let c = PermutationCache::build(&mask, ext).unwrap();
        let n = c.len();
        for psi in [&c.lhw_to_hwl, &c.hwl_to_lwh, &c.lwh_to_lhw] {
            let mut sorted = psi.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
        for j in 0..n {
            assert_eq!(c.lhw_to_hwl[c.hwl_to_lwh[c.lwh_to_lhw[j]]], j);
        }
        // reference: scatter the sequence into a cube, permute axes, flatten, keep visible
        let values: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let mut cube = vec![0u64; mask.len()];
        for (&p, &v) in c.visible.iter().zip(&values) {
            cube[p] = v;
        }
        let mut seq = values.clone();
        for order in ScanOrder::BLOCK {
            seq = c.into_order(order).iter().map(|&i| seq[i]).collect();
            let reference: Vec<u64> = order.lhw_indices(ext).into_iter().filter(|&p| !mask[p]).map(|p| cube[p]).collect();
            assert_eq!(seq, reference, "{order:?}");
        }
        assert_eq!(seq, values);
    }
}

#[test]
fn gather_scatter_round_trip_is_exact() {
    let mut rng = stream(9, 9);
    let ext = [3, 4, 2];
    let mask = random_mask(&mut rng, ext);
    let c = PermutationCache::build(&mask, ext).unwrap();
    let cube = Tensor::<f64>::from_fn([24, 3], |_| rng.random());
    let mut tape = Tape::new();
    let x = tape.constant(cube.clone());
    let seq = tape.gather_rows(x, &c.visible).unwrap();
    let back = tape.scatter_rows(seq, &c.visible, 24).unwrap();
    for (r, &m) in mask.iter().enumerate() {
        let got = &tape.value(back).data()[r * 3..r * 3 + 3];
        if m {
            assert_eq!(got, &[0.0; 3]);
        } else {
            assert_eq!(got, &cube.data()[r * 3..r * 3 + 3]);
        }
    }
}

fn small_stack(d: usize, depth: usize, seed: u64) -> Mamba3dStack<f64> {
    let lc = LayerConfig { d_model: d, expand: 2, conv_kernel: 3, n_state: 2 };
    Mamba3dStack::init("enc", depth, &lc, &mut stream(seed, 1))
}

/// Keeps the whole cube, and at every sub-step re-gathers the visible tokens
/// in the current order, runs the layer, and writes them back.
fn reference_encode(stack: &Mamba3dStack<f64>, cube: &Tensor<f64>, mask: &[bool], ext: [usize; 3]) -> Tensor<f64> {
    let d = cube.shape()[1];
    let mut state = cube.clone();
    for block in &stack.blocks {
        for (layer, &(order, dir)) in block.layers.iter().zip(BLOCK_STEPS.iter()) {
            let rows: Vec<usize> = order.lhw_indices(ext).into_iter().filter(|&p| !mask[p]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(state.clone());
            let seq = tape.gather_rows(x, &rows).unwrap();
            let y = layer.residual(&mut tape, seq, dir).unwrap().y;
            let yv = tape.value(y);
            for (i, &p) in rows.iter().enumerate() {
                state.data_mut()[p * d..(p + 1) * d].copy_from_slice(&yv.data()[i * d..(i + 1) * d]);
            }
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(state);
    let s = stack.final_norm.bind(&mut tape);
    let y = tape.rms_norm(x, s, NORM_EPS).unwrap();
    tape.value(y).clone()
}

#[test]
fn masked_encoder_matches_full_cube_reference() {
    for trial in 0..20 {
        let mut rng = stream(trial, 11);
        let ext = [rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4)];
        let d = rng.random_range(1..4);
        let stack = small_stack(d, rng.random_range(1..3), trial);
        let mask = random_mask(&mut rng, ext);
        let cache = PermutationCache::build(&mask, ext).unwrap();
        let total = mask.len();
        let cube = Tensor::<f64>::from_fn([total, d], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let x = tape.constant(cube.clone());
        let y = masked_encode(&mut tape, &stack, x, &cache).unwrap();
        let want = reference_encode(&stack, &cube, &mask, ext);
        let got = tape.value(y);
        for p in 0..total {
            let (g, w) = (&got.data()[p * d..(p + 1) * d], &want.data()[p * d..(p + 1) * d]);
            if mask[p] {
                assert!(g.iter().all(|&v| v == 0.0));
            } else {
                for (a, b) in g.iter().zip(w) {
                    assert!((a - b).abs() <= 1e-10, "trial {trial} pos {p}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn unmasked_path_is_bit_identical_to_full_encoder() {
    let stack = small_stack(3, 2, 4);
    let ext = [3, 2, 4];
    let cube = Tensor::<f64>::from_fn([24, 3], |i| ((i * 37) % 11) as f64 / 7.0 - 0.6);
    let cache = PermutationCache::build(&[false; 24], ext).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(cube.clone());
    let masked = masked_encode(&mut tape, &stack, x, &cache).unwrap();
    let c4 = tape.constant(cube.reshape([3, 2, 4, 3]).unwrap());
    let full = stack.forward(&mut tape, c4, None).unwrap();
    assert_eq!(tape.value(masked).data(), tape.value(full).data());
}

#[test]
fn single_visible_token_is_a_per_token_stack() {
    let stack = small_stack(2, 2, 6);
    let ext = [2, 2, 2];
    let mut mask = vec![true; 8];
    mask[5] = false;
    let cache = PermutationCache::build(&mask, ext).unwrap();
    let cube = Tensor::<f64>::from_fn([8, 2], |i| i as f64 * 0.1 - 0.3);
    let mut tape = Tape::new();
    let x = tape.constant(cube.clone());
    let y = masked_encode(&mut tape, &stack, x, &cache).unwrap();

    let mut t2 = Tape::new();
    let mut tok = t2.constant(Tensor::from_f64([1, 2], &cube.to_f64_vec()[10..12]).unwrap());
    for block in &stack.blocks {
        for (layer, &(_, dir)) in block.layers.iter().zip(BLOCK_STEPS.iter()) {
            tok = layer.residual(&mut t2, tok, dir).unwrap().y;
        }
    }
    let s = stack.final_norm.bind(&mut t2);
    let tok = t2.rms_norm(tok, s, NORM_EPS).unwrap();
    assert_eq!(&tape.value(y).data()[10..12], t2.value(tok).data());
}

#[test]
fn token_masking_frequency_is_binomial() {
    let draws = 10_000;
    let grid = [2, 2, 2];
    let p = 0.5;
    let mut hits = [0usize; 8];
    for seed in 0..draws {
        let mg = stc_mask(grid, cfg(1, 1, p), &mut stream(seed, crate::rng::ids::MASK)).unwrap();
        for (h, &m) in hits.iter_mut().zip(&mg.token_mask) {
            *h += m as usize;
        }
    }
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for &h in &hits {
        assert!((h as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{hits:?}");
    }
}
