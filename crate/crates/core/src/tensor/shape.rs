// Index arithmetic shared by the tensor kernels.

use crate::error::{shape_err, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index into `src` under broadcasting.
pub(crate) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let src_strides = strides(src);
    let mut eff = vec![0; rank];
    for i in 0..src.len() {
        let o = rank - src.len() + i;
        eff[o] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    if rank == 0 {
        map.push(0);
        return map;
    }
    let inner = out[rank - 1];
    let inner_stride = eff[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            map.push(base + j * inner_stride);
        }
        // advance the outer multi-index
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return map;
            }
            d -= 1;
            idx[d] += 1;
            base += eff[d];
            if idx[d] < out[d] {
                break;
            }
            base -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// For every flat index of a tensor of `shape`, the flat index into the tensor
/// obtained by summing out `axes` (which are dropped from the result shape).
pub(crate) fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    // a broadcast map from the reduced shape (with unit extents) back onto `shape`
    let unit: Vec<usize> = (0..shape.len()).map(|a| if axes.contains(&a) { 1 } else { shape[a] }).collect();
    (broadcast_map(&unit, shape), out_shape)
}

pub(crate) fn permute<T: Copy>(shape: &[usize], data: &[T], perm: &[usize]) -> Result<(Vec<usize>, Vec<T>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err!("invalid permutation {perm:?} for rank {rank}"));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return Ok((out_shape, out));
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    'outer: loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            for j in 0..inner {
                out.push(data[base + j * inner_stride]);
            }
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok((out_shape, out))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, extent, inner) decomposition around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn flip<T: Copy>(shape: &[usize], data: &[T], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(shape, axis);
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for t in (0..n).rev() {
            let s = (o * n + t) * inner;
            out.extend_from_slice(&data[s..s + inner]);
        }
    }
    out
}
