use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Real, Tensor};

/// Gather index taking `[batch, h, w, channels]` to
/// `[batch, windows, heads, win*win, head_dim]`, reading head `i` from
/// channels `(head_offset + i) * head_dim ..`.
///
/// Windows and the tokens inside each window are both in raster order.
pub fn partition_index(
    batch: usize,
    h: usize,
    w: usize,
    channels: usize,
    win: usize,
    heads: usize,
    head_dim: usize,
    head_offset: usize,
) -> Vec<usize> {
    let (nwy, nwx) = (h / win, w / win);
    let mut index = Vec::with_capacity(batch * h * w * heads * head_dim);
    for b in 0..batch {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for head in 0..heads {
                    let ch = (head_offset + head) * head_dim;
                    for ty in 0..win {
                        for tx in 0..win {
                            let base = ((b * h + wy * win + ty) * w + wx * win + tx) * channels + ch;
                            index.extend(base..base + head_dim);
                        }
                    }
                }
            }
        }
    }
    index
}

/// Inverse of a permutation index.
pub fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = alloc::vec![0; index.len()];
    for (i, &j) in index.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// `[h, w, c]` into `[(h/m)*(w/m), m*m, c]`.
pub fn window_partition<T: Real>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || m == 0 || s[0] % m != 0 || s[1] % m != 0 {
        return Err(shape_err("window_partition", s, &[m]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let index = partition_index(1, h, w, c, m, 1, c, 0);
    let data = index.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(&[(h / m) * (w / m), m * m, c], data)
}

/// `[nw, m*m, c]` back onto the `[h, w, c]` grid.
pub fn window_reverse<T: Real>(wins: &Tensor<T>, m: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = wins.shape();
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(config_err("window_reverse grid not divisible by window"));
    }
    if s.len() != 3 || s[0] != (h / m) * (w / m) || s[1] != m * m {
        return Err(shape_err("window_reverse", s, &[(h / m) * (w / m), m * m]));
    }
    let c = s[2];
    let index = partition_index(1, h, w, c, m, 1, c, 0);
    let mut out = alloc::vec![T::ZERO; wins.len()];
    for (i, &j) in index.iter().enumerate() {
        out[j] = wins.data()[i];
    }
    Tensor::new(&[h, w, c], out)
}
