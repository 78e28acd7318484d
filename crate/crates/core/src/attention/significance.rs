use alloc::vec;
use alloc::vec::Vec;

use super::AttentionGroupSpec;
use crate::error::{shape_err, Result};
use crate::numerics::{Real, Tensor};

/// Column mass of one head's windowed attention, scattered to the merged
/// grid, scaled by `1/(h*w)`, nearest-upsampled and divided by `s^2`.
///
/// `probs(window, query, key)` reads the attention probability.
fn accumulate<T: Real>(
    spec: &AttentionGroupSpec,
    h: usize,
    w: usize,
    probs: impl Fn(usize, usize, usize) -> T,
) -> Vec<T> {
    let (s, m) = (spec.scale, spec.window);
    let (hk, wk) = (h / s, w / s);
    let nwx = wk / m;
    let nw = spec.windows(h, w);
    let lq = spec.query_window() * spec.query_window();
    let mut merged = vec![T::ZERO; hk * wk];
    for win in 0..nw {
        let (wy, wx) = (win / nwx, win % nwx);
        for key in 0..m * m {
            let (ty, tx) = (key / m, key % m);
            let mut col = T::ZERO;
            for query in 0..lq {
                col += probs(win, query, key);
            }
            merged[(wy * m + ty) * wk + wx * m + tx] += col;
        }
    }
    let norm = T::from_usize(h * w) * T::from_usize(s * s);
    let mut map = vec![T::ZERO; h * w];
    for y in 0..h {
        for x in 0..w {
            map[y * w + x] = merged[(y / s) * wk + x / s] / norm;
        }
    }
    map
}

/// Significance map `[h, w]` of one head from its attention `[nw, (sM)^2, M^2]`
/// on a single image. Sums to 1 when the attention rows are normalised.
pub fn significance_accumulate<T: Real>(
    atten: &Tensor<T>,
    spec: &AttentionGroupSpec,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    spec.validate(h, w)?;
    let lq = spec.query_window() * spec.query_window();
    let lk = spec.window * spec.window;
    let want = [spec.windows(h, w), lq, lk];
    if atten.shape() != want {
        return Err(shape_err("significance_accumulate", atten.shape(), &want));
    }
    let a = atten.data();
    let map = accumulate(spec, h, w, |win, q, k| a[(win * lq + q) * lk + k]);
    Tensor::new(&[h, w], map)
}

/// Per-head maps `[b, h, w]` from batched attention `[b, nw, heads, (sM)^2, M^2]`.
pub fn significance_batched<T: Real>(
    atten: &Tensor<T>,
    spec: &AttentionGroupSpec,
    h: usize,
    w: usize,
) -> Result<Vec<Tensor<T>>> {
    spec.validate(h, w)?;
    let s = atten.shape();
    let (nw, heads) = (spec.windows(h, w), spec.heads);
    let lq = spec.query_window() * spec.query_window();
    let lk = spec.window * spec.window;
    if s.len() != 5 || s[1..] != [nw, heads, lq, lk] {
        return Err(shape_err("significance_batched", s, &[nw, heads, lq, lk]));
    }
    let b = s[0];
    let a = atten.data();
    let mut out = Vec::with_capacity(heads);
    for head in 0..heads {
        let mut data = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            data.extend(accumulate(spec, h, w, |win, q, k| {
                a[((((bi * nw + win) * heads + head) * lq) + q) * lk + k]
            }));
        }
        out.push(Tensor::new(&[b, h, w], data)?);
    }
    Ok(out)
}
