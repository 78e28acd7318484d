//! Raw dense kernels shared by forward and backward passes.

use super::Real;

/// Below this many multiply-adds the packing overhead of the blocked kernel
/// dominates and a plain loop is faster.
const SMALL_GEMM: usize = 8 * 8 * 8;

/// `c (+)= op(a) * op(b)` for row-major `m x k` and `k x n` operands.
///
/// `a_t` means `a` is stored as `k x m`; `b_t` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    if m * k * n <= SMALL_GEMM {
        if !accumulate {
            c.fill(T::ZERO);
        }
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                if b_t {
                    for (j, cv) in row.iter_mut().enumerate() {
                        *cv += av * b[p + j * k];
                    }
                } else {
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        return;
    }
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: the debug-asserted lengths match the strides chosen above and
    // `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a channel-last 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cin = self.cin;
        let patch = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (b * self.oh + oy) * self.ow + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = row * patch + (ky * self.kw + kx) * cin;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * cin;
                            f(col, src);
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `[b, h, w, cin]` into `[b*oh*ow, kh*kw*cin]` patches (zero padded).
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> alloc::vec::Vec<T> {
    let mut cols = alloc::vec![T::ZERO; g.rows() * g.patch_len()];
    let cin = g.cin;
    g.for_each_tap(|col, src| cols[col..col + cin].copy_from_slice(&x[src..src + cin]));
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cin = g.cin;
    g.for_each_tap(|col, src| {
        for (d, &v) in dx[src..src + cin].iter_mut().zip(&cols[col..col + cin]) {
            *d += v;
        }
    });
}

/// Depthwise `k x k` convolution, stride 1, "same" zero padding, on
/// `[b, h, w, c]` with weights `[k, k, c]`.
pub(crate) fn depthwise<T: Real>(
    x: &[T],
    wt: &[T],
    bias: &[T],
    dims: (usize, usize, usize, usize),
    k: usize,
    out: &mut [T],
) {
    let (b, h, w, c) = dims;
    let pad = (k / 2) as isize;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o = ((bi * h + y) * w + xx) * c;
                out[o..o + c].copy_from_slice(bias);
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let wo = (ky * k + kx) * c;
                        for ch in 0..c {
                            out[o + ch] += x[src + ch] * wt[wo + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise`] with respect to input and weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward<T: Real>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    dims: (usize, usize, usize, usize),
    k: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (b, h, w, c) = dims;
    let pad = (k / 2) as isize;
    let mut dx = dx;
    let mut dw = dw;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let o = ((bi * h + y) * w + xx) * c;
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = xx as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let wo = (ky * k + kx) * c;
                        if let Some(dx) = dx.as_deref_mut() {
                            for ch in 0..c {
                                dx[src + ch] += dy[o + ch] * wt[wo + ch];
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            for ch in 0..c {
                                dw[wo + ch] += dy[o + ch] * x[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}
