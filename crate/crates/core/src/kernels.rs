//! Raw slice kernels behind the differentiable ops.

use crate::tensor::Element;

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`, all row-major.
///
/// A transposed operand is stored in its untransposed layout (`k×m` for `a`,
/// `n×k` for `b`). Zero entries of `a` are skipped, which pays off on spike inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == F::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == F::zero() {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = F::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    c[i * n + j] += acc;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = F::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one image into `[c_in·kh·kw, h_out·w_out]` columns.
    pub fn im2col<F: Element>(&self, x: &[F], cols: &mut [F]) {
        let hw = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.w_out + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                F::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back onto an image (adjoint of `im2col`).
    pub fn col2im<F: Element>(&self, cols: &[F], x: &mut [F]) {
        let hw = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            x[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise 'same' correlation of `rows` sequences of length `len`;
/// row `r` uses kernel row `r % channels`.
pub(crate) fn conv1d_depthwise<F: Element>(
    x: &[F],
    kernel: &[F],
    channels: usize,
    len: usize,
    k: usize,
    out: &mut [F],
) {
    let pad = (k - 1) / 2;
    for (r, (xrow, orow)) in x
        .chunks_exact(len)
        .zip(out.chunks_exact_mut(len))
        .enumerate()
    {
        let w = &kernel[(r % channels) * k..(r % channels + 1) * k];
        for (i, o) in orow.iter_mut().enumerate() {
            let mut acc = F::zero();
            for (j, &wj) in w.iter().enumerate() {
                let src = i + j;
                if src >= pad && src - pad < len {
                    acc += wj * xrow[src - pad];
                }
            }
            *o = acc;
        }
    }
}
