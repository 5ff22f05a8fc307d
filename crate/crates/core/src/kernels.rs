//! Low-level dense kernels: GEMM wrapper and im2col-based convolution.
//!
//! Everything here is single-threaded with a fixed accumulation order, which
//! keeps training bitwise reproducible for a given seed.

/// Flushes subnormal floats to zero on the current thread while alive.
///
/// Long training runs drive some activations and gradients into the
/// subnormal range, where x86 arithmetic slows down by orders of magnitude.
/// The previous control state is restored on drop.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    pub fn new() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        const FTZ_DAZ: u32 = 0x8040;
        // SAFETY: only the flush-to-zero and denormals-are-zero bits change.
        let saved = unsafe { _mm_getcsr() };
        unsafe { _mm_setcsr(saved | FTZ_DAZ) };
        Self { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub fn new() -> Self {
        Self {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        #[allow(deprecated)]
        // SAFETY: restores the state read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

/// `C = A·B + beta·C` with explicit row/column strides for `A` and `B`.
/// `C` is dense row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    gemm_ldc(m, k, n, a, sa, b, sb, beta, c, n);
}

/// As [`gemm`], with row stride `ldc` for `C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ldc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n);
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every access of the three operands.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows per column-matrix block, sized to stay cache resident.
    fn rows_per_block(&self) -> usize {
        const TARGET: usize = 1 << 15;
        (TARGET / (self.patch() * self.out_w()).max(1)).clamp(1, self.out_h())
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` is inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let wo = self.out_w();
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride).min(wo);
        // largest ox with ox·stride + kx < w + pad
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds output rows `[oy0, oy1)` of one CHW image into a
/// `(C·k·k) × ((oy1−oy0)·Wo)` column matrix.
pub(crate) fn im2col_rows(x: &[f32], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [f32]) {
    let wo = g.out_w();
    let k = g.kernel;
    let span = (oy1 - oy0) * wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * span..(row + 1) * span];
                let (lo, hi) = g.valid_cols(kx);
                for oy in oy0..oy1 {
                    let line = &mut dst[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (j, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: scatter-adds the block back into a CHW image.
pub(crate) fn col2im_rows(cols: &[f32], g: &ConvGeom, oy0: usize, oy1: usize, x: &mut [f32]) {
    let wo = g.out_w();
    let k = g.kernel;
    let span = (oy1 - oy0) * wo;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * span..(row + 1) * span];
                let (lo, hi) = g.valid_cols(kx);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || hi == lo {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line[lo..hi].iter().enumerate() {
                            dst[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    im2col_rows(x, g, 0, g.out_h(), cols);
}

#[cfg(test)]
fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    col2im_rows(cols, g, 0, g.out_h(), x);
}

/// Batched convolution forward. `x` is NCHW, `weight` is `[C_out, C_in, k, k]`.
pub(crate) fn conv2d_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    bias: &[f32],
    c_out: usize,
) -> Vec<f32> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let patch = g.patch();
    let in_per = g.c_in * g.h * g.w;
    let block = g.rows_per_block();
    let mut out = vec![0.0f32; batch * c_out * hw_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; patch * block * wo]
    };
    for n in 0..batch {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let on = &mut out[n * c_out * hw_out..(n + 1) * c_out * hw_out];
        for (co, row) in on.chunks_mut(hw_out).enumerate() {
            row.fill(bias[co]);
        }
        if g.is_pointwise() {
            gemm(
                c_out,
                patch,
                hw_out,
                weight,
                (patch, 1),
                xn,
                (hw_out, 1),
                1.0,
                on,
            );
            continue;
        }
        for oy0 in (0..ho).step_by(block) {
            let oy1 = (oy0 + block).min(ho);
            let span = (oy1 - oy0) * wo;
            im2col_rows(xn, g, oy0, oy1, &mut cols);
            let c = &mut on[oy0 * wo..];
            gemm_ldc(
                c_out,
                patch,
                span,
                weight,
                (patch, 1),
                &cols,
                (span, 1),
                1.0,
                c,
                hw_out,
            );
        }
    }
    out
}

/// Input gradient of a stride-1 convolution: correlate `grad_out` with
/// `w'[ci, co, ky, kx] = w[co, ci, k−1−ky, k−1−kx]` under padding `k−1−pad`.
fn input_grad_stride1(
    g: &ConvGeom,
    weight: &[f32],
    c_out: usize,
    grad_out: &[f32],
    batch: usize,
) -> Vec<f32> {
    let k = g.kernel;
    let mut flipped = vec![0.0f32; weight.len()];
    for co in 0..c_out {
        for ci in 0..g.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * c_out + co) * k + ky) * k + kx] =
                        weight[((co * g.c_in + ci) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                }
            }
        }
    }
    let tg = ConvGeom {
        c_in: c_out,
        h: g.out_h(),
        w: g.out_w(),
        kernel: k,
        stride: 1,
        pad: k - 1 - g.pad,
    };
    debug_assert_eq!((tg.out_h(), tg.out_w()), (g.h, g.w));
    conv2d_forward(grad_out, batch, &tg, &flipped, &vec![0.0; g.c_in], g.c_in)
}

/// Batched convolution backward. Returns `(grad_x, grad_weight, grad_bias)`;
/// `grad_x` is skipped when `need_x` is false.
pub(crate) fn conv2d_backward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    c_out: usize,
    grad_out: &[f32],
    need_x: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw_out = ho * wo;
    let patch = g.patch();
    let in_per = g.c_in * g.h * g.w;
    let block = g.rows_per_block();
    let mut grad_w = vec![0.0f32; c_out * patch];
    let mut grad_b = vec![0.0f32; c_out];
    // A stride-1 convolution's input gradient is itself a convolution of the
    // output gradient with the flipped, transposed kernel; that form keeps the
    // GEMM inner dimension at `c_out·k²` instead of `c_out`.
    let transposed = need_x && g.stride == 1 && !g.is_pointwise() && g.pad < g.kernel;
    let mut grad_x = if transposed {
        Some(input_grad_stride1(g, weight, c_out, grad_out, batch))
    } else {
        need_x.then(|| vec![0.0f32; batch * in_per])
    };
    let col_grad = need_x && !transposed;
    let block_len = if g.is_pointwise() {
        0
    } else {
        patch * block * wo
    };
    let mut cols = vec![0.0f32; block_len];
    let mut grad_cols = vec![0.0f32; if col_grad { block_len } else { 0 }];
    for n in 0..batch {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let gn = &grad_out[n * c_out * hw_out..(n + 1) * c_out * hw_out];
        for (co, row) in gn.chunks(hw_out).enumerate() {
            grad_b[co] += row.iter().sum::<f32>();
        }
        if g.is_pointwise() {
            // dW += dY · Xᵀ, dX = Wᵀ · dY
            gemm(
                c_out,
                hw_out,
                patch,
                gn,
                (hw_out, 1),
                xn,
                (1, hw_out),
                1.0,
                &mut grad_w,
            );
            if let Some(gx) = grad_x.as_mut() {
                let gxn = &mut gx[n * in_per..(n + 1) * in_per];
                gemm(
                    patch,
                    c_out,
                    hw_out,
                    weight,
                    (1, patch),
                    gn,
                    (hw_out, 1),
                    0.0,
                    gxn,
                );
            }
            continue;
        }
        for oy0 in (0..ho).step_by(block) {
            let oy1 = (oy0 + block).min(ho);
            let span = (oy1 - oy0) * wo;
            let g_block = &gn[oy0 * wo..];
            im2col_rows(xn, g, oy0, oy1, &mut cols);
            // dW += dY_block · colsᵀ
            gemm(
                c_out,
                span,
                patch,
                g_block,
                (hw_out, 1),
                &cols,
                (1, span),
                1.0,
                &mut grad_w,
            );
            if let (true, Some(gx)) = (col_grad, grad_x.as_mut()) {
                let gxn = &mut gx[n * in_per..(n + 1) * in_per];
                gemm(
                    patch,
                    c_out,
                    span,
                    weight,
                    (1, patch),
                    g_block,
                    (hw_out, 1),
                    0.0,
                    &mut grad_cols[..patch * span],
                );
                col2im_rows(&grad_cols, g, oy0, oy1, gxn);
            }
        }
    }
    (grad_x, grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], g: &ConvGeom, w: &[f32], b: &[f32], c_out: usize) -> Vec<f32> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; c_out * ho * wo];
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    acc += w[((co * g.c_in + ci) * g.kernel + ky) * g.kernel + kx]
                                        * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(kernel, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let g = ConvGeom {
                c_in: 3,
                h: 6,
                w: 8,
                kernel,
                stride,
                pad,
            };
            let x: Vec<f32> = (0..3 * 48)
                .map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1)
                .collect();
            let w: Vec<f32> = (0..4 * g.patch())
                .map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2)
                .collect();
            let b = [0.1, -0.2, 0.3, 0.0];
            let got = conv2d_forward(&x, 1, &g, &w, &b, 4);
            let want = naive_conv(&x, &g, &w, &b, 4);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-5, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn blocked_conv_and_backward_are_consistent() {
        // enough channels that the column matrix is split into several row blocks
        for stride in [1, 2] {
            blocked_case(ConvGeom {
                c_in: 64,
                h: 10,
                w: 40,
                kernel: 3,
                stride,
                pad: 1,
            });
        }
        blocked_case(ConvGeom {
            c_in: 3,
            h: 9,
            w: 11,
            kernel: 3,
            stride: 1,
            pad: 1,
        });
        blocked_case(ConvGeom {
            c_in: 3,
            h: 9,
            w: 11,
            kernel: 3,
            stride: 1,
            pad: 0,
        });
    }

    fn blocked_case(g: ConvGeom) {
        let c_out = 2;
        let x: Vec<f32> = (0..g.c_in * g.h * g.w)
            .map(|i| ((i * 31 % 17) as f32 - 8.0) * 0.05)
            .collect();
        let w: Vec<f32> = (0..c_out * g.patch())
            .map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.1)
            .collect();
        let b = [0.0, 0.0];
        let got = conv2d_forward(&x, 1, &g, &w, &b, c_out);
        let want = naive_conv(&x, &g, &w, &b, c_out);
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-3, "{a} vs {e}");
        }
        let gy: Vec<f32> = (0..got.len()).map(|i| (i as f32 * 0.3).sin()).collect();
        let (gx, gw, _) = conv2d_backward(&x, 1, &g, &w, c_out, &gy, true);
        let dot = |a: &[f32], b: &[f32]| {
            a.iter()
                .zip(b)
                .map(|(p, q)| *p as f64 * *q as f64)
                .sum::<f64>()
        };
        let lhs = dot(&gy, &got);
        // the output is linear in both x and w
        assert!((lhs - dot(&gx.unwrap(), &x)).abs() < 1e-2 * lhs.abs().max(1.0));
        assert!((lhs - dot(&gw, &w)).abs() < 1e-2 * lhs.abs().max(1.0));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 7,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..70).map(|i| (i as f32 * 0.37).sin()).collect();
        let cols_len = g.patch() * g.out_h() * g.out_w();
        let y: Vec<f32> = (0..cols_len).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cols_len];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols
            .iter()
            .zip(&y)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back
            .iter()
            .zip(&x)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
