//! Raw slice kernels used by the tape. Shapes are validated by the caller.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `ow` whose input column `ow·stride + kj − pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, pad) = (g.stride, g.padding);
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(s) };
    let hi = if g.w + pad > kj { ((g.w + pad - kj - 1) / s + 1).min(g.w_out) } else { 0 };
    (lo.min(hi), hi)
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (slot, &v) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *slot = v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    let p = g.out_pixels();
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let plane = &mut input_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - pad;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    if lo == hi {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let first = lo * g.stride + kj - g.padding;
                    let s_row = &src[oh * g.w_out + lo..oh * g.w_out + hi];
                    if g.stride == 1 {
                        dst[first..first + hi - lo].iter_mut().zip(s_row).for_each(|(d, &v)| *d += v);
                    } else {
                        dst[first..].iter_mut().step_by(g.stride).zip(s_row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted bounds keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` because it is a distinct &mut borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Forward convolution. Returns the output and the unfolded patches of every image.
pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let mut cols = vec![0.0; g.n * k * p];
    let mut out = vec![0.0; g.n * out_stride];
    for i in 0..g.n {
        let col = &mut cols[i * k * p..(i + 1) * k * p];
        im2col(&input[i * in_stride..(i + 1) * in_stride], g, col);
        gemm(
            g.c_out,
            k,
            p,
            1.0,
            kernel,
            (k, 1),
            col,
            (p, 1),
            0.0,
            &mut out[i * out_stride..(i + 1) * out_stride],
        );
    }
    (out, cols)
}

/// Accumulates kernel and (optionally) input gradients from the output gradient.
pub(crate) fn conv2d_backward(
    grad_out: &[f64],
    kernel: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    kernel_grad: Option<&mut [f64]>,
    input_grad: Option<&mut [f64]>,
) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    if let Some(kg) = kernel_grad {
        for i in 0..g.n {
            gemm(
                g.c_out,
                p,
                k,
                1.0,
                &grad_out[i * out_stride..(i + 1) * out_stride],
                (p, 1),
                &cols[i * k * p..(i + 1) * k * p],
                (1, p),
                1.0,
                kg,
            );
        }
    }
    if let Some(ig) = input_grad {
        let mut dcols = vec![0.0; k * p];
        for i in 0..g.n {
            gemm(
                k,
                g.c_out,
                p,
                1.0,
                kernel,
                (1, k),
                &grad_out[i * out_stride..(i + 1) * out_stride],
                (p, 1),
                0.0,
                &mut dcols,
            );
            col2im_add(&dcols, g, &mut ig[i * in_stride..(i + 1) * in_stride]);
        }
    }
}

/// Max pooling over `[N, C, H, W]`. Returns output and the flat input index of each maximum
/// (first occurrence wins on ties).
pub(crate) fn max_pool_forward(
    input: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    size: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let h_out = (h - size) / stride + 1;
    let w_out = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * h_out * w_out);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oh * stride * w + ow * stride;
                for ki in 0..size {
                    let row = base + (oh * stride + ki) * w + ow * stride;
                    for kj in 0..size {
                        let v = input[row + kj];
                        if v > best {
                            best = v;
                            best_idx = row + kj;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, h_out, w_out)
}
