//! im2col / col2im plumbing shared by the convolution layers.

use ndarray::{Array2, ArrayView4, ArrayViewMut4};

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold a `[n, C, H, W]` chunk into `[C*K*K, n*OH*OW]` patch columns.
/// Column index is `(image, oh, ow)` in row-major order; out-of-bounds taps
/// contribute zeros.
pub fn im2col(
    x: &ArrayView4<f32>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let ckk = c * kernel * kernel;
    let cols_n = n * oh * ow;
    let mut cols = Array2::<f32>::zeros((ckk, cols_n));
    let x_slice = x.as_slice().expect("input must be standard layout");
    let cols_slice = cols.as_slice_mut().unwrap();

    for i in 0..n {
        for ci in 0..c {
            let plane = &x_slice[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
            for kh in 0..kernel {
                for kw in 0..kernel {
                    let row = (ci * kernel + kh) * kernel + kw;
                    let row_base = row * cols_n + i * oh * ow;
                    for y in 0..oh {
                        let iy = (y * stride + kh) as isize - pad as isize;
                        let dst = &mut cols_slice[row_base + y * ow..row_base + (y + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            continue; // stays zero
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        // valid ow range: 0 <= ow*stride + kw - pad < w
                        for (xo, d) in dst.iter_mut().enumerate() {
                            let ix = (xo * stride + kw) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add patch columns back onto a `[n, C, H, W]` chunk; the adjoint
/// of [`im2col`]. Also serves as the forward primitive of transpose
/// convolution.
pub fn col2im_add(
    cols: &Array2<f32>,
    out: &mut ArrayViewMut4<f32>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (n, c, h, w) = out.dim();
    let cols_n = n * oh * ow;
    debug_assert_eq!(cols.dim(), (c * kernel * kernel, cols_n));
    let cols_slice = cols.as_slice().unwrap();
    let out_slice = out.as_slice_mut().expect("output must be standard layout");

    for i in 0..n {
        for ci in 0..c {
            let plane = &mut out_slice[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
            for kh in 0..kernel {
                for kw in 0..kernel {
                    let row = (ci * kernel + kh) * kernel + kw;
                    let row_base = row * cols_n + i * oh * ow;
                    for y in 0..oh {
                        let iy = (y * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols_slice[row_base + y * ow..row_base + (y + 1) * ow];
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (xo, s) in src.iter().enumerate() {
                            let ix = (xo * stride + kw) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
