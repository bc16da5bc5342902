//! Strided 2-D convolution and transposed convolution with exact adjoints.
//!
//! Both directions are routed through an im2col/col2im pair plus one GEMM,
//! so the heavy lifting stays inside BLAS. Tensors are NCHW; kernels are
//! `(c_out, c_in, k, k)` for convolution and `(c_in, c_out, k, k)` for the
//! transposed direction, matching the usual framework conventions.

use ndarray::{Array1, Array2, Array4};

use crate::error::{Error, Result};

/// Output spatial size of a strided convolution.
pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output spatial size of a strided transposed convolution.
pub(crate) fn tconv_out_dim(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (input - 1) * stride + k + out_pad - 2 * pad
}

/// Gathers kernel taps into a `(c*k*k, n*ph*pw)` matrix.
///
/// Column `(i*ph + py)*pw + px` holds the receptive field of "position"
/// `(py, px)` of sample `i`; tap `(ci, ky, kx)` reads
/// `src[i, ci, py*stride + ky - pad, px*stride + kx - pad]`, zero outside.
fn im2col(
    src: &Array4<f64>,
    positions: (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (n, c, sh, sw) = src.dim();
    let (ph, pw) = positions;
    let mut out = Array2::<f64>::zeros((c * k * k, n * ph * pw));
    let src_slice = src.as_slice().expect("im2col input must be standard layout");
    let out_slice = out.as_slice_mut().unwrap();
    let ncols = n * ph * pw;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * ncols;
                for i in 0..n {
                    let src_base = (i * c + ci) * sh * sw;
                    for py in 0..ph {
                        let sy = (py * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= sh as isize {
                            continue;
                        }
                        let src_row = src_base + sy as usize * sw;
                        let out_base = row_base + (i * ph + py) * pw;
                        for px in 0..pw {
                            let sx = (px * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= sw as isize {
                                continue;
                            }
                            out_slice[out_base + px] = src_slice[src_row + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an NCHW tensor.
fn col2im(
    cols: &Array2<f64>,
    dst_dim: (usize, usize, usize, usize),
    positions: (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, sh, sw) = dst_dim;
    let (ph, pw) = positions;
    let mut dst = Array4::<f64>::zeros(dst_dim);
    let cols_slice = cols.as_slice().expect("col2im input must be standard layout");
    let dst_slice = dst.as_slice_mut().unwrap();
    let ncols = n * ph * pw;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * ncols;
                for i in 0..n {
                    let dst_base = (i * c + ci) * sh * sw;
                    for py in 0..ph {
                        let sy = (py * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= sh as isize {
                            continue;
                        }
                        let dst_row = dst_base + sy as usize * sw;
                        let col_base = row_base + (i * ph + py) * pw;
                        for px in 0..pw {
                            let sx = (px * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= sw as isize {
                                continue;
                            }
                            dst_slice[dst_row + sx as usize] += cols_slice[col_base + px];
                        }
                    }
                }
            }
        }
    }
    dst
}

/// `(c, n*h*w)` view-order matrix from an NCHW tensor (copy).
fn nchw_to_mat(t: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = t.dim();
    let mut out = Array2::<f64>::zeros((c, n * h * w));
    let src = t.as_slice().expect("standard layout");
    let hw = h * w;
    for ci in 0..c {
        for i in 0..n {
            let src_base = (i * c + ci) * hw;
            let dst_base = ci * n * hw + i * hw;
            out.as_slice_mut().unwrap()[dst_base..dst_base + hw]
                .copy_from_slice(&src[src_base..src_base + hw]);
        }
    }
    out
}

/// Inverse copy of [`nchw_to_mat`], optionally adding a per-channel bias.
fn mat_to_nchw(
    m: &Array2<f64>,
    dim: (usize, usize, usize, usize),
    bias: Option<&Array1<f64>>,
) -> Array4<f64> {
    let (n, c, h, w) = dim;
    let mut out = Array4::<f64>::zeros(dim);
    let src = m.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().unwrap();
    let hw = h * w;
    for ci in 0..c {
        let b = bias.map(|b| b[ci]).unwrap_or(0.0);
        for i in 0..n {
            let src_base = ci * n * hw + i * hw;
            let dst_base = (i * c + ci) * hw;
            for p in 0..hw {
                dst[dst_base + p] = src[src_base + p] + b;
            }
        }
    }
    out
}

fn weight_mat(w: &Array4<f64>) -> Array2<f64> {
    let (a, b, k, k2) = w.dim();
    w.view()
        .into_shape_with_order((a, b * k * k2))
        .expect("kernel tensor must be standard layout")
        .to_owned()
}

/// Strided convolution: `y[i,co] = b[co] + sum_ci x[i,ci] * w[co,ci]`.
pub fn conv2d(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Result<Array4<f64>> {
    let (n, c_in, sh, sw) = x.dim();
    let (c_out, c_in_w, k, _) = w.dim();
    if c_in != c_in_w {
        return Err(Error::Shape(format!(
            "convolution expects {c_in_w} input channels, got {c_in}"
        )));
    }
    let oh = conv_out_dim(sh, k, stride, pad);
    let ow = conv_out_dim(sw, k, stride, pad);
    let cols = im2col(x, (oh, ow), k, stride, pad);
    let y_mat = weight_mat(w).dot(&cols);
    Ok(mat_to_nchw(&y_mat, (n, c_out, oh, ow), Some(b)))
}

/// Gradients of a convolution w.r.t. input, kernel, and bias.
pub fn conv2d_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    dy: &Array4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (_, _, oh, ow) = dy.dim();
    let (c_out, _, k, _) = w.dim();
    let dy_mat = nchw_to_mat(dy);
    let db = dy_mat.sum_axis(ndarray::Axis(1));
    let cols = im2col(x, (oh, ow), k, stride, pad);
    let dw_mat = dy_mat.dot(&cols.t());
    let dw = dw_mat
        .into_shape_with_order(w.raw_dim())
        .expect("gradient kernel reshape");
    let dcols = weight_mat(w).t().dot(&dy_mat);
    let dx = col2im(&dcols, x.dim(), (oh, ow), k, stride, pad);
    debug_assert_eq!(db.len(), c_out);
    (dx, dw, db)
}

/// Strided transposed convolution with explicit output padding.
pub fn conv2d_transpose(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
    out_pad: (usize, usize),
) -> Result<Array4<f64>> {
    let (n, c_in, ih, iw) = x.dim();
    let (c_in_w, c_out, k, _) = w.dim();
    if c_in != c_in_w {
        return Err(Error::Shape(format!(
            "transposed convolution expects {c_in_w} input channels, got {c_in}"
        )));
    }
    let oh = tconv_out_dim(ih, k, stride, pad, out_pad.0);
    let ow = tconv_out_dim(iw, k, stride, pad, out_pad.1);
    let x_mat = nchw_to_mat(x);
    let cols = weight_mat(w).t().dot(&x_mat);
    let mut y = col2im(&cols, (n, c_out, oh, ow), (ih, iw), k, stride, pad);
    for (co, mut channel) in y
        .axis_iter_mut(ndarray::Axis(1))
        .enumerate()
    {
        channel += b[co];
    }
    Ok(y)
}

/// Gradients of a transposed convolution w.r.t. input, kernel, and bias.
pub fn conv2d_transpose_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    dy: &Array4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (_, _, ih, iw) = x.dim();
    let (_, c_out, k, _) = w.dim();
    let dcols = im2col(dy, (ih, iw), k, stride, pad);
    let dx_mat = weight_mat(w).dot(&dcols);
    let dx = mat_to_nchw(&dx_mat, x.dim(), None);
    let x_mat = nchw_to_mat(x);
    let dw_mat = x_mat.dot(&dcols.t());
    let dw = dw_mat
        .into_shape_with_order(w.raw_dim())
        .expect("gradient kernel reshape");
    let mut db = Array1::<f64>::zeros(c_out);
    for (co, channel) in dy.axis_iter(ndarray::Axis(1)).enumerate() {
        db[co] = channel.sum();
    }
    (dx, dw, db)
}
