//! 2-D convolution and stride-2 transposed convolution on (C, H, W) tensors.
//!
//! Forward and backward passes are expressed as im2col/col2im plus one GEMM
//! so the matrix multiply backend does the heavy lifting. Transposed
//! convolution is implemented as the exact adjoint of a stride-2
//! convolution with output padding 1, which maps (C, H, W) to (C', 2H, 2W)
//! for odd kernels with pad = (k - 1) / 2.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::scalar::Scalar;

fn out_dim(in_d: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_d + 2 * pad - k) / stride + 1
}

fn matmul<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut c = Array2::<F>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut c);
    c
}

/// Range of output positions whose sampling point `o * stride + k_off - pad`
/// lands inside `[0, limit)`.
fn valid_range(
    limit: usize,
    out_len: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi_excl = if limit + pad > k_off {
        (((limit + pad - k_off - 1) / stride) + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// Gather sliding-window patches into a (C*kh*kw, H_out*W_out) matrix.
/// Out-of-bounds taps read zero.
fn im2col<F: Scalar>(x: ArrayView3<F>, k: (usize, usize), stride: usize, pad: usize) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let (kh, kw) = k;
    let h_out = out_dim(h, kh, stride, pad);
    let w_out = out_dim(w, kw, stride, pad);
    let n = h_out * w_out;
    let mut col = Array2::<F>::zeros((c_in * kh * kw, n));
    let owned;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().unwrap()
        }
    };
    let cs = col.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ki in 0..kh {
            let (oy_lo, oy_hi) = valid_range(h, h_out, ki, stride, pad);
            for kj in 0..kw {
                let r = (c * kh + ki) * kw + kj;
                let row = &mut cs[r * n..(r + 1) * n];
                let (ox_lo, ox_hi) = valid_range(w, w_out, kj, stride, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ki - pad;
                    let xrow = &xs[(c * h + iy) * w..(c * h + iy) * w + w];
                    let dst = &mut row[oy * w_out..oy * w_out + w_out];
                    let base = ox_lo * stride + kj - pad;
                    if stride == 1 {
                        dst[ox_lo..ox_hi].copy_from_slice(&xrow[base..base + (ox_hi - ox_lo)]);
                    } else {
                        let mut ix = base;
                        for d in dst[ox_lo..ox_hi].iter_mut() {
                            *d = xrow[ix];
                            ix += stride;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
fn col2im<F: Scalar>(
    col: &Array2<F>,
    c_im: usize,
    h: usize,
    w: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (kh, kw) = k;
    let h_out = out_dim(h, kh, stride, pad);
    let w_out = out_dim(w, kw, stride, pad);
    let n = h_out * w_out;
    assert_eq!(col.dim(), (c_im * kh * kw, n), "col2im shape");
    let mut x = Array3::<F>::zeros((c_im, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = col.as_slice().expect("col2im input must be standard layout");
    for c in 0..c_im {
        for ki in 0..kh {
            let (oy_lo, oy_hi) = valid_range(h, h_out, ki, stride, pad);
            for kj in 0..kw {
                let r = (c * kh + ki) * kw + kj;
                let row = &cs[r * n..(r + 1) * n];
                let (ox_lo, ox_hi) = valid_range(w, w_out, kj, stride, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ki - pad;
                    let xrow = &mut xs[(c * h + iy) * w..(c * h + iy) * w + w];
                    let src = &row[oy * w_out..oy * w_out + w_out];
                    let mut ix = ox_lo * stride + kj - pad;
                    for &s in src[ox_lo..ox_hi].iter() {
                        xrow[ix] = xrow[ix] + s;
                        ix += stride;
                    }
                }
            }
        }
    }
    x
}

/// y = conv(x, w) + b with weights shaped (C_out, C_in, kh, kw).
pub fn conv2d<F: Scalar>(
    x: ArrayView3<F>,
    w: ArrayView4<F>,
    b: Option<ArrayView1<F>>,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let (c_in, h, wd) = x.dim();
    let (c_out, c_in_w, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w, "conv2d input channels");
    let h_out = out_dim(h, kh, stride, pad);
    let w_out = out_dim(wd, kw, stride, pad);
    let col = im2col(x, (kh, kw), stride, pad);
    let w_mat = w.into_shape_with_order((c_out, c_in * kh * kw)).unwrap();
    let mut y_mat = matmul(w_mat, col.view());
    if let Some(b) = b {
        assert_eq!(b.len(), c_out, "conv2d bias length");
        for (mut row, &bv) in y_mat.outer_iter_mut().zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    y_mat.into_shape_with_order((c_out, h_out, w_out)).unwrap()
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_bwd_input<F: Scalar>(
    dy: ArrayView3<F>,
    w: ArrayView4<F>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array3<F> {
    let (c_out, h_out, w_out) = dy.dim();
    let (c_out_w, c_in, kh, kw) = w.dim();
    assert_eq!(c_out, c_out_w, "conv2d_bwd_input channels");
    let dy_owned;
    let dy_c = match dy.as_slice() {
        Some(_) => dy,
        None => {
            dy_owned = dy.to_owned();
            dy_owned.view()
        }
    };
    let dy_mat = dy_c.into_shape_with_order((c_out, h_out * w_out)).unwrap();
    let w_mat = w.into_shape_with_order((c_out, c_in * kh * kw)).unwrap();
    let cols_d = matmul(w_mat.t(), dy_mat);
    col2im(&cols_d, c_in, in_hw.0, in_hw.1, (kh, kw), stride, pad)
}

/// Gradients of [`conv2d`] with respect to weights and bias.
pub fn conv2d_bwd_params<F: Scalar>(
    x: ArrayView3<F>,
    dy: ArrayView3<F>,
    stride: usize,
    pad: usize,
    k: (usize, usize),
) -> (Array4<F>, Array1<F>) {
    let (c_in, _, _) = x.dim();
    let (c_out, h_out, w_out) = dy.dim();
    let col = im2col(x, k, stride, pad);
    let dy_owned;
    let dy_c = match dy.as_slice() {
        Some(_) => dy,
        None => {
            dy_owned = dy.to_owned();
            dy_owned.view()
        }
    };
    let dy_mat = dy_c.into_shape_with_order((c_out, h_out * w_out)).unwrap();
    let dw_mat = matmul(dy_mat, col.t());
    let dw = dw_mat
        .into_shape_with_order((c_out, c_in, k.0, k.1))
        .unwrap();
    let db = dy.sum_axis(Axis(2)).sum_axis(Axis(1));
    (dw, db)
}

fn check_deconv_geometry(h: usize, k: usize, pad: usize) {
    // Output padding 1 doubles the spatial size exactly when the matching
    // stride-2 convolution maps 2H back to H.
    assert_eq!(
        out_dim(2 * h, k, 2, pad),
        h,
        "deconv2d geometry: k={k} pad={pad}"
    );
}

/// Transposed convolution, stride 2, output padding 1: (C_in, H, W) to
/// (C_out, 2H, 2W). Weights are shaped (C_in, C_out, kh, kw).
pub fn deconv2d_s2<F: Scalar>(
    x: ArrayView3<F>,
    w: ArrayView4<F>,
    b: Option<ArrayView1<F>>,
    pad: usize,
) -> Array3<F> {
    let (c_in, h, wd) = x.dim();
    let (c_in_w, c_out, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w, "deconv2d input channels");
    assert_eq!(kh, kw, "deconv2d kernel must be square");
    check_deconv_geometry(h, kh, pad);
    check_deconv_geometry(wd, kw, pad);
    let x_owned;
    let x_c = match x.as_slice() {
        Some(_) => x,
        None => {
            x_owned = x.to_owned();
            x_owned.view()
        }
    };
    let x_mat = x_c.into_shape_with_order((c_in, h * wd)).unwrap();
    let w_mat = w.into_shape_with_order((c_in, c_out * kh * kw)).unwrap();
    let cols = matmul(w_mat.t(), x_mat);
    let mut y = col2im(&cols, c_out, 2 * h, 2 * wd, (kh, kw), 2, pad);
    if let Some(b) = b {
        assert_eq!(b.len(), c_out, "deconv2d bias length");
        for (mut plane, &bv) in y.outer_iter_mut().zip(b.iter()) {
            plane.mapv_inplace(|v| v + bv);
        }
    }
    y
}

/// Gradient of [`deconv2d_s2`] with respect to its input.
pub fn deconv2d_s2_bwd_input<F: Scalar>(
    dy: ArrayView3<F>,
    w: ArrayView4<F>,
    pad: usize,
) -> Array3<F> {
    let (c_out_d, h2, w2) = dy.dim();
    let (c_in, c_out, kh, kw) = w.dim();
    assert_eq!(c_out_d, c_out, "deconv2d_bwd_input channels");
    let col_dy = im2col(dy, (kh, kw), 2, pad);
    let w_mat = w.into_shape_with_order((c_in, c_out * kh * kw)).unwrap();
    let dx_mat = matmul(w_mat, col_dy.view());
    dx_mat.into_shape_with_order((c_in, h2 / 2, w2 / 2)).unwrap()
}

/// Gradients of [`deconv2d_s2`] with respect to weights and bias.
pub fn deconv2d_s2_bwd_params<F: Scalar>(
    x: ArrayView3<F>,
    dy: ArrayView3<F>,
    pad: usize,
    k: usize,
) -> (Array4<F>, Array1<F>) {
    let (c_in, h, wd) = x.dim();
    let (c_out, _, _) = dy.dim();
    let col_dy = im2col(dy, (k, k), 2, pad);
    let x_owned;
    let x_c = match x.as_slice() {
        Some(_) => x,
        None => {
            x_owned = x.to_owned();
            x_owned.view()
        }
    };
    let x_mat = x_c.into_shape_with_order((c_in, h * wd)).unwrap();
    let dw_mat = matmul(x_mat, col_dy.t());
    let dw = dw_mat.into_shape_with_order((c_in, c_out, k, k)).unwrap();
    let db = dy.sum_axis(Axis(2)).sum_axis(Axis(1));
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array3};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn randn3(rng: &mut ChaCha20Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array::from_shape_fn(d, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn randn4(rng: &mut ChaCha20Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(d, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct quadruple-loop convolution used as an independent oracle.
    fn naive_conv(
        x: &Array3<f64>,
        w: &Array4<f64>,
        b: Option<&Array1<f64>>,
        stride: usize,
        pad: usize,
    ) -> Array3<f64> {
        let (c_in, h, wd) = x.dim();
        let (c_out, _, kh, kw) = w.dim();
        let h_out = out_dim(h, kh, stride, pad);
        let w_out = out_dim(wd, kw, stride, pad);
        let mut y = Array3::<f64>::zeros((c_out, h_out, w_out));
        for o in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x[[c, iy as usize, ix as usize]] * w[[o, c, ki, kj]];
                                }
                            }
                        }
                    }
                    y[[o, oy, ox]] = acc;
                }
            }
        }
        y
    }

    /// Direct transposed convolution: out[o, u, v] accumulates
    /// x[c, i, j] * w[c, o, u + pad - 2i, v + pad - 2j].
    fn naive_deconv(x: &Array3<f64>, w: &Array4<f64>, pad: usize) -> Array3<f64> {
        let (c_in, h, wd) = x.dim();
        let (_, c_out, kh, kw) = w.dim();
        let mut y = Array3::<f64>::zeros((c_out, 2 * h, 2 * wd));
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..wd {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let u = (2 * i + ki) as isize - pad as isize;
                            let v = (2 * j + kj) as isize - pad as isize;
                            if u >= 0 && u < 2 * h as isize && v >= 0 && v < 2 * wd as isize {
                                for o in 0..c_out {
                                    y[[o, u as usize, v as usize]] +=
                                        x[[c, i, j]] * w[[c, o, ki, kj]];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1usize, 3usize, 7usize), (1, 1, 3), (2, 1, 3), (2, 2, 5)] {
            let x = randn3(&mut rng, (3, 12, 10));
            let w = randn4(&mut rng, (4, 3, k, k));
            let b = Array1::from_shape_fn(4, |_| rng.random::<f64>());
            let got = conv2d(x.view(), w.view(), Some(b.view()), stride, pad);
            let want = naive_conv(&x, &w, Some(&b), stride, pad);
            assert!(
                max_abs_diff(&got, &want) < 1e-12,
                "stride={stride} pad={pad} k={k}"
            );
        }
    }

    #[test]
    fn conv_same_padding_preserves_shape() {
        let x = Array3::<f32>::zeros((8, 16, 24));
        let w = Array4::<f32>::zeros((2, 8, 7, 7));
        assert_eq!(conv2d(x.view(), w.view(), None, 1, 3).dim(), (2, 16, 24));
        let w3 = Array4::<f32>::zeros((128, 8, 3, 3));
        assert_eq!(conv2d(x.view(), w3.view(), None, 2, 1).dim(), (128, 8, 12));
    }

    #[test]
    fn deconv_matches_naive_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for &(k, pad) in &[(3usize, 1usize), (5, 2)] {
            let x = randn3(&mut rng, (3, 5, 4));
            let w = randn4(&mut rng, (3, 2, k, k));
            let got = deconv2d_s2(x.view(), w.view(), None, pad);
            let want = naive_deconv(&x, &w, pad);
            assert_eq!(got.dim(), (2, 10, 8));
            assert!(max_abs_diff(&got, &want) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        // <conv(x), dy> == <x, conv_bwd_input(dy)> for any x, dy.
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for &(stride, pad, k) in &[(1usize, 3usize, 7usize), (2, 1, 3), (2, 2, 5)] {
            let x = randn3(&mut rng, (3, 8, 12));
            let w = randn4(&mut rng, (5, 3, k, k));
            let y = conv2d(x.view(), w.view(), None, stride, pad);
            let dy = randn3(&mut rng, y.dim());
            let dx = conv2d_bwd_input(dy.view(), w.view(), stride, pad, (8, 12));
            let lhs: f64 = (&y * &dy).sum();
            let rhs: f64 = (&x * &dx).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv_weight_gradient_is_adjoint() {
        // <conv(x; w), dy> == <w, dW(x, dy)> when bias is zero.
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let x = randn3(&mut rng, (4, 9, 7));
        let w = randn4(&mut rng, (6, 4, 3, 3));
        let y = conv2d(x.view(), w.view(), None, 2, 1);
        let dy = randn3(&mut rng, y.dim());
        let (dw, db) = conv2d_bwd_params(x.view(), dy.view(), 2, 1, (3, 3));
        let lhs: f64 = (&y * &dy).sum();
        let rhs: f64 = (&w * &dw).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        // Bias gradient: d/db <conv + b, dy> = per-channel sums of dy.
        for o in 0..6 {
            let want: f64 = dy.index_axis(Axis(0), o).sum();
            assert!((db[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_gradients_are_adjoints() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        for &(k, pad) in &[(3usize, 1usize), (5, 2)] {
            let x = randn3(&mut rng, (4, 6, 5));
            let w = randn4(&mut rng, (4, 3, k, k));
            let y = deconv2d_s2(x.view(), w.view(), None, pad);
            let dy = randn3(&mut rng, y.dim());
            let dx = deconv2d_s2_bwd_input(dy.view(), w.view(), pad);
            let lhs: f64 = (&y * &dy).sum();
            let rhs: f64 = (&x * &dx).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "input k={k}");
            let (dw, _) = deconv2d_s2_bwd_params(x.view(), dy.view(), pad, k);
            let rhs_w: f64 = (&w * &dw).sum();
            assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0), "weight k={k}");
        }
    }
}
