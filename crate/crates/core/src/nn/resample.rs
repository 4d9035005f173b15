//! Fixed-factor resampling primitives: 2x2 mean pooling, bilinear and
//! nearest-neighbor 2x upsampling, and separable depthwise blur. Each
//! forward has a matching adjoint used by the reverse-mode tape.

use ndarray::{Array3, ArrayView1, ArrayView3};

use super::scalar::Scalar;

/// 2x2 mean pooling with floor semantics: odd trailing rows/columns are
/// dropped.
pub fn avg_pool2<F: Scalar>(x: ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    assert!(ho > 0 && wo > 0, "avg_pool2 input too small: {h}x{w}");
    let quarter = F::from_f64(0.25);
    let mut y = Array3::<F>::zeros((c, ho, wo));
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let s = x[[ch, 2 * i, 2 * j]]
                    + x[[ch, 2 * i, 2 * j + 1]]
                    + x[[ch, 2 * i + 1, 2 * j]]
                    + x[[ch, 2 * i + 1, 2 * j + 1]];
                y[[ch, i, j]] = s * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_bwd<F: Scalar>(dy: ArrayView3<F>, in_hw: (usize, usize)) -> Array3<F> {
    let (c, ho, wo) = dy.dim();
    let quarter = F::from_f64(0.25);
    let mut dx = Array3::<F>::zeros((c, in_hw.0, in_hw.1));
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = dy[[ch, i, j]] * quarter;
                dx[[ch, 2 * i, 2 * j]] = g;
                dx[[ch, 2 * i, 2 * j + 1]] = g;
                dx[[ch, 2 * i + 1, 2 * j]] = g;
                dx[[ch, 2 * i + 1, 2 * j + 1]] = g;
            }
        }
    }
    dx
}

/// Per-axis source taps for half-pixel-aligned bilinear 2x upsampling:
/// output index i samples source coordinate (i + 0.5) / 2 - 0.5, clamped.
fn bilinear_axis_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|i| {
            let s = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear2x<F: Scalar>(x: ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let ty = bilinear_axis_taps(h);
    let tx = bilinear_axis_taps(w);
    let mut y = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v00 = x[[ch, y0, x0]].to_f64();
                let v01 = x[[ch, y0, x1]].to_f64();
                let v10 = x[[ch, y1, x0]].to_f64();
                let v11 = x[[ch, y1, x1]].to_f64();
                let v = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
                y[[ch, oi, oj]] = F::from_f64(v);
            }
        }
    }
    y
}

pub fn upsample_bilinear2x_bwd<F: Scalar>(dy: ArrayView3<F>, in_hw: (usize, usize)) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = in_hw;
    assert_eq!((h2, w2), (2 * h, 2 * w));
    let ty = bilinear_axis_taps(h);
    let tx = bilinear_axis_taps(w);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dy[[ch, oi, oj]].to_f64();
                let add = |a: &mut F, inc: f64| *a = F::from_f64(a.to_f64() + inc);
                add(&mut dx[[ch, y0, x0]], g * (1.0 - fy) * (1.0 - fx));
                add(&mut dx[[ch, y0, x1]], g * (1.0 - fy) * fx);
                add(&mut dx[[ch, y1, x0]], g * fy * (1.0 - fx));
                add(&mut dx[[ch, y1, x1]], g * fy * fx);
            }
        }
    }
    dx
}

pub fn upsample_nearest2x<F: Scalar>(x: ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                y[[ch, i, j]] = x[[ch, i / 2, j / 2]];
            }
        }
    }
    y
}

pub fn upsample_nearest2x_bwd<F: Scalar>(dy: ArrayView3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[[ch, i / 2, j / 2]] = dx[[ch, i / 2, j / 2]] + dy[[ch, i, j]];
            }
        }
    }
    dx
}

/// Separable depthwise correlation with a 1-D window, no padding: output is
/// (C, H - n + 1, W - n + 1). Equivalent to a 2-D correlation with the
/// outer product of `k` with itself.
pub fn blur_valid<F: Scalar>(x: ArrayView3<F>, k: ArrayView1<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let n = k.len();
    assert!(h >= n && w >= n, "blur_valid window {n} exceeds input {h}x{w}");
    // Horizontal pass.
    let wo = w - n + 1;
    let mut tmp = Array3::<F>::zeros((c, h, wo));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..wo {
                let mut acc = F::zero();
                for t in 0..n {
                    acc = acc + x[[ch, i, j + t]] * k[t];
                }
                tmp[[ch, i, j]] = acc;
            }
        }
    }
    // Vertical pass.
    let ho = h - n + 1;
    let mut y = Array3::<F>::zeros((c, ho, wo));
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = F::zero();
                for t in 0..n {
                    acc = acc + tmp[[ch, i + t, j]] * k[t];
                }
                y[[ch, i, j]] = acc;
            }
        }
    }
    y
}

pub fn blur_valid_bwd<F: Scalar>(dy: ArrayView3<F>, k: ArrayView1<F>, in_hw: (usize, usize)) -> Array3<F> {
    let (c, ho, wo) = dy.dim();
    let n = k.len();
    let (h, w) = in_hw;
    assert_eq!((ho, wo), (h - n + 1, w - n + 1));
    // Adjoint of the vertical pass.
    let mut tmp = Array3::<F>::zeros((c, h, wo));
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = dy[[ch, i, j]];
                for t in 0..n {
                    tmp[[ch, i + t, j]] = tmp[[ch, i + t, j]] + g * k[t];
                }
            }
        }
    }
    // Adjoint of the horizontal pass.
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..wo {
                let g = tmp[[ch, i, j]];
                for t in 0..n {
                    dx[[ch, i, j + t]] = dx[[ch, i, j + t]] + g * k[t];
                }
            }
        }
    }
    dx
}
