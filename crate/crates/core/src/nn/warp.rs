//! Bilinear backward warping of (C, H, W) images by dense flow fields.
//!
//! `out[c, i, j]` samples the image at `(j + flow[0, i, j], i + flow[1, i, j])`
//! with bilinear interpolation. Flow channel 0 is the horizontal displacement,
//! channel 1 the vertical one. Sample points are clamped to the image border,
//! so integer displacements reproduce source pixels exactly and gradients are
//! zero in fully clamped directions.

use ndarray::{Array3, ArrayView3};

use super::scalar::Scalar;

struct TapWeights {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    // Clamp pass-through flags: false when the sample point left the image
    // and the output no longer responds to flow perturbations on that axis.
    gx: bool,
    gy: bool,
}

fn taps<F: Scalar>(i: usize, j: usize, fu: F, fv: F, h: usize, w: usize) -> TapWeights {
    let sx = j as f64 + fu.to_f64();
    let sy = i as f64 + fv.to_f64();
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let gx = sx > 0.0 && sx < max_x;
    let gy = sy > 0.0 && sy < max_y;
    let cx = sx.clamp(0.0, max_x);
    let cy = sy.clamp(0.0, max_y);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    TapWeights {
        x0,
        x1,
        y0,
        y1,
        fx: cx - x0 as f64,
        fy: cy - y0 as f64,
        gx,
        gy,
    }
}

/// Warp `img` by `flow`. Both must share (H, W); `flow` has two channels.
pub fn warp_fwd<F: Scalar>(img: ArrayView3<F>, flow: ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = img.dim();
    assert_eq!(flow.dim(), (2, h, w), "warp flow shape");
    let mut out = Array3::<F>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let t = taps(i, j, flow[[0, i, j]], flow[[1, i, j]], h, w);
            let (wx0, wx1) = (1.0 - t.fx, t.fx);
            let (wy0, wy1) = (1.0 - t.fy, t.fy);
            for ch in 0..c {
                let v00 = img[[ch, t.y0, t.x0]].to_f64();
                let v01 = img[[ch, t.y0, t.x1]].to_f64();
                let v10 = img[[ch, t.y1, t.x0]].to_f64();
                let v11 = img[[ch, t.y1, t.x1]].to_f64();
                let v = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11);
                out[[ch, i, j]] = F::from_f64(v);
            }
        }
    }
    out
}

/// Gradients of [`warp_fwd`]. Returns (d_img, d_flow); `d_img` is skipped
/// when `need_dimg` is false (the reference frame is often a constant).
pub fn warp_bwd<F: Scalar>(
    img: ArrayView3<F>,
    flow: ArrayView3<F>,
    dy: ArrayView3<F>,
    need_dimg: bool,
) -> (Option<Array3<F>>, Array3<F>) {
    let (c, h, w) = img.dim();
    assert_eq!(flow.dim(), (2, h, w), "warp flow shape");
    assert_eq!(dy.dim(), (c, h, w), "warp cotangent shape");
    let mut dimg = need_dimg.then(|| Array3::<F>::zeros((c, h, w)));
    let mut dflow = Array3::<F>::zeros((2, h, w));
    for i in 0..h {
        for j in 0..w {
            let t = taps(i, j, flow[[0, i, j]], flow[[1, i, j]], h, w);
            let (wx0, wx1) = (1.0 - t.fx, t.fx);
            let (wy0, wy1) = (1.0 - t.fy, t.fy);
            let mut du = 0.0;
            let mut dv = 0.0;
            for ch in 0..c {
                let g = dy[[ch, i, j]].to_f64();
                let v00 = img[[ch, t.y0, t.x0]].to_f64();
                let v01 = img[[ch, t.y0, t.x1]].to_f64();
                let v10 = img[[ch, t.y1, t.x0]].to_f64();
                let v11 = img[[ch, t.y1, t.x1]].to_f64();
                if t.gx {
                    du += g * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
                }
                if t.gy {
                    dv += g * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
                }
                if let Some(dimg) = dimg.as_mut() {
                    let add = |a: &mut F, inc: f64| *a = F::from_f64(a.to_f64() + inc);
                    add(&mut dimg[[ch, t.y0, t.x0]], g * wy0 * wx0);
                    add(&mut dimg[[ch, t.y0, t.x1]], g * wy0 * wx1);
                    add(&mut dimg[[ch, t.y1, t.x0]], g * wy1 * wx0);
                    add(&mut dimg[[ch, t.y1, t.x1]], g * wy1 * wx1);
                }
            }
            dflow[[0, i, j]] = F::from_f64(du);
            dflow[[1, i, j]] = F::from_f64(dv);
        }
    }
    (dimg, dflow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let img = Array::from_shape_fn((3, 9, 7), |_| rng.random::<f32>());
        let flow = Array3::<f32>::zeros((2, 9, 7));
        assert_eq!(warp_fwd(img.view(), flow.view()), img);
    }

    #[test]
    fn integer_shift_moves_pixels_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let img = Array::from_shape_fn((2, 8, 8), |_| rng.random::<f32>());
        // flow = (+2, 0): output(i, j) samples img(i, j + 2).
        let mut flow = Array3::<f32>::zeros((2, 8, 8));
        flow.index_axis_mut(ndarray::Axis(0), 0).fill(2.0);
        let out = warp_fwd(img.view(), flow.view());
        for c in 0..2 {
            for i in 0..8 {
                for j in 0..6 {
                    assert_eq!(out[[c, i, j]], img[[c, i, j + 2]]);
                }
                // Columns past the border clamp to the last column.
                assert_eq!(out[[c, i, 6]], img[[c, i, 7]]);
                assert_eq!(out[[c, i, 7]], img[[c, i, 7]]);
            }
        }
    }

    #[test]
    fn half_pixel_shift_averages_neighbors() {
        let mut img = Array3::<f64>::zeros((1, 2, 4));
        for j in 0..4 {
            img[[0, 0, j]] = j as f64;
            img[[0, 1, j]] = j as f64;
        }
        let mut flow = Array3::<f64>::zeros((2, 2, 4));
        flow.index_axis_mut(ndarray::Axis(0), 0).fill(0.5);
        let out = warp_fwd(img.view(), flow.view());
        assert!((out[[0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((out[[0, 0, 2]] - 2.5).abs() < 1e-12);
        assert!((out[[0, 1, 3]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn image_gradient_is_adjoint() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let img = Array::from_shape_fn((3, 6, 5), |_| rng.random::<f64>());
        let flow = Array::from_shape_fn((2, 6, 5), |_| rng.random::<f64>() * 3.0 - 1.5);
        let y = warp_fwd(img.view(), flow.view());
        let dy = Array::from_shape_fn((3, 6, 5), |_| rng.random::<f64>() - 0.5);
        let (dimg, _) = warp_bwd(img.view(), flow.view(), dy.view(), true);
        // Warp is linear in the image, so <warp(img), dy> == <img, d_img>.
        let lhs: f64 = (&y * &dy).sum();
        let rhs: f64 = (&img * &dimg.unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn flow_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        let img = Array::from_shape_fn((2, 7, 6), |_| rng.random::<f64>());
        // Non-integer flow keeps sample points away from interpolation knots.
        let flow = Array::from_shape_fn((2, 7, 6), |_| rng.random::<f64>() * 2.0 - 1.0 + 0.3);
        let dy = Array::from_shape_fn((2, 7, 6), |_| rng.random::<f64>() - 0.5);
        let (_, dflow) = warp_bwd(img.view(), flow.view(), dy.view(), false);
        let h = 1e-6;
        for &(c, i, j) in &[
            (0usize, 0usize, 0usize),
            (0, 3, 2),
            (1, 5, 4),
            (1, 6, 5),
            (0, 2, 5),
        ] {
            let mut fp = flow.clone();
            fp[[c, i, j]] += h;
            let mut fm = flow.clone();
            fm[[c, i, j]] -= h;
            let lp: f64 = (&warp_fwd(img.view(), fp.view()) * &dy).sum();
            let lm: f64 = (&warp_fwd(img.view(), fm.view()) * &dy).sum();
            let fd = (lp - lm) / (2.0 * h);
            let an = dflow[[c, i, j]];
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3),
                "fd={fd} analytic={an} at ({c},{i},{j})"
            );
        }
    }
}
