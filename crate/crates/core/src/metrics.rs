//! Image quality metrics over [0, 1] frames.
//!
//! PSNR caps at 100 dB so identical frames are representable. MS-SSIM
//! follows the usual construction: per scale, an 11x11 Gaussian window
//! (sigma 1.5, valid convolution) yields local statistics; contrast terms
//! from every scale and the luminance term of the last are combined with
//! the standard exponents. The differentiable form doubles as the direct
//! implementation, so training loss and reported metric cannot diverge.

use ndarray::{Array1, ArrayView3};

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;
use crate::nn::tape::{Tape, Var};

/// PSNR of identical frames.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-scale exponents; renormalized to sum to 1 over the scales in use.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const WINDOW_SIZE: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr<F: Scalar>(a: ArrayView3<F>, b: ArrayView3<F>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "psnr operands must match");
    let n = a.len() as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Normalized symmetric Gaussian window.
pub fn gaussian_window<F: Scalar>(size: usize, sigma: f64) -> Array1<F> {
    let c = (size - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Array1::from_vec(w.into_iter().map(F::from_f64).collect())
}

/// Largest usable MS-SSIM scale count for a given frame size (at most 5).
pub fn max_msssim_scales(h: usize, w: usize) -> usize {
    let side = h.min(w);
    (1..=5)
        .take_while(|s| WINDOW_SIZE << (s - 1) <= side)
        .count()
}

fn check_scales(h: usize, w: usize, scales: usize) -> Result<()> {
    if scales == 0 || scales > 5 {
        return Err(Error::InvalidInput(format!(
            "MS-SSIM needs 1..=5 scales, got {scales}"
        )));
    }
    let need = WINDOW_SIZE << (scales - 1);
    if h.min(w) < need {
        return Err(Error::InvalidInput(format!(
            "frame side {} too small for {scales}-scale MS-SSIM (needs >= {need})",
            h.min(w)
        )));
    }
    Ok(())
}

/// Differentiable MS-SSIM between two (C, H, W) vars.
pub fn msssim_var<F: Scalar>(x: &Var<F>, y: &Var<F>, scales: usize) -> Result<Var<F>> {
    let shape = x.shape();
    if shape != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "MS-SSIM operands {shape:?} vs {:?}",
            y.shape()
        )));
    }
    check_scales(shape[1], shape[2], scales)?;
    let win = gaussian_window::<F>(WINDOW_SIZE, WINDOW_SIGMA);
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let mut x = x.clone();
    let mut y = y.clone();
    let mut total: Option<Var<F>> = None;
    for s in 0..scales {
        let w = MSSSIM_WEIGHTS[s] / wsum;
        let mux = x.blur_valid(&win);
        let muy = y.blur_valid(&win);
        let mux2 = mux.mul(&mux);
        let muy2 = muy.mul(&muy);
        let sx2 = x.mul(&x).blur_valid(&win).sub(&mux2);
        let sy2 = y.mul(&y).blur_valid(&win).sub(&muy2);
        let sxy = x.mul(&y).blur_valid(&win).sub(&mux.mul(&muy));
        let cs = sxy
            .scale(2.0)
            .add_scalar(C2)
            .div(&sx2.add(&sy2).add_scalar(C2));
        let factor = if s + 1 < scales {
            let f = cs.mean().relu().powf_const(w);
            x = x.avg_pool2();
            y = y.avg_pool2();
            f
        } else {
            let l = mux
                .mul(&muy)
                .scale(2.0)
                .add_scalar(C1)
                .div(&mux2.add(&muy2).add_scalar(C1));
            l.mul(&cs).mean().relu().powf_const(w)
        };
        total = Some(match total {
            Some(t) => t.mul(&factor),
            None => factor,
        });
    }
    Ok(total.unwrap())
}

/// MS-SSIM as a plain number; evaluates the differentiable graph without
/// gradients.
pub fn msssim<F: Scalar>(x: ArrayView3<F>, y: ArrayView3<F>, scales: usize) -> Result<f64> {
    let tape = Tape::<F>::new();
    let xv = tape.input(x.to_owned().into_dyn());
    let yv = tape.input(y.to_owned().into_dyn());
    Ok(msssim_var(&xv, &yv, scales)?.scalar().to_f64())
}
