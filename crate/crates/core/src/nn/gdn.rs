//! Generalized divisive normalization and its inverse on (C, H, W) tensors.
//!
//! Per pixel p and channel i, with pooled energy
//! `S_i(p) = beta_i + sum_j gamma_ij * x_j(p)^2`:
//!
//! * forward:  y_i = x_i / sqrt(S_i)
//! * inverse:  y_i = x_i * sqrt(S_i)
//!
//! Both directions reduce to one (C, C) x (C, N) GEMM for the energy and one
//! more for the backward cross-channel term.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use super::scalar::Scalar;

/// Floor added to the squared beta reparameterization so the divisor
/// stays strictly positive.
pub const BETA_MIN: f64 = 1e-6;

/// beta = beta_raw^2 + BETA_MIN.
pub fn effective_beta<F: Scalar>(beta_raw: ArrayView1<F>) -> Array1<F> {
    let eps = F::from_f64(BETA_MIN);
    beta_raw.mapv(|v| v * v + eps)
}

/// gamma = gamma_raw^2, elementwise.
pub fn effective_gamma<F: Scalar>(gamma_raw: ArrayView2<F>) -> Array2<F> {
    gamma_raw.mapv(|v| v * v)
}

fn energy<F: Scalar>(x2: &Array2<F>, beta: ArrayView1<F>, gamma: ArrayView2<F>) -> Array2<F> {
    let c = beta.len();
    let n = x2.ncols();
    let mut s = Array2::<F>::zeros((c, n));
    general_mat_mul(F::one(), &gamma, x2, F::zero(), &mut s);
    for (mut row, &b) in s.outer_iter_mut().zip(beta.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    s
}

fn as_mat<F: Scalar>(x: ArrayView3<F>) -> Array2<F> {
    let (c, h, w) = x.dim();
    match x.as_slice() {
        Some(_) => x.into_shape_with_order((c, h * w)).unwrap().to_owned(),
        None => x
            .to_owned()
            .into_shape_with_order((c, h * w))
            .unwrap(),
    }
}

/// Apply (I)GDN with effective parameters `beta > 0`, `gamma >= 0`.
pub fn gdn_fwd<F: Scalar>(
    x: ArrayView3<F>,
    beta: ArrayView1<F>,
    gamma: ArrayView2<F>,
    inverse: bool,
) -> Array3<F> {
    let (c, h, w) = x.dim();
    assert_eq!(beta.len(), c, "gdn beta length");
    assert_eq!(gamma.dim(), (c, c), "gdn gamma shape");
    let xm = as_mat(x);
    let x2 = xm.mapv(|v| v * v);
    let s = energy(&x2, beta, gamma);
    let y = if inverse {
        &xm * &s.mapv(|v| v.sqrt())
    } else {
        &xm / &s.mapv(|v| v.sqrt())
    };
    y.into_shape_with_order((c, h, w)).unwrap()
}

/// Gradients of [`gdn_fwd`] with respect to input and effective parameters.
pub fn gdn_bwd<F: Scalar>(
    x: ArrayView3<F>,
    beta: ArrayView1<F>,
    gamma: ArrayView2<F>,
    dy: ArrayView3<F>,
    inverse: bool,
) -> (Array3<F>, Array1<F>, Array2<F>) {
    let (c, h, w) = x.dim();
    assert_eq!(dy.dim(), x.dim(), "gdn cotangent shape");
    let n = h * w;
    let xm = as_mat(x);
    let dym = as_mat(dy);
    let x2 = xm.mapv(|v| v * v);
    let s = energy(&x2, beta, gamma);

    // sigma = -1 for GDN, +1 for IGDN; y = x * S^(sigma/2).
    let (pow_y, half) = if inverse {
        (F::half(), F::half())
    } else {
        (-F::half(), -F::half())
    };
    let s_pow = s.mapv(|v| v.powf(pow_y));
    // t = dy * x * S^(sigma/2 - 1)
    let t = &dym * &xm * &(&s_pow / &s);

    // dx = dy * S^(sigma/2) + sigma * x * (gamma^T t)
    let mut cross = Array2::<F>::zeros((c, n));
    general_mat_mul(F::one(), &gamma.t(), &t, F::zero(), &mut cross);
    let sigma = if inverse { F::one() } else { -F::one() };
    let dx = &dym * &s_pow + &(&xm * &cross) * sigma;

    // dbeta_i = sigma/2 * sum_p t_i(p); dgamma_ij = sigma/2 * (t x2^T)_ij
    let dbeta = t.sum_axis(Axis(1)).mapv(|v| v * half);
    let mut dgamma = Array2::<F>::zeros((c, c));
    general_mat_mul(half, &t, &x2.t(), F::zero(), &mut dgamma);

    (
        dx.into_shape_with_order((c, h, w)).unwrap(),
        dbeta,
        dgamma,
    )
}
