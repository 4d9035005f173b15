//! Motion and residual autoencoder transforms.
//!
//! Both analysis transforms map their input to a 128-channel latent through
//! four stride-2 convolutions with divisive normalization after the first
//! three; the synthesis transforms mirror them with stride-2 deconvolutions
//! and inverse normalization. Motion uses 3x3 kernels on the 2-channel
//! flow field, residual uses 5x5 kernels on the 3-channel residual image.
//! With input dimensions divisible by 16 the latent is (128, H/16, W/16).

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::nn::conv::{conv2d, deconv2d_s2};
use crate::nn::gdn::{effective_beta, effective_gamma, gdn_fwd, BETA_MIN};
use crate::nn::scalar::Scalar;
use crate::nn::tape::Var;
use crate::params::{join, HasParams, ParamFn, VarTable};

/// Latent channel count shared by both autoencoders.
pub const LATENT_CHANNELS: usize = 128;

/// Total downsampling factor of an analysis transform.
pub const LATENT_STRIDE: usize = 16;

/// Divisive normalization parameters in raw (pre-square) form.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnParams<F = f32> {
    pub beta_raw: Array1<F>,
    pub gamma_raw: Array2<F>,
}

impl<F: Scalar> GdnParams<F> {
    /// Effective beta starts at 1, gamma at 0.1 on the diagonal. Raw values
    /// are sqrt(target + epsilon) so off-diagonal entries keep nonzero
    /// gradients despite the squaring reparameterization.
    pub fn new(channels: usize) -> Self {
        let beta_raw = Array1::from_elem(channels, F::from_f64((1.0 - BETA_MIN).sqrt()));
        let gamma_raw = Array2::from_shape_fn((channels, channels), |(i, j)| {
            let target: f64 = if i == j { 0.1 } else { 0.0 };
            F::from_f64((target + 1e-6).sqrt())
        });
        GdnParams {
            beta_raw,
            gamma_raw,
        }
    }

    pub fn forward(&self, x: ArrayView3<F>, inverse: bool) -> Array3<F> {
        gdn_fwd(
            x,
            effective_beta(self.beta_raw.view()).view(),
            effective_gamma(self.gamma_raw.view()).view(),
            inverse,
        )
    }
}

impl<F: Scalar> HasParams<F> for GdnParams<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(&join(prefix, "beta"), self.beta_raw.view_mut().into_dyn());
        f(&join(prefix, "gamma"), self.gamma_raw.view_mut().into_dyn());
    }
}

/// Convolution weights, (C_out, C_in, k, k).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F = f32> {
    pub w: Array4<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> ConvLayer<F> {
    /// Uniform init in +-1/sqrt(fan_in) with fan_in = C_in * k * k.
    pub fn new(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let mut u = |_: ()| F::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound);
        ConvLayer {
            w: Array4::from_shape_fn((c_out, c_in, k, k), |_| u(())),
            b: Array1::from_shape_fn(c_out, |_| u(())),
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().3
    }

    pub fn pad(&self) -> usize {
        (self.kernel() - 1) / 2
    }
}

impl<F: Scalar> HasParams<F> for ConvLayer<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(&join(prefix, "w"), self.w.view_mut().into_dyn());
        f(&join(prefix, "b"), self.b.view_mut().into_dyn());
    }
}

/// Transposed convolution weights, (C_in, C_out, k, k).
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvLayer<F = f32> {
    pub w: Array4<F>,
    pub b: Array1<F>,
}

impl<F: Scalar> DeconvLayer<F> {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = 1.0 / ((c_out * k * k) as f64).sqrt();
        let mut u = |_: ()| F::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound);
        DeconvLayer {
            w: Array4::from_shape_fn((c_in, c_out, k, k), |_| u(())),
            b: Array1::from_shape_fn(c_out, |_| u(())),
        }
    }

    pub fn pad(&self) -> usize {
        (self.w.dim().3 - 1) / 2
    }
}

impl<F: Scalar> HasParams<F> for DeconvLayer<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(&join(prefix, "w"), self.w.view_mut().into_dyn());
        f(&join(prefix, "b"), self.b.view_mut().into_dyn());
    }
}

/// Four stride-2 convolutions with GDN after the first three.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisTransform<F = f32> {
    pub convs: Vec<ConvLayer<F>>,
    pub gdns: Vec<GdnParams<F>>,
}

impl<F: Scalar> AnalysisTransform<F> {
    pub fn new(c_in: usize, kernel: usize, rng: &mut ChaCha20Rng) -> Self {
        Self::with_width(c_in, kernel, LATENT_CHANNELS, rng)
    }

    /// Internal width is configurable for fast tests; the codec always uses
    /// [`LATENT_CHANNELS`].
    pub fn with_width(c_in: usize, kernel: usize, width: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut convs = Vec::with_capacity(4);
        let mut gdns = Vec::with_capacity(3);
        let mut prev = c_in;
        for _ in 0..4 {
            convs.push(ConvLayer::new(width, prev, kernel, rng));
            prev = width;
        }
        for _ in 0..3 {
            gdns.push(GdnParams::new(width));
        }
        AnalysisTransform { convs, gdns }
    }

    pub fn forward(&self, x: ArrayView3<F>) -> Array3<F> {
        let mut h = x.to_owned();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv2d(
                h.view(),
                conv.w.view(),
                Some(conv.b.view()),
                2,
                conv.pad(),
            );
            if i < 3 {
                h = self.gdns[i].forward(h.view(), false);
            }
        }
        h
    }

    /// Differentiable forward pulling parameters from `vars` under `prefix`.
    pub fn forward_var(&self, x: &Var<F>, vars: &VarTable<F>, prefix: &str) -> Var<F> {
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let w = vars.get(&join(prefix, &format!("conv{i}.w")));
            let b = vars.get(&join(prefix, &format!("conv{i}.b")));
            h = h.conv2d(w, Some(b), 2, conv.pad());
            if i < 3 {
                let beta = vars.get(&join(prefix, &format!("gdn{i}.beta")));
                let gamma = vars.get(&join(prefix, &format!("gdn{i}.gamma")));
                h = h.gdn(beta, gamma, false);
            }
        }
        h
    }
}

impl<F: Scalar> HasParams<F> for AnalysisTransform<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.for_each_param(&join(prefix, &format!("conv{i}")), f);
        }
        for (i, gdn) in self.gdns.iter_mut().enumerate() {
            gdn.for_each_param(&join(prefix, &format!("gdn{i}")), f);
        }
    }
}

/// Four stride-2 deconvolutions with inverse GDN after the first three.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisTransform<F = f32> {
    pub deconvs: Vec<DeconvLayer<F>>,
    pub igdns: Vec<GdnParams<F>>,
}

impl<F: Scalar> SynthesisTransform<F> {
    pub fn new(c_out: usize, kernel: usize, rng: &mut ChaCha20Rng) -> Self {
        Self::with_width(c_out, kernel, LATENT_CHANNELS, rng)
    }

    pub fn with_width(c_out: usize, kernel: usize, width: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut deconvs = Vec::with_capacity(4);
        let mut igdns = Vec::with_capacity(3);
        for i in 0..4 {
            let out = if i == 3 { c_out } else { width };
            deconvs.push(DeconvLayer::new(width, out, kernel, rng));
        }
        for _ in 0..3 {
            igdns.push(GdnParams::new(width));
        }
        SynthesisTransform { deconvs, igdns }
    }

    pub fn forward(&self, y: ArrayView3<F>) -> Array3<F> {
        let mut h = y.to_owned();
        for (i, deconv) in self.deconvs.iter().enumerate() {
            h = deconv2d_s2(
                h.view(),
                deconv.w.view(),
                Some(deconv.b.view()),
                deconv.pad(),
            );
            if i < 3 {
                h = self.igdns[i].forward(h.view(), true);
            }
        }
        h
    }

    pub fn forward_var(&self, y: &Var<F>, vars: &VarTable<F>, prefix: &str) -> Var<F> {
        let mut h = y.clone();
        for (i, deconv) in self.deconvs.iter().enumerate() {
            let w = vars.get(&join(prefix, &format!("deconv{i}.w")));
            let b = vars.get(&join(prefix, &format!("deconv{i}.b")));
            h = h.deconv2d_s2(w, Some(b), deconv.pad());
            if i < 3 {
                let beta = vars.get(&join(prefix, &format!("igdn{i}.beta")));
                let gamma = vars.get(&join(prefix, &format!("igdn{i}.gamma")));
                h = h.gdn(beta, gamma, true);
            }
        }
        h
    }
}

impl<F: Scalar> HasParams<F> for SynthesisTransform<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        for (i, deconv) in self.deconvs.iter_mut().enumerate() {
            deconv.for_each_param(&join(prefix, &format!("deconv{i}")), f);
        }
        for (i, gdn) in self.igdns.iter_mut().enumerate() {
            gdn.for_each_param(&join(prefix, &format!("igdn{i}")), f);
        }
    }
}
