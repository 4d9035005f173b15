//! Factorized entropy bottleneck: per-channel learned priors, integer
//! quantization, rate estimation, and the bridge to the range coder.
//!
//! Each channel models the CDF of its latent values with a four-stage
//! monotone chain: widths 1 -> 3 -> 3 -> 3 -> 1, where every stage applies
//! `z = softplus(H_raw) z + b` followed by `z += tanh(a_raw) * tanh(z)`,
//! and the final scalar passes through a sigmoid. Softplus keeps the
//! matrices nonnegative and `|tanh(a)| < 1` keeps each mixing step strictly
//! increasing, so the chain is a valid CDF for any parameter values.
//!
//! The probability of integer symbol v is `c(v + 0.5) - c(v - 0.5)`,
//! clamped to [1e-9, 1]. For coding, these probabilities are frozen into
//! per-channel 16-bit CDF tables with an escape slot carrying the tail
//! mass; escape payloads are zigzag-coded as two uniform 16-bit halves.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;
use crate::nn::tape::Var;
use crate::params::{join, HasParams, ParamFn, VarTable};
use crate::range_coder::{
    zigzag_decode, zigzag_encode, RangeDecoder, RangeEncoder, PROB_TOTAL,
};

/// Likelihood floor: probabilities below this are clamped so rate stays
/// finite.
pub const LIKELIHOOD_MIN: f64 = 1e-9;

/// Mass allowed to fall outside the coded support of a channel.
pub const TAIL_MASS: f64 = 1e-9;

/// Widest support a CDF table may cover before table building fails.
pub const MAX_SUPPORT_WIDTH: usize = 4096;

const STAGE_WIDTH: usize = 3;

/// Per-channel factorized prior parameters, stacked over channels.
/// Raw values; softplus/tanh reparameterizations are applied on use.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPrior<F = f32> {
    pub h1: Array2<F>,
    pub b1: Array2<F>,
    pub a1: Array2<F>,
    pub h2: Array3<F>,
    pub b2: Array2<F>,
    pub a2: Array2<F>,
    pub h3: Array3<F>,
    pub b3: Array2<F>,
    pub a3: Array2<F>,
    pub h4: Array2<F>,
    pub b4: Array1<F>,
    pub a4: Array1<F>,
}

fn softplus<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|))
    let zero = F::zero();
    let m = if x > zero { x } else { zero };
    m + (-x.abs()).exp().ln_1p()
}

fn softplus_inv(y: f64) -> f64 {
    // ln(exp(y) - 1), stable for small y.
    y.exp_m1().ln()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

impl<F: Scalar> FactorizedPrior<F> {
    /// Initialize so the implied density starts as a smooth unimodal bump:
    /// matrices at softplus^-1(1 / (scale * fan_out)) with scale = 10^(1/4),
    /// biases uniform in (-0.5, 0.5), mixing factors zero.
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let scale = 10f64.powf(0.25);
        let w = STAGE_WIDTH;
        let hv = |fan_out: usize| F::from_f64(softplus_inv(1.0 / (scale * fan_out as f64)));
        let mut bias = |_: usize| F::from_f64(rng.random::<f64>() - 0.5);
        FactorizedPrior {
            h1: Array2::from_elem((channels, w), hv(w)),
            b1: Array2::from_shape_fn((channels, w), |_| bias(0)),
            a1: Array2::zeros((channels, w)),
            h2: Array3::from_elem((channels, w, w), hv(w)),
            b2: Array2::from_shape_fn((channels, w), |_| bias(0)),
            a2: Array2::zeros((channels, w)),
            h3: Array3::from_elem((channels, w, w), hv(w)),
            b3: Array2::from_shape_fn((channels, w), |_| bias(0)),
            a3: Array2::zeros((channels, w)),
            h4: Array2::from_elem((channels, w), hv(1)),
            b4: Array1::from_shape_fn(channels, |_| bias(0)),
            a4: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.h1.nrows()
    }

    fn chan(&self, c: usize) -> ChanParams<F> {
        let one = F::one();
        let mut p = ChanParams::default();
        for i in 0..STAGE_WIDTH {
            p.sp_h1[i] = softplus(self.h1[[c, i]]);
            p.dsp_h1[i] = sigmoid(self.h1[[c, i]]);
            p.b1[i] = self.b1[[c, i]];
            p.ta1[i] = self.a1[[c, i]].tanh();
            p.dta1[i] = one - p.ta1[i] * p.ta1[i];
            p.b2[i] = self.b2[[c, i]];
            p.ta2[i] = self.a2[[c, i]].tanh();
            p.dta2[i] = one - p.ta2[i] * p.ta2[i];
            p.b3[i] = self.b3[[c, i]];
            p.ta3[i] = self.a3[[c, i]].tanh();
            p.dta3[i] = one - p.ta3[i] * p.ta3[i];
            p.sp_h4[i] = softplus(self.h4[[c, i]]);
            p.dsp_h4[i] = sigmoid(self.h4[[c, i]]);
            for j in 0..STAGE_WIDTH {
                p.sp_h2[i][j] = softplus(self.h2[[c, i, j]]);
                p.dsp_h2[i][j] = sigmoid(self.h2[[c, i, j]]);
                p.sp_h3[i][j] = softplus(self.h3[[c, i, j]]);
                p.dsp_h3[i][j] = sigmoid(self.h3[[c, i, j]]);
            }
        }
        p.b4 = self.b4[c];
        p.ta4 = self.a4[c].tanh();
        p.dta4 = one - p.ta4 * p.ta4;
        p
    }

    /// CDF value c(x) for channel `c`; strictly increasing in x.
    pub fn cdf_value(&self, c: usize, x: F) -> F {
        self.chan(c).forward(x).c
    }

    /// Probability of integer symbol `v` in channel `c`, clamped to
    /// [LIKELIHOOD_MIN, 1].
    pub fn likelihood_scalar(&self, c: usize, v: F) -> F {
        let p = self.chan(c);
        let half = F::half();
        let raw = p.forward(v + half).c - p.forward(v - half).c;
        clamp_prob(raw)
    }

    /// Elementwise likelihoods of a (C, H, W) latent tensor.
    pub fn likelihood(&self, latent: ArrayView3<F>) -> Array3<F> {
        let (c, h, w) = latent.dim();
        assert_eq!(c, self.channels(), "latent channels vs prior channels");
        let half = F::half();
        let mut out = Array3::<F>::zeros((c, h, w));
        for ch in 0..c {
            let p = self.chan(ch);
            let src = latent.index_axis(Axis(0), ch);
            let mut dst = out.index_axis_mut(Axis(0), ch);
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o = clamp_prob(p.forward(v + half).c - p.forward(v - half).c);
            }
        }
        out
    }
}

impl<F: Scalar> HasParams<F> for FactorizedPrior<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(&join(prefix, "h1"), self.h1.view_mut().into_dyn());
        f(&join(prefix, "b1"), self.b1.view_mut().into_dyn());
        f(&join(prefix, "a1"), self.a1.view_mut().into_dyn());
        f(&join(prefix, "h2"), self.h2.view_mut().into_dyn());
        f(&join(prefix, "b2"), self.b2.view_mut().into_dyn());
        f(&join(prefix, "a2"), self.a2.view_mut().into_dyn());
        f(&join(prefix, "h3"), self.h3.view_mut().into_dyn());
        f(&join(prefix, "b3"), self.b3.view_mut().into_dyn());
        f(&join(prefix, "a3"), self.a3.view_mut().into_dyn());
        f(&join(prefix, "h4"), self.h4.view_mut().into_dyn());
        f(&join(prefix, "b4"), self.b4.view_mut().into_dyn());
        f(&join(prefix, "a4"), self.a4.view_mut().into_dyn());
    }
}

fn clamp_prob<F: Scalar>(p: F) -> F {
    let lo = F::from_f64(LIKELIHOOD_MIN);
    let hi = F::one();
    if p < lo {
        lo
    } else if p > hi {
        hi
    } else {
        p
    }
}

/// Reparameterized per-channel coefficients plus the derivative factors the
/// backward pass needs.
struct ChanParams<F> {
    sp_h1: [F; 3],
    dsp_h1: [F; 3],
    b1: [F; 3],
    ta1: [F; 3],
    dta1: [F; 3],
    sp_h2: [[F; 3]; 3],
    dsp_h2: [[F; 3]; 3],
    b2: [F; 3],
    ta2: [F; 3],
    dta2: [F; 3],
    sp_h3: [[F; 3]; 3],
    dsp_h3: [[F; 3]; 3],
    b3: [F; 3],
    ta3: [F; 3],
    dta3: [F; 3],
    sp_h4: [F; 3],
    dsp_h4: [F; 3],
    b4: F,
    ta4: F,
    dta4: F,
}

impl<F: Scalar> Default for ChanParams<F> {
    fn default() -> Self {
        let z = F::zero();
        ChanParams {
            sp_h1: [z; 3],
            dsp_h1: [z; 3],
            b1: [z; 3],
            ta1: [z; 3],
            dta1: [z; 3],
            sp_h2: [[z; 3]; 3],
            dsp_h2: [[z; 3]; 3],
            b2: [z; 3],
            ta2: [z; 3],
            dta2: [z; 3],
            sp_h3: [[z; 3]; 3],
            dsp_h3: [[z; 3]; 3],
            b3: [z; 3],
            ta3: [z; 3],
            dta3: [z; 3],
            sp_h4: [z; 3],
            dsp_h4: [z; 3],
            b4: z,
            ta4: z,
            dta4: z,
        }
    }
}

struct ChainCache<F> {
    x: F,
    t1: [F; 3],
    z1: [F; 3],
    t2: [F; 3],
    z2: [F; 3],
    t3: [F; 3],
    z3: [F; 3],
    t4: F,
    c: F,
}

impl<F: Scalar> ChanParams<F> {
    fn forward(&self, x: F) -> ChainCache<F> {
        let mut t1 = [F::zero(); 3];
        let mut z1 = [F::zero(); 3];
        for i in 0..3 {
            let pre = self.sp_h1[i] * x + self.b1[i];
            t1[i] = pre.tanh();
            z1[i] = pre + self.ta1[i] * t1[i];
        }
        let mut t2 = [F::zero(); 3];
        let mut z2 = [F::zero(); 3];
        for i in 0..3 {
            let mut pre = self.b2[i];
            for j in 0..3 {
                pre = pre + self.sp_h2[i][j] * z1[j];
            }
            t2[i] = pre.tanh();
            z2[i] = pre + self.ta2[i] * t2[i];
        }
        let mut t3 = [F::zero(); 3];
        let mut z3 = [F::zero(); 3];
        for i in 0..3 {
            let mut pre = self.b3[i];
            for j in 0..3 {
                pre = pre + self.sp_h3[i][j] * z2[j];
            }
            t3[i] = pre.tanh();
            z3[i] = pre + self.ta3[i] * t3[i];
        }
        let mut pre4 = self.b4;
        for j in 0..3 {
            pre4 = pre4 + self.sp_h4[j] * z3[j];
        }
        let t4 = pre4.tanh();
        let z4 = pre4 + self.ta4 * t4;
        ChainCache {
            x,
            t1,
            z1,
            t2,
            z2,
            t3,
            z3,
            t4,
            c: sigmoid(z4),
        }
    }

    /// Backpropagate `dc` through a cached forward; accumulates parameter
    /// gradients into `g` and returns d(loss)/dx.
    fn backward(&self, cache: &ChainCache<F>, dc: F, g: &mut ChanGrads<F>) -> F {
        let one = F::one();
        let dz4 = dc * cache.c * (one - cache.c);
        let dz4_pre = dz4 * (one + self.ta4 * (one - cache.t4 * cache.t4));
        g.da4 = g.da4 + dz4 * cache.t4 * self.dta4;
        g.db4 = g.db4 + dz4_pre;
        let mut dz3 = [F::zero(); 3];
        for j in 0..3 {
            g.dh4[j] = g.dh4[j] + dz4_pre * cache.z3[j] * self.dsp_h4[j];
            dz3[j] = dz4_pre * self.sp_h4[j];
        }
        let mut dz2 = [F::zero(); 3];
        for i in 0..3 {
            let dpre = dz3[i] * (one + self.ta3[i] * (one - cache.t3[i] * cache.t3[i]));
            g.da3[i] = g.da3[i] + dz3[i] * cache.t3[i] * self.dta3[i];
            g.db3[i] = g.db3[i] + dpre;
            for j in 0..3 {
                g.dh3[i][j] = g.dh3[i][j] + dpre * cache.z2[j] * self.dsp_h3[i][j];
                dz2[j] = dz2[j] + dpre * self.sp_h3[i][j];
            }
        }
        let mut dz1 = [F::zero(); 3];
        for i in 0..3 {
            let dpre = dz2[i] * (one + self.ta2[i] * (one - cache.t2[i] * cache.t2[i]));
            g.da2[i] = g.da2[i] + dz2[i] * cache.t2[i] * self.dta2[i];
            g.db2[i] = g.db2[i] + dpre;
            for j in 0..3 {
                g.dh2[i][j] = g.dh2[i][j] + dpre * cache.z1[j] * self.dsp_h2[i][j];
                dz1[j] = dz1[j] + dpre * self.sp_h2[i][j];
            }
        }
        let mut dx = F::zero();
        for i in 0..3 {
            let dpre = dz1[i] * (one + self.ta1[i] * (one - cache.t1[i] * cache.t1[i]));
            g.da1[i] = g.da1[i] + dz1[i] * cache.t1[i] * self.dta1[i];
            g.db1[i] = g.db1[i] + dpre;
            g.dh1[i] = g.dh1[i] + dpre * cache.x * self.dsp_h1[i];
            dx = dx + dpre * self.sp_h1[i];
        }
        dx
    }
}

#[derive(Clone, Copy)]
struct ChanGrads<F> {
    dh1: [F; 3],
    db1: [F; 3],
    da1: [F; 3],
    dh2: [[F; 3]; 3],
    db2: [F; 3],
    da2: [F; 3],
    dh3: [[F; 3]; 3],
    db3: [F; 3],
    da3: [F; 3],
    dh4: [F; 3],
    db4: F,
    da4: F,
}

impl<F: Scalar> Default for ChanGrads<F> {
    fn default() -> Self {
        let z = F::zero();
        ChanGrads {
            dh1: [z; 3],
            db1: [z; 3],
            da1: [z; 3],
            dh2: [[z; 3]; 3],
            db2: [z; 3],
            da2: [z; 3],
            dh3: [[z; 3]; 3],
            db3: [z; 3],
            da3: [z; 3],
            dh4: [z; 3],
            db4: z,
            da4: z,
        }
    }
}

/// Gradients of a likelihood evaluation with respect to every prior
/// parameter array.
pub struct PriorGrads<F> {
    pub h1: Array2<F>,
    pub b1: Array2<F>,
    pub a1: Array2<F>,
    pub h2: Array3<F>,
    pub b2: Array2<F>,
    pub a2: Array2<F>,
    pub h3: Array3<F>,
    pub b3: Array2<F>,
    pub a3: Array2<F>,
    pub h4: Array2<F>,
    pub b4: Array1<F>,
    pub a4: Array1<F>,
}

/// Backward pass of [`FactorizedPrior::likelihood`]: given the cotangent of
/// the likelihood tensor, return gradients for the latent and all prior
/// parameters. Clamped probabilities pass zero gradient.
pub fn likelihood_bwd<F: Scalar>(
    prior: &FactorizedPrior<F>,
    latent: ArrayView3<F>,
    dy: ArrayView3<F>,
) -> (Array3<F>, Box<PriorGrads<F>>) {
    let (c, h, w) = latent.dim();
    assert_eq!(dy.dim(), (c, h, w), "likelihood cotangent shape");
    let half = F::half();
    let lo = F::from_f64(LIKELIHOOD_MIN);
    let mut dlatent = Array3::<F>::zeros((c, h, w));
    let mut grads = Box::new(PriorGrads {
        h1: Array2::zeros(prior.h1.dim()),
        b1: Array2::zeros(prior.b1.dim()),
        a1: Array2::zeros(prior.a1.dim()),
        h2: Array3::zeros(prior.h2.dim()),
        b2: Array2::zeros(prior.b2.dim()),
        a2: Array2::zeros(prior.a2.dim()),
        h3: Array3::zeros(prior.h3.dim()),
        b3: Array2::zeros(prior.b3.dim()),
        a3: Array2::zeros(prior.a3.dim()),
        h4: Array2::zeros(prior.h4.dim()),
        b4: Array1::zeros(prior.b4.dim()),
        a4: Array1::zeros(prior.a4.dim()),
    });
    for ch in 0..c {
        let p = prior.chan(ch);
        let mut cg = ChanGrads::<F>::default();
        let src = latent.index_axis(Axis(0), ch);
        let dyc = dy.index_axis(Axis(0), ch);
        let mut dl = dlatent.index_axis_mut(Axis(0), ch);
        for ((&v, &g), dv) in src.iter().zip(dyc.iter()).zip(dl.iter_mut()) {
            let hi = p.forward(v + half);
            let loc = p.forward(v - half);
            let raw = hi.c - loc.c;
            if raw <= lo || g == F::zero() {
                continue;
            }
            let dx_hi = p.backward(&hi, g, &mut cg);
            let dx_lo = p.backward(&loc, -g, &mut cg);
            *dv = dx_hi + dx_lo;
        }
        for i in 0..3 {
            grads.h1[[ch, i]] = cg.dh1[i];
            grads.b1[[ch, i]] = cg.db1[i];
            grads.a1[[ch, i]] = cg.da1[i];
            grads.b2[[ch, i]] = cg.db2[i];
            grads.a2[[ch, i]] = cg.da2[i];
            grads.b3[[ch, i]] = cg.db3[i];
            grads.a3[[ch, i]] = cg.da3[i];
            grads.h4[[ch, i]] = cg.dh4[i];
            for j in 0..3 {
                grads.h2[[ch, i, j]] = cg.dh2[i][j];
                grads.h3[[ch, i, j]] = cg.dh3[i][j];
            }
        }
        grads.b4[ch] = cg.db4;
        grads.a4[ch] = cg.da4;
    }
    (dlatent, grads)
}

/// Prior parameters registered on a tape for training.
pub struct PriorVars<F: Scalar> {
    pub h1: Var<F>,
    pub b1: Var<F>,
    pub a1: Var<F>,
    pub h2: Var<F>,
    pub b2: Var<F>,
    pub a2: Var<F>,
    pub h3: Var<F>,
    pub b3: Var<F>,
    pub a3: Var<F>,
    pub h4: Var<F>,
    pub b4: Var<F>,
    pub a4: Var<F>,
}

impl<F: Scalar> PriorVars<F> {
    pub fn insert(tape: &crate::nn::tape::Tape<F>, prior: &FactorizedPrior<F>) -> Self {
        PriorVars {
            h1: tape.param(prior.h1.clone().into_dyn()),
            b1: tape.param(prior.b1.clone().into_dyn()),
            a1: tape.param(prior.a1.clone().into_dyn()),
            h2: tape.param(prior.h2.clone().into_dyn()),
            b2: tape.param(prior.b2.clone().into_dyn()),
            a2: tape.param(prior.a2.clone().into_dyn()),
            h3: tape.param(prior.h3.clone().into_dyn()),
            b3: tape.param(prior.b3.clone().into_dyn()),
            a3: tape.param(prior.a3.clone().into_dyn()),
            h4: tape.param(prior.h4.clone().into_dyn()),
            b4: tape.param(prior.b4.clone().into_dyn()),
            a4: tape.param(prior.a4.clone().into_dyn()),
        }
    }

    /// Pull the twelve parameter vars from a model-wide table.
    pub fn from_table(vars: &VarTable<F>, prefix: &str) -> Self {
        let g = |name: &str| vars.get(&join(prefix, name)).clone();
        PriorVars {
            h1: g("h1"),
            b1: g("b1"),
            a1: g("a1"),
            h2: g("h2"),
            b2: g("b2"),
            a2: g("a2"),
            h3: g("h3"),
            b3: g("b3"),
            a3: g("a3"),
            h4: g("h4"),
            b4: g("b4"),
            a4: g("a4"),
        }
    }

    fn materialize(&self) -> FactorizedPrior<F> {
        let d1 = |v: &Var<F>| {
            v.value()
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned()
        };
        let d2 = |v: &Var<F>| {
            v.value()
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        let d3 = |v: &Var<F>| {
            v.value()
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .to_owned()
        };
        FactorizedPrior {
            h1: d2(&self.h1),
            b1: d2(&self.b1),
            a1: d2(&self.a1),
            h2: d3(&self.h2),
            b2: d2(&self.b2),
            a2: d2(&self.a2),
            h3: d3(&self.h3),
            b3: d2(&self.b3),
            a3: d2(&self.a3),
            h4: d2(&self.h4),
            b4: d1(&self.b4),
            a4: d1(&self.a4),
        }
    }
}

/// Differentiable likelihood of a latent tensor under prior vars: the fused
/// op evaluates the chain forward and scatters gradients to the latent and
/// all twelve parameter arrays on the way back.
pub fn likelihood_var<F: Scalar>(latent: &Var<F>, prior: &PriorVars<F>) -> Var<F> {
    let snapshot = prior.materialize();
    let lv = latent.value();
    let l3 = lv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let out = snapshot.likelihood(l3);
    let il = latent.id();
    let nl = latent.needs_grad();
    let ids = [
        prior.h1.id(),
        prior.b1.id(),
        prior.a1.id(),
        prior.h2.id(),
        prior.b2.id(),
        prior.a2.id(),
        prior.h3.id(),
        prior.b3.id(),
        prior.a3.id(),
        prior.h4.id(),
        prior.b4.id(),
        prior.a4.id(),
    ];
    let needs = [
        prior.h1.needs_grad(),
        prior.b1.needs_grad(),
        prior.a1.needs_grad(),
        prior.h2.needs_grad(),
        prior.b2.needs_grad(),
        prior.a2.needs_grad(),
        prior.h3.needs_grad(),
        prior.b3.needs_grad(),
        prior.a3.needs_grad(),
        prior.h4.needs_grad(),
        prior.b4.needs_grad(),
        prior.a4.needs_grad(),
    ];
    let any = nl || needs.iter().any(|&b| b);
    let lc = std::rc::Rc::clone(&lv);
    latent.push(
        out.into_dyn(),
        any,
        Some(Box::new(move |g, store| {
            let l3 = lc.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let (dlatent, pg) = likelihood_bwd(&snapshot, l3, g3);
            if nl {
                store.add(il, dlatent.into_dyn());
            }
            let parts: [ndarray::ArrayD<F>; 12] = [
                pg.h1.into_dyn(),
                pg.b1.into_dyn(),
                pg.a1.into_dyn(),
                pg.h2.into_dyn(),
                pg.b2.into_dyn(),
                pg.a2.into_dyn(),
                pg.h3.into_dyn(),
                pg.b3.into_dyn(),
                pg.a3.into_dyn(),
                pg.h4.into_dyn(),
                pg.b4.into_dyn(),
                pg.a4.into_dyn(),
            ];
            for ((id, need), part) in ids.iter().zip(needs.iter()).zip(parts) {
                if *need {
                    store.add(*id, part);
                }
            }
        })),
    )
}

/// Round-to-nearest quantization, halves away from zero.
pub fn quantize_round<F: Scalar>(x: ArrayView3<F>) -> Array3<i32> {
    x.mapv(|v| v.round().to_f64() as i32)
}

pub fn dequantize<F: Scalar>(q: &Array3<i32>) -> Array3<F> {
    q.mapv(|v| F::from_f64(v as f64))
}

/// Information content of a likelihood tensor in bits.
pub fn rate_bits<F: Scalar>(p: ArrayView3<F>) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    -p.iter().map(|&v| v.to_f64().ln()).sum::<f64>() / ln2
}

/// One channel's frozen coding table. Symbol index s < support_len encodes
/// integer value `min_sym + s`; index support_len is the escape symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    pub min_sym: i32,
    /// Cumulative frequencies, length support_len + 2; cdf[0] = 0 and
    /// cdf[len - 1] = 65536.
    pub cdf: Vec<u32>,
}

impl CdfTable {
    pub fn support_len(&self) -> usize {
        self.cdf.len() - 2
    }

    fn escape_index(&self) -> usize {
        self.support_len()
    }

    fn symbol_of(&self, v: i32) -> Option<usize> {
        if v < self.min_sym {
            return None;
        }
        let s = (v - self.min_sym) as usize;
        (s < self.support_len()).then_some(s)
    }
}

/// Per-channel coding tables for one latent bottleneck.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfSet {
    pub tables: Vec<CdfTable>,
}

/// Freeze a prior into integer coding tables.
///
/// The support of each channel grows outward from zero until the mass left
/// outside is at most [`TAIL_MASS`]; widths beyond [`MAX_SUPPORT_WIDTH`]
/// are an error. Probabilities are scaled to a 65536 total by largest
/// remainder, with every slot (escape included) kept at frequency >= 1.
pub fn build_cdf_tables<F: Scalar>(prior: &FactorizedPrior<F>) -> Result<CdfSet> {
    let mut tables = Vec::with_capacity(prior.channels());
    for ch in 0..prior.channels() {
        tables.push(build_channel_table(prior, ch)?);
    }
    Ok(CdfSet { tables })
}

fn build_channel_table<F: Scalar>(prior: &FactorizedPrior<F>, ch: usize) -> Result<CdfTable> {
    let p = prior.chan(ch);
    let half = F::half();
    let cdf_at = |v: i32, side: F| p.forward(F::from_f64(v as f64) + side).c.to_f64();
    let mut lo = 0i32;
    let mut hi = 0i32;
    loop {
        let below = cdf_at(lo, -half);
        let above = 1.0 - cdf_at(hi, half);
        if below + above <= TAIL_MASS {
            break;
        }
        if (hi - lo) as usize + 1 >= MAX_SUPPORT_WIDTH {
            return Err(Error::InvalidInput(format!(
                "channel {ch}: CDF support exceeds {MAX_SUPPORT_WIDTH} symbols"
            )));
        }
        // Expand the side leaking more mass.
        if below >= above {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    let support = (hi - lo + 1) as usize;
    // Real masses for the support plus the escape tail.
    let mut masses = Vec::with_capacity(support + 1);
    let mut prev = cdf_at(lo, -half);
    for v in lo..=hi {
        let next = cdf_at(v, half);
        masses.push((next - prev).max(0.0));
        prev = next;
    }
    let tail = (cdf_at(lo, -half) + (1.0 - prev)).max(0.0);
    masses.push(tail);

    let freqs = quantize_masses(&masses);
    let mut cdf = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for f in freqs {
        acc += f;
        cdf.push(acc);
    }
    debug_assert_eq!(*cdf.last().unwrap(), PROB_TOTAL);
    Ok(CdfTable { min_sym: lo, cdf })
}

/// Largest-remainder scaling of real masses to integer frequencies summing
/// to 65536, each at least 1.
fn quantize_masses(masses: &[f64]) -> Vec<u32> {
    let n = masses.len();
    assert!(n >= 1 && n < PROB_TOTAL as usize);
    let total: f64 = masses.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let targets: Vec<f64> = masses
        .iter()
        .map(|m| m / total * PROB_TOTAL as f64)
        .collect();
    let mut freqs: Vec<u32> = targets.iter().map(|&t| (t.floor() as u32).max(1)).collect();
    let mut sum: i64 = freqs.iter().map(|&f| i64::from(f)).sum();
    let target_sum = i64::from(PROB_TOTAL);
    // Distribute the deficit to the largest remainders, or claw back the
    // surplus from the entries furthest above their target. Ties resolve by
    // index so table construction is fully deterministic.
    while sum < target_sum {
        let (best, _) = freqs
            .iter()
            .enumerate()
            .map(|(i, &f)| (i, targets[i] - f as f64))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        freqs[best] += 1;
        sum += 1;
    }
    while sum > target_sum {
        let (best, _) = freqs
            .iter()
            .enumerate()
            .filter(|&(_, &f)| f > 1)
            .map(|(i, &f)| (i, f as f64 - targets[i]))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        freqs[best] -= 1;
        sum -= 1;
    }
    freqs
}

/// Entropy-code a quantized latent channel-major, row-major. Out-of-support
/// values emit the escape symbol followed by their zigzag value as two
/// uniform 16-bit halves.
pub fn encode_latent(q: &Array3<i32>, tables: &CdfSet, enc: &mut RangeEncoder) {
    let (c, _, _) = q.dim();
    assert_eq!(c, tables.tables.len(), "latent channels vs tables");
    for ch in 0..c {
        let t = &tables.tables[ch];
        let esc = t.escape_index();
        for &v in q.index_axis(Axis(0), ch).iter() {
            match t.symbol_of(v) {
                Some(s) => {
                    enc.encode(t.cdf[s], t.cdf[s + 1] - t.cdf[s], PROB_TOTAL);
                }
                None => {
                    enc.encode(t.cdf[esc], t.cdf[esc + 1] - t.cdf[esc], PROB_TOTAL);
                    let u = zigzag_encode(v);
                    enc.encode(u >> 16, 1, PROB_TOTAL);
                    enc.encode(u & 0xFFFF, 1, PROB_TOTAL);
                }
            }
        }
    }
}

/// Inverse of [`encode_latent`].
pub fn decode_latent(
    shape: (usize, usize, usize),
    tables: &CdfSet,
    dec: &mut RangeDecoder,
) -> Result<Array3<i32>> {
    let (c, h, w) = shape;
    if c != tables.tables.len() {
        return Err(Error::Corrupt(format!(
            "latent has {c} channels but model has {} tables",
            tables.tables.len()
        )));
    }
    let mut q = Array3::<i32>::zeros((c, h, w));
    for ch in 0..c {
        let t = &tables.tables[ch];
        let esc = t.escape_index();
        for slot in q.index_axis_mut(Axis(0), ch).iter_mut() {
            let f = dec.decode_freq(PROB_TOTAL);
            let s = t.cdf.partition_point(|&cum| cum <= f) - 1;
            dec.decode_update(t.cdf[s], t.cdf[s + 1] - t.cdf[s]);
            *slot = if s == esc {
                let hi = dec.decode_freq(PROB_TOTAL);
                dec.decode_update(hi, 1);
                let lo = dec.decode_freq(PROB_TOTAL);
                dec.decode_update(lo, 1);
                zigzag_decode(hi << 16 | lo)
            } else {
                t.min_sym + s as i32
            };
        }
    }
    Ok(q)
}

/// Bits the frozen tables assign to a quantized latent (escape payloads
/// included). Matches the range coder output up to stream overhead.
pub fn table_bits(q: &Array3<i32>, tables: &CdfSet) -> f64 {
    let mut bits = 0.0;
    let total = PROB_TOTAL as f64;
    for ch in 0..q.dim().0 {
        let t = &tables.tables[ch];
        let esc = t.escape_index();
        for &v in q.index_axis(Axis(0), ch).iter() {
            let s = t.symbol_of(v).unwrap_or(esc);
            let f = (t.cdf[s + 1] - t.cdf[s]) as f64;
            bits -= (f / total).log2();
            if s == esc {
                bits += 32.0;
            }
        }
    }
    bits
}
