//! Differentiable operations on tape variables.
//!
//! Each op computes its forward value eagerly with the shared numeric
//! kernels and records a backward closure capturing `Rc` handles to the
//! tensors it needs. Dimension conventions: images and feature maps are
//! (C, H, W); conv weights (C_out, C_in, kh, kw); deconv weights
//! (C_in, C_out, k, k).

use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

use super::conv;
use super::gdn;
use super::resample;
use super::scalar::Scalar;
use super::tape::{GradStore, Var};
use super::warp;

fn view3<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView3<'_, F> {
    a.view().into_dimensionality::<Ix3>().expect("3-d tensor")
}

fn view4<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("4-d tensor")
}

fn view1<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("1-d tensor")
}

fn view2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

impl<F: Scalar> Var<F> {
    fn check_mate(&self, other: &Var<F>) {
        assert!(self.same_tape(other), "vars from different tapes");
    }

    pub fn add(&self, other: &Var<F>) -> Var<F> {
        self.check_mate(other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let out = &*av + &*bv;
        let (ia, ib) = (self.id(), other.id());
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g: &ArrayD<F>, store: &mut GradStore<F>| {
                if na {
                    store.add(ia, g.clone());
                }
                if nb {
                    store.add(ib, g.clone());
                }
            })),
        )
    }

    pub fn sub(&self, other: &Var<F>) -> Var<F> {
        self.check_mate(other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape(), bv.shape(), "sub shapes");
        let out = &*av - &*bv;
        let (ia, ib) = (self.id(), other.id());
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, store| {
                if na {
                    store.add(ia, g.clone());
                }
                if nb {
                    store.add(ib, g.mapv(|v| -v));
                }
            })),
        )
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        self.check_mate(other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let out = &*av * &*bv;
        let (ia, ib) = (self.id(), other.id());
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, store| {
                if na {
                    store.add(ia, g * &*bc);
                }
                if nb {
                    store.add(ib, g * &*ac);
                }
            })),
        )
    }

    pub fn div(&self, other: &Var<F>) -> Var<F> {
        self.check_mate(other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape(), bv.shape(), "div shapes");
        let out = &*av / &*bv;
        let (ia, ib) = (self.id(), other.id());
        let (na, nb) = (self.needs_grad(), other.needs_grad());
        let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, store| {
                if na {
                    store.add(ia, g / &*bc);
                }
                if nb {
                    let d = g * &*ac / &(&*bc * &*bc);
                    store.add(ib, d.mapv(|v| -v));
                }
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Var<F> {
        let av = self.value();
        let cf = F::from_f64(c);
        let out = av.mapv(|v| v * cf);
        let ia = self.id();
        let na = self.needs_grad();
        self.push(
            out,
            na,
            Some(Box::new(move |g, store| {
                if na {
                    store.add(ia, g.mapv(|v| v * cf));
                }
            })),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var<F> {
        let av = self.value();
        let cf = F::from_f64(c);
        let out = av.mapv(|v| v + cf);
        let ia = self.id();
        let na = self.needs_grad();
        self.push(
            out,
            na,
            Some(Box::new(move |g, store| {
                if na {
                    store.add(ia, g.clone());
                }
            })),
        )
    }

    pub fn relu(&self) -> Var<F> {
        let av = self.value();
        let out = av.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let ia = self.id();
        let na = self.needs_grad();
        let ac = Rc::clone(&av);
        self.push(
            out,
            na,
            Some(Box::new(move |g, store| {
                if na {
                    let mut dx = g.clone();
                    ndarray::Zip::from(&mut dx).and(&*ac).for_each(|d, &x| {
                        if x <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    store.add(ia, dx);
                }
            })),
        )
    }

    /// Natural logarithm; domain is the caller's responsibility.
    pub fn ln(&self) -> Var<F> {
        let av = self.value();
        let out = av.mapv(|v| v.ln());
        let ia = self.id();
        let na = self.needs_grad();
        let ac = Rc::clone(&av);
        self.push(
            out,
            na,
            Some(Box::new(move |g, store| {
                if na {
                    store.add(ia, g / &*ac);
                }
            })),
        )
    }

    /// Elementwise power with a constant exponent; inputs must be positive
    /// when the exponent is fractional.
    pub fn powf_const(&self, e: f64) -> Var<F> {
        let av = self.value();
        let ef = F::from_f64(e);
        let out = av.mapv(|v| v.powf(ef));
        let ia = self.id();
        let na = self.needs_grad();
        let ac = Rc::clone(&av);
        self.push(
            out,
            na,
            Some(Box::new(move |g, store| {
                if na {
                    let em1 = F::from_f64(e - 1.0);
                    let d = ac.mapv(|v| ef * v.powf(em1));
                    store.add(ia, g * &d);
                }
            })),
        )
    }

    pub fn sum(&self) -> Var<F> {
        let av = self.value();
        let total: F = av.iter().copied().sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        let ia = self.id();
        let na = self.needs_grad();
        let shape = av.shape().to_vec();
        self.push(
            out,
            na,
            Some(Box::new(move |g, store| {
                if na {
                    let gv = *g.iter().next().unwrap();
                    store.add(ia, ArrayD::from_elem(IxDyn(&shape), gv));
                }
            })),
        )
    }

    pub fn mean(&self) -> Var<F> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Concatenate 3-d vars along the channel axis.
    pub fn concat_channels(parts: &[&Var<F>]) -> Var<F> {
        assert!(!parts.is_empty());
        let first = parts[0];
        for p in parts.iter().skip(1) {
            first.check_mate(p);
        }
        let values: Vec<Rc<ArrayD<F>>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| view3(v)).collect();
        let out = concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        let needs: Vec<bool> = parts.iter().map(|p| p.needs_grad()).collect();
        let chans: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
        let any = needs.iter().any(|&b| b);
        first.push(
            out.into_dyn(),
            any,
            Some(Box::new(move |g, store| {
                let g3 = view3(g);
                let mut at = 0;
                for ((&id, &ng), &c) in ids.iter().zip(needs.iter()).zip(chans.iter()) {
                    if ng {
                        let piece = g3.slice(ndarray::s![at..at + c, .., ..]).to_owned();
                        store.add(id, piece.into_dyn());
                    }
                    at += c;
                }
            })),
        )
    }

    /// 2-D convolution: input (C_in, H, W), weight (C_out, C_in, kh, kw).
    pub fn conv2d(&self, w: &Var<F>, b: Option<&Var<F>>, stride: usize, pad: usize) -> Var<F> {
        self.check_mate(w);
        if let Some(b) = b {
            self.check_mate(b);
        }
        let xv = self.value();
        let wv = w.value();
        let bv = b.map(|b| b.value());
        let out = conv::conv2d(
            view3(&xv),
            view4(&wv),
            bv.as_deref().map(|b| view1(b)),
            stride,
            pad,
        );
        let (ix, iw, ib) = (self.id(), w.id(), b.map(|b| b.id()));
        let (nx, nw, nb) = (
            self.needs_grad(),
            w.needs_grad(),
            b.map(|b| b.needs_grad()).unwrap_or(false),
        );
        let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
        self.push(
            out.into_dyn(),
            nx || nw || nb,
            Some(Box::new(move |g, store| {
                let g3 = view3(g);
                if nx {
                    let xd = view3(&xc).dim();
                    let dx = conv::conv2d_bwd_input(g3, view4(&wc), stride, pad, (xd.1, xd.2));
                    store.add(ix, dx.into_dyn());
                }
                if nw || nb {
                    let wd = view4(&wc).dim();
                    let (dw, db) =
                        conv::conv2d_bwd_params(view3(&xc), g3, stride, pad, (wd.2, wd.3));
                    if nw {
                        store.add(iw, dw.into_dyn());
                    }
                    if nb {
                        store.add(ib.unwrap(), db.into_dyn());
                    }
                }
            })),
        )
    }

    /// Stride-2 transposed convolution with output padding 1:
    /// input (C_in, H, W), weight (C_in, C_out, k, k), output (C_out, 2H, 2W).
    pub fn deconv2d_s2(&self, w: &Var<F>, b: Option<&Var<F>>, pad: usize) -> Var<F> {
        self.check_mate(w);
        if let Some(b) = b {
            self.check_mate(b);
        }
        let xv = self.value();
        let wv = w.value();
        let bv = b.map(|b| b.value());
        let out = conv::deconv2d_s2(
            view3(&xv),
            view4(&wv),
            bv.as_deref().map(|b| view1(b)),
            pad,
        );
        let (ix, iw, ib) = (self.id(), w.id(), b.map(|b| b.id()));
        let (nx, nw, nb) = (
            self.needs_grad(),
            w.needs_grad(),
            b.map(|b| b.needs_grad()).unwrap_or(false),
        );
        let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
        self.push(
            out.into_dyn(),
            nx || nw || nb,
            Some(Box::new(move |g, store| {
                let g3 = view3(g);
                if nx {
                    let dx = conv::deconv2d_s2_bwd_input(g3, view4(&wc), pad);
                    store.add(ix, dx.into_dyn());
                }
                if nw || nb {
                    let k = view4(&wc).dim().2;
                    let (dw, db) = conv::deconv2d_s2_bwd_params(view3(&xc), g3, pad, k);
                    if nw {
                        store.add(iw, dw.into_dyn());
                    }
                    if nb {
                        store.add(ib.unwrap(), db.into_dyn());
                    }
                }
            })),
        )
    }

    /// Divisive normalization with squared reparameterization:
    /// beta = beta_raw^2 + BETA_MIN, gamma = gamma_raw^2.
    pub fn gdn(&self, beta_raw: &Var<F>, gamma_raw: &Var<F>, inverse: bool) -> Var<F> {
        self.check_mate(beta_raw);
        self.check_mate(gamma_raw);
        let xv = self.value();
        let brv = beta_raw.value();
        let grv = gamma_raw.value();
        let beta = gdn::effective_beta(view1(&brv));
        let gamma = gdn::effective_gamma(view2(&grv));
        let out = gdn::gdn_fwd(view3(&xv), beta.view(), gamma.view(), inverse);
        let (ix, ibr, igr) = (self.id(), beta_raw.id(), gamma_raw.id());
        let (nx, nbr, ngr) = (
            self.needs_grad(),
            beta_raw.needs_grad(),
            gamma_raw.needs_grad(),
        );
        let xc = Rc::clone(&xv);
        let brc = Rc::clone(&brv);
        let grc = Rc::clone(&grv);
        self.push(
            out.into_dyn(),
            nx || nbr || ngr,
            Some(Box::new(move |g, store| {
                let beta = gdn::effective_beta(view1(&brc));
                let gamma = gdn::effective_gamma(view2(&grc));
                let (dx, dbeta, dgamma) =
                    gdn::gdn_bwd(view3(&xc), beta.view(), gamma.view(), view3(g), inverse);
                if nx {
                    store.add(ix, dx.into_dyn());
                }
                if nbr {
                    // beta = raw^2 + eps: d raw = 2 raw * d beta.
                    let draw = (&dbeta * &view1(&brc)).mapv(|v| v * F::two());
                    store.add(ibr, draw.into_dyn());
                }
                if ngr {
                    let draw = (&dgamma * &view2(&grc)).mapv(|v| v * F::two());
                    store.add(igr, draw.into_dyn());
                }
            })),
        )
    }

    /// Bilinear backward warp of `self` (C, H, W) by `flow` (2, H, W).
    pub fn warp(&self, flow: &Var<F>) -> Var<F> {
        self.check_mate(flow);
        let iv = self.value();
        let fv = flow.value();
        let out = warp::warp_fwd(view3(&iv), view3(&fv));
        let (ii, ifl) = (self.id(), flow.id());
        let (ni, nf) = (self.needs_grad(), flow.needs_grad());
        let (ic, fc) = (Rc::clone(&iv), Rc::clone(&fv));
        self.push(
            out.into_dyn(),
            ni || nf,
            Some(Box::new(move |g, store| {
                let (dimg, dflow) = warp::warp_bwd(view3(&ic), view3(&fc), view3(g), ni);
                if ni {
                    store.add(ii, dimg.unwrap().into_dyn());
                }
                if nf {
                    store.add(ifl, dflow.into_dyn());
                }
            })),
        )
    }

    pub fn upsample_bilinear2x(&self) -> Var<F> {
        let xv = self.value();
        let out = resample::upsample_bilinear2x(view3(&xv));
        let ix = self.id();
        let nx = self.needs_grad();
        let d = view3(&xv).dim();
        self.push(
            out.into_dyn(),
            nx,
            Some(Box::new(move |g, store| {
                if nx {
                    let dx = resample::upsample_bilinear2x_bwd(view3(g), (d.1, d.2));
                    store.add(ix, dx.into_dyn());
                }
            })),
        )
    }

    pub fn upsample_nearest2x(&self) -> Var<F> {
        let xv = self.value();
        let out = resample::upsample_nearest2x(view3(&xv));
        let ix = self.id();
        let nx = self.needs_grad();
        self.push(
            out.into_dyn(),
            nx,
            Some(Box::new(move |g, store| {
                if nx {
                    let dx = resample::upsample_nearest2x_bwd(view3(g));
                    store.add(ix, dx.into_dyn());
                }
            })),
        )
    }

    pub fn avg_pool2(&self) -> Var<F> {
        let xv = self.value();
        let out = resample::avg_pool2(view3(&xv));
        let ix = self.id();
        let nx = self.needs_grad();
        let d = view3(&xv).dim();
        self.push(
            out.into_dyn(),
            nx,
            Some(Box::new(move |g, store| {
                if nx {
                    let dx = resample::avg_pool2_bwd(view3(g), (d.1, d.2));
                    store.add(ix, dx.into_dyn());
                }
            })),
        )
    }

    /// Separable depthwise blur with a constant window, valid padding.
    pub fn blur_valid(&self, k: &ndarray::Array1<F>) -> Var<F> {
        let xv = self.value();
        let out = resample::blur_valid(view3(&xv), k.view());
        let ix = self.id();
        let nx = self.needs_grad();
        let d = view3(&xv).dim();
        let kc = k.clone();
        self.push(
            out.into_dyn(),
            nx,
            Some(Box::new(move |g, store| {
                if nx {
                    let dx = resample::blur_valid_bwd(view3(g), kc.view(), (d.1, d.2));
                    store.add(ix, dx.into_dyn());
                }
            })),
        )
    }
}
