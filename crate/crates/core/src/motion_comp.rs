//! Motion compensation network.
//!
//! Refines a warped reference into the final prediction. The input is the
//! 8-channel concat(reference, warped reference, decoded flow); a U-shaped
//! stack of 3x3 convolutions at 64 channels processes it at full, half,
//! and quarter resolution with additive skip connections, and the output
//! layer adds onto the warped frame. That output layer is zero-initialized,
//! so an untrained network passes the warped frame through unchanged.
//! No clipping is applied here; the codec clips final reconstructions.

use ndarray::{concatenate, Array3, ArrayView3, Axis};
use rand_chacha::ChaCha20Rng;

use crate::nn::conv::conv2d;
use crate::nn::resample::upsample_nearest2x;
use crate::nn::scalar::Scalar;
use crate::nn::tape::Var;
use crate::params::{join, HasParams, ParamFn, VarTable};
use crate::transforms::ConvLayer;

const MC_CHANNELS: usize = 64;
const MC_KERNEL: usize = 3;

/// Pre-activation residual block: x + conv(relu(conv(relu(x)))).
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<F = f32> {
    pub c1: ConvLayer<F>,
    pub c2: ConvLayer<F>,
}

impl<F: Scalar> ResBlock<F> {
    fn new(rng: &mut ChaCha20Rng) -> Self {
        ResBlock {
            c1: ConvLayer::new(MC_CHANNELS, MC_CHANNELS, MC_KERNEL, rng),
            c2: ConvLayer::new(MC_CHANNELS, MC_CHANNELS, MC_KERNEL, rng),
        }
    }

    fn forward(&self, x: ArrayView3<F>) -> Array3<F> {
        let relu = |v: F| if v > F::zero() { v } else { F::zero() };
        let h = x.mapv(relu);
        let h = conv2d(h.view(), self.c1.w.view(), Some(self.c1.b.view()), 1, 1);
        let h = h.mapv(relu);
        let h = conv2d(h.view(), self.c2.w.view(), Some(self.c2.b.view()), 1, 1);
        &h + &x
    }

    fn forward_var(&self, x: &Var<F>, vars: &VarTable<F>, prefix: &str) -> Var<F> {
        let h = x
            .relu()
            .conv2d(
                vars.get(&join(prefix, "c1.w")),
                Some(vars.get(&join(prefix, "c1.b"))),
                1,
                1,
            )
            .relu()
            .conv2d(
                vars.get(&join(prefix, "c2.w")),
                Some(vars.get(&join(prefix, "c2.b"))),
                1,
                1,
            );
        h.add(x)
    }
}

impl<F: Scalar> HasParams<F> for ResBlock<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.c1.for_each_param(&join(prefix, "c1"), f);
        self.c2.for_each_param(&join(prefix, "c2"), f);
    }
}

/// U-shaped refinement over (reference, warped, flow).
#[derive(Debug, Clone, PartialEq)]
pub struct McNet<F = f32> {
    pub conv_in: ConvLayer<F>,
    pub rb_full_down: Vec<ResBlock<F>>,
    pub down1: ConvLayer<F>,
    pub rb_half_down: Vec<ResBlock<F>>,
    pub down2: ConvLayer<F>,
    pub rb_quarter: Vec<ResBlock<F>>,
    pub up1: ConvLayer<F>,
    pub rb_half_up: ResBlock<F>,
    pub up2: ConvLayer<F>,
    pub rb_full_up: ResBlock<F>,
    pub conv_mid: ConvLayer<F>,
    pub conv_out: ConvLayer<F>,
}

impl<F: Scalar> McNet<F> {
    pub fn new(rng: &mut ChaCha20Rng) -> Self {
        let c = MC_CHANNELS;
        let k = MC_KERNEL;
        let mut conv_out = ConvLayer::new(3, c, k, rng);
        // Zero output layer: the fresh network reproduces the warped frame.
        conv_out.w.fill(F::zero());
        conv_out.b.fill(F::zero());
        McNet {
            conv_in: ConvLayer::new(c, 8, k, rng),
            rb_full_down: vec![ResBlock::new(rng), ResBlock::new(rng)],
            down1: ConvLayer::new(c, c, k, rng),
            rb_half_down: vec![ResBlock::new(rng), ResBlock::new(rng)],
            down2: ConvLayer::new(c, c, k, rng),
            rb_quarter: vec![ResBlock::new(rng), ResBlock::new(rng), ResBlock::new(rng)],
            up1: ConvLayer::new(c, c, k, rng),
            rb_half_up: ResBlock::new(rng),
            up2: ConvLayer::new(c, c, k, rng),
            rb_full_up: ResBlock::new(rng),
            conv_mid: ConvLayer::new(c, c, k, rng),
            conv_out,
        }
    }

    /// Predict the target frame from the reference, its warp, and the
    /// decoded flow. Spatial dims must be divisible by 4.
    pub fn predict(
        &self,
        reference: ArrayView3<F>,
        warped: ArrayView3<F>,
        flow: ArrayView3<F>,
    ) -> Array3<F> {
        let (_, h, w) = reference.dim();
        assert!(h % 4 == 0 && w % 4 == 0, "MC input dims must be multiples of 4");
        let relu = |v: F| if v > F::zero() { v } else { F::zero() };
        let cv = |x: ArrayView3<F>, l: &ConvLayer<F>, s: usize| {
            conv2d(x, l.w.view(), Some(l.b.view()), s, 1)
        };
        let x = concatenate(Axis(0), &[reference, warped, flow]).unwrap();
        let mut full = cv(x.view(), &self.conv_in, 1);
        for rb in &self.rb_full_down {
            full = rb.forward(full.view());
        }
        let mut half = cv(full.view(), &self.down1, 2);
        for rb in &self.rb_half_down {
            half = rb.forward(half.view());
        }
        let mut quarter = cv(half.view(), &self.down2, 2);
        for rb in &self.rb_quarter {
            quarter = rb.forward(quarter.view());
        }
        let mut u1 = cv(upsample_nearest2x(quarter.view()).view(), &self.up1, 1);
        u1.zip_mut_with(&half, |a, &b| *a = *a + b);
        let u1 = self.rb_half_up.forward(u1.view());
        let mut u2 = cv(upsample_nearest2x(u1.view()).view(), &self.up2, 1);
        u2.zip_mut_with(&full, |a, &b| *a = *a + b);
        let u2 = self.rb_full_up.forward(u2.view());
        let m = cv(u2.view(), &self.conv_mid, 1).mapv(relu);
        let out = cv(m.view(), &self.conv_out, 1);
        &out + &warped
    }

    /// Differentiable twin of [`McNet::predict`].
    pub fn predict_var(
        &self,
        reference: &Var<F>,
        warped: &Var<F>,
        flow: &Var<F>,
        vars: &VarTable<F>,
        prefix: &str,
    ) -> Var<F> {
        let cv = |x: &Var<F>, name: &str, s: usize| {
            x.conv2d(
                vars.get(&join(prefix, &format!("{name}.w"))),
                Some(vars.get(&join(prefix, &format!("{name}.b")))),
                s,
                1,
            )
        };
        let x = Var::concat_channels(&[reference, warped, flow]);
        let mut full = cv(&x, "conv_in", 1);
        for (i, rb) in self.rb_full_down.iter().enumerate() {
            full = rb.forward_var(&full, vars, &join(prefix, &format!("rb_full_down{i}")));
        }
        let mut half = cv(&full, "down1", 2);
        for (i, rb) in self.rb_half_down.iter().enumerate() {
            half = rb.forward_var(&half, vars, &join(prefix, &format!("rb_half_down{i}")));
        }
        let mut quarter = cv(&half, "down2", 2);
        for (i, rb) in self.rb_quarter.iter().enumerate() {
            quarter = rb.forward_var(&quarter, vars, &join(prefix, &format!("rb_quarter{i}")));
        }
        let u1 = cv(&quarter.upsample_nearest2x(), "up1", 1).add(&half);
        let u1 = self.rb_half_up.forward_var(&u1, vars, &join(prefix, "rb_half_up"));
        let u2 = cv(&u1.upsample_nearest2x(), "up2", 1).add(&full);
        let u2 = self.rb_full_up.forward_var(&u2, vars, &join(prefix, "rb_full_up"));
        let m = cv(&u2, "conv_mid", 1).relu();
        cv(&m, "conv_out", 1).add(warped)
    }
}

impl<F: Scalar> HasParams<F> for McNet<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.conv_in.for_each_param(&join(prefix, "conv_in"), f);
        for (i, rb) in self.rb_full_down.iter_mut().enumerate() {
            rb.for_each_param(&join(prefix, &format!("rb_full_down{i}")), f);
        }
        self.down1.for_each_param(&join(prefix, "down1"), f);
        for (i, rb) in self.rb_half_down.iter_mut().enumerate() {
            rb.for_each_param(&join(prefix, &format!("rb_half_down{i}")), f);
        }
        self.down2.for_each_param(&join(prefix, "down2"), f);
        for (i, rb) in self.rb_quarter.iter_mut().enumerate() {
            rb.for_each_param(&join(prefix, &format!("rb_quarter{i}")), f);
        }
        self.up1.for_each_param(&join(prefix, "up1"), f);
        self.rb_half_up
            .for_each_param(&join(prefix, "rb_half_up"), f);
        self.up2.for_each_param(&join(prefix, "up2"), f);
        self.rb_full_up
            .for_each_param(&join(prefix, "rb_full_up"), f);
        self.conv_mid.for_each_param(&join(prefix, "conv_mid"), f);
        self.conv_out.for_each_param(&join(prefix, "conv_out"), f);
    }
}
