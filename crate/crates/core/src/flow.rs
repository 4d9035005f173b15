//! Coarse-to-fine optical flow estimation.
//!
//! Both frames are reduced to a five-level pyramid by 2x2 mean pooling.
//! Starting from zero flow at the coarsest level, each level doubles the
//! incoming flow (bilinear upsample, values scaled by 2), warps the
//! reference toward the target, and runs a small network on
//! concat(warped reference, target, flow) whose output refines the flow
//! additively. Each level has its own weights: five 7x7 stride-1
//! convolutions with channels 8 -> 32 -> 64 -> 32 -> 16 -> 2 and ReLU
//! between them.

use ndarray::{concatenate, Array3, ArrayView3, Axis};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::conv::conv2d;
use crate::nn::resample::{avg_pool2, upsample_bilinear2x};
use crate::nn::scalar::Scalar;
use crate::nn::tape::Var;
use crate::nn::warp::warp_fwd;
use crate::params::{join, HasParams, ParamFn, VarTable};
use crate::transforms::ConvLayer;

/// Pyramid depth; the coarsest level is 1/16 resolution.
pub const PYRAMID_LEVELS: usize = 5;

const FLOW_KERNEL: usize = 7;
const LEVEL_CHANNELS: [usize; 6] = [8, 32, 64, 32, 16, 2];

/// One refinement network, applied at a single pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLevel<F = f32> {
    pub convs: Vec<ConvLayer<F>>,
}

impl<F: Scalar> FlowLevel<F> {
    fn new(rng: &mut ChaCha20Rng) -> Self {
        let convs = LEVEL_CHANNELS
            .windows(2)
            .map(|w| ConvLayer::new(w[1], w[0], FLOW_KERNEL, rng))
            .collect();
        FlowLevel { convs }
    }

    /// Residual flow from concat(warped, target, flow); ReLU between
    /// convolutions, none after the last.
    fn forward(&self, input: ArrayView3<F>) -> Array3<F> {
        let mut h = input.to_owned();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv2d(h.view(), conv.w.view(), Some(conv.b.view()), 1, conv.pad());
            if i < last {
                h.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            }
        }
        h
    }

    fn forward_var(&self, input: &Var<F>, vars: &VarTable<F>, prefix: &str) -> Var<F> {
        let mut h = input.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let w = vars.get(&join(prefix, &format!("conv{i}.w")));
            let b = vars.get(&join(prefix, &format!("conv{i}.b")));
            h = h.conv2d(w, Some(b), 1, conv.pad());
            if i < last {
                h = h.relu();
            }
        }
        h
    }
}

impl<F: Scalar> HasParams<F> for FlowLevel<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.for_each_param(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

/// The full pyramid flow estimator. `levels[0]` runs at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNet<F = f32> {
    pub levels: Vec<FlowLevel<F>>,
}

impl<F: Scalar> FlowNet<F> {
    pub fn new(rng: &mut ChaCha20Rng) -> Self {
        let levels = (0..PYRAMID_LEVELS).map(|_| FlowLevel::new(rng)).collect();
        FlowNet { levels }
    }

    /// Estimate flow mapping `target` pixel positions into `reference`.
    /// Output is (2, H, W): channel 0 horizontal, channel 1 vertical.
    pub fn estimate(&self, reference: ArrayView3<F>, target: ArrayView3<F>) -> Array3<F> {
        let pr = build_pyramid(reference, PYRAMID_LEVELS);
        let pt = build_pyramid(target, PYRAMID_LEVELS);
        let coarse = pr.last().unwrap().dim();
        let mut flow = Array3::<F>::zeros((2, coarse.1, coarse.2));
        for l in (0..PYRAMID_LEVELS).rev() {
            if l + 1 < PYRAMID_LEVELS {
                flow = upsample_bilinear2x(flow.view());
                flow.mapv_inplace(|v| v * F::two());
            }
            let warped = warp_fwd(pr[l].view(), flow.view());
            let input = concatenate(
                Axis(0),
                &[warped.view(), pt[l].view(), flow.view()],
            )
            .unwrap();
            let residual = self.levels[l].forward(input.view());
            flow.zip_mut_with(&residual, |a, &b| *a = *a + b);
        }
        flow
    }

    /// Differentiable twin of [`FlowNet::estimate`].
    pub fn estimate_var(
        &self,
        reference: &Var<F>,
        target: &Var<F>,
        vars: &VarTable<F>,
        prefix: &str,
    ) -> Var<F> {
        let mut pr = vec![reference.clone()];
        let mut pt = vec![target.clone()];
        for _ in 1..PYRAMID_LEVELS {
            pr.push(pr.last().unwrap().avg_pool2());
            pt.push(pt.last().unwrap().avg_pool2());
        }
        let coarse = pr.last().unwrap().shape();
        let mut flow = reference.push(
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, coarse[1], coarse[2]])),
            false,
            None,
        );
        for l in (0..PYRAMID_LEVELS).rev() {
            if l + 1 < PYRAMID_LEVELS {
                flow = flow.upsample_bilinear2x().scale(2.0);
            }
            let warped = pr[l].warp(&flow);
            let input = Var::concat_channels(&[&warped, &pt[l], &flow]);
            let residual = self.levels[l].forward_var(&input, vars, &join(prefix, &format!("level{l}")));
            flow = flow.add(&residual);
        }
        flow
    }
}

impl<F: Scalar> HasParams<F> for FlowNet<F> {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        for (l, level) in self.levels.iter_mut().enumerate() {
            level.for_each_param(&join(prefix, &format!("level{l}")), f);
        }
    }
}

/// Mean-pooled image pyramid; `out[0]` is the input itself.
pub fn build_pyramid<F: Scalar>(x: ArrayView3<F>, levels: usize) -> Vec<Array3<F>> {
    assert!(levels >= 1);
    let mut out = vec![x.to_owned()];
    for _ in 1..levels {
        let next = avg_pool2(out.last().unwrap().view());
        out.push(next);
    }
    out
}

/// Warp an image by a flow field, validating shapes.
pub fn warp_image<F: Scalar>(img: ArrayView3<F>, flow: ArrayView3<F>) -> Result<Array3<F>> {
    let (fc, fh, fw) = flow.dim();
    let (_, h, w) = img.dim();
    if fc != 2 {
        return Err(Error::ShapeMismatch(format!(
            "flow must have 2 channels, got {fc}"
        )));
    }
    if (fh, fw) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "flow grid {fh}x{fw} does not match image {h}x{w}"
        )));
    }
    Ok(warp_fwd(img, flow))
}
