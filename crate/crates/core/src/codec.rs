//! The assembled codec: model, P-frame coding, and sequence orchestration.
//!
//! A P-frame is coded in two passes. Motion: estimate flow from the
//! previous reconstruction to the target, compress it through the motion
//! autoencoder, and entropy-code the rounded latent. Prediction: decode
//! the flow, warp the reference, refine with the compensation network.
//! Residual: compress target minus prediction through the residual
//! autoencoder. The decoder-side reconstruction functions are the same
//! code the encoder calls, so both sides produce bit-identical frames
//! from the same bitstream by construction.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::bottleneck::{
    build_cdf_tables, decode_latent, dequantize, encode_latent, quantize_round, CdfSet,
    FactorizedPrior,
};
use crate::container::{
    join_pframe_payload, read_container, split_pframe_payload, write_container, ContainerHeader,
    FrameRecord, FrameType, METRIC_MSE, METRIC_MSSSIM,
};
use crate::error::{Error, Result};
use crate::flow::FlowNet;
use crate::frames::{crop_to_original, validate_or_pad, DimensionPolicy, Frame, PadInfo};
use crate::iframe::{codec_by_id, IframeCodec};
use crate::motion_comp::McNet;
use crate::nn::warp::warp_fwd;
use crate::params::{join, HasParams, ParamFn};
use crate::range_coder::{RangeDecoder, RangeEncoder};
use crate::transforms::{AnalysisTransform, SynthesisTransform, LATENT_CHANNELS, LATENT_STRIDE};

/// Which distortion the model was optimized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionMetric {
    Mse,
    MsSsim,
}

impl DistortionMetric {
    pub fn code(self) -> u8 {
        match self {
            DistortionMetric::Mse => METRIC_MSE,
            DistortionMetric::MsSsim => METRIC_MSSSIM,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            METRIC_MSE => Ok(DistortionMetric::Mse),
            METRIC_MSSSIM => Ok(DistortionMetric::MsSsim),
            other => Err(Error::Corrupt(format!("unknown metric code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistortionMetric::Mse => "mse",
            DistortionMetric::MsSsim => "msssim",
        }
    }
}

impl std::str::FromStr for DistortionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" | "psnr" => Ok(DistortionMetric::Mse),
            "msssim" => Ok(DistortionMetric::MsSsim),
            other => Err(Error::InvalidInput(format!(
                "unknown metric '{other}' (expected psnr/mse or msssim)"
            ))),
        }
    }
}

/// Frozen entropy-coding tables for both latents.
pub struct ModelTables {
    pub motion: CdfSet,
    pub residual: CdfSet,
}

/// All trainable components plus the rate-distortion operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    pub flow: FlowNet<f32>,
    pub mv_analysis: AnalysisTransform<f32>,
    pub mv_synthesis: SynthesisTransform<f32>,
    pub res_analysis: AnalysisTransform<f32>,
    pub res_synthesis: SynthesisTransform<f32>,
    pub mc: McNet<f32>,
    pub prior_m: FactorizedPrior<f32>,
    pub prior_y: FactorizedPrior<f32>,
    pub lambda: f32,
    pub metric: DistortionMetric,
}

/// Architecture summary folded into the topology hash; any structural
/// change must change this string.
const ARCHITECTURE: &str =
    "flow:5x(7x7 8-32-64-32-16-2);mv:3x3x128;res:5x5x128;mc:u64x3;prior:1-3-3-3-1;latent:128/16";

impl CodecModel {
    pub fn new(lambda: f32, metric: DistortionMetric, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        CodecModel {
            flow: FlowNet::new(&mut rng),
            mv_analysis: AnalysisTransform::new(2, 3, &mut rng),
            mv_synthesis: SynthesisTransform::new(2, 3, &mut rng),
            res_analysis: AnalysisTransform::new(3, 5, &mut rng),
            res_synthesis: SynthesisTransform::new(3, 5, &mut rng),
            mc: McNet::new(&mut rng),
            prior_m: FactorizedPrior::new(LATENT_CHANNELS, rng.random()),
            prior_y: FactorizedPrior::new(LATENT_CHANNELS, rng.random()),
            lambda,
            metric,
        }
    }

    /// Freeze the priors into coding tables. Encoder and decoder must call
    /// this on identical weights to agree on the bitstream.
    pub fn tables(&self) -> Result<ModelTables> {
        Ok(ModelTables {
            motion: build_cdf_tables(&self.prior_m)?,
            residual: build_cdf_tables(&self.prior_y)?,
        })
    }

    /// SHA-256 over format version, architecture, operating point, and
    /// every weight; identifies the exact model a bitstream needs.
    pub fn topology_hash(&mut self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update([crate::container::FORMAT_VERSION]);
        h.update(ARCHITECTURE.as_bytes());
        h.update(self.lambda.to_le_bytes());
        h.update([self.metric.code()]);
        self.for_each_param("", &mut |name: &str, view: ndarray::ArrayViewMutD<'_, f32>| {
            h.update(name.as_bytes());
            h.update((view.ndim() as u32).to_le_bytes());
            for &d in view.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in view.iter() {
                h.update(v.to_le_bytes());
            }
        });
        h.finalize().into()
    }

    /// Decoder-side motion path: latent to (decoded flow, warped reference,
    /// prediction).
    fn motion_reconstruct(
        &self,
        reference: &Frame,
        m_q: &Array3<i32>,
    ) -> (Array3<f32>, Frame, Frame) {
        let m_hat = dequantize::<f32>(m_q);
        let v_hat = self.mv_synthesis.forward(m_hat.view());
        let warped = warp_fwd(reference.view(), v_hat.view());
        let x_bar = self
            .mc
            .predict(reference.view(), warped.view(), v_hat.view());
        (v_hat, warped, x_bar)
    }

    /// Decoder-side residual path: prediction plus decoded residual,
    /// clipped to [0, 1].
    fn residual_reconstruct(&self, x_bar: &Frame, y_q: &Array3<i32>) -> Frame {
        let r_hat = self.res_synthesis.forward(dequantize::<f32>(y_q).view());
        let mut recon = x_bar + &r_hat;
        recon.mapv_inplace(|v| v.clamp(0.0, 1.0));
        recon
    }

    /// Code one P-frame. Returns (motion bytes, residual bytes, encoder
    /// reconstruction). The reconstruction is what a decoder will produce.
    pub fn encode_pframe(
        &self,
        reference: &Frame,
        target: &Frame,
        tables: &ModelTables,
    ) -> Result<(Vec<u8>, Vec<u8>, Frame)> {
        let v = self.flow.estimate(reference.view(), target.view());
        let m = self.mv_analysis.forward(v.view());
        let m_q = quantize_round(m.view());
        let mut enc = RangeEncoder::new();
        encode_latent(&m_q, &tables.motion, &mut enc);
        let mv_bytes = enc.finish();

        let (_, _, x_bar) = self.motion_reconstruct(reference, &m_q);
        let r = target - &x_bar;
        let y = self.res_analysis.forward(r.view());
        let y_q = quantize_round(y.view());
        let mut enc = RangeEncoder::new();
        encode_latent(&y_q, &tables.residual, &mut enc);
        let res_bytes = enc.finish();

        let recon = self.residual_reconstruct(&x_bar, &y_q);
        Ok((mv_bytes, res_bytes, recon))
    }

    /// Decode one P-frame against the previous reconstruction.
    pub fn decode_pframe(
        &self,
        reference: &Frame,
        mv_bytes: &[u8],
        res_bytes: &[u8],
        tables: &ModelTables,
    ) -> Result<Frame> {
        let (_, h, w) = reference.dim();
        let latent = (LATENT_CHANNELS, h / LATENT_STRIDE, w / LATENT_STRIDE);
        let mut dec = RangeDecoder::new(mv_bytes);
        let m_q = decode_latent(latent, &tables.motion, &mut dec)?;
        let (_, _, x_bar) = self.motion_reconstruct(reference, &m_q);
        let mut dec = RangeDecoder::new(res_bytes);
        let y_q = decode_latent(latent, &tables.residual, &mut dec)?;
        Ok(self.residual_reconstruct(&x_bar, &y_q))
    }
}

impl HasParams<f32> for CodecModel {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, f32>) {
        self.flow.for_each_param(&join(prefix, "flow"), f);
        self.mv_analysis
            .for_each_param(&join(prefix, "mv_analysis"), f);
        self.mv_synthesis
            .for_each_param(&join(prefix, "mv_synthesis"), f);
        self.res_analysis
            .for_each_param(&join(prefix, "res_analysis"), f);
        self.res_synthesis
            .for_each_param(&join(prefix, "res_synthesis"), f);
        self.mc.for_each_param(&join(prefix, "mc"), f);
        self.prior_m.for_each_param(&join(prefix, "prior_m"), f);
        self.prior_y.for_each_param(&join(prefix, "prior_y"), f);
    }
}

/// Everything the encoder produced for one sequence.
pub struct EncodedSequence {
    pub bytes: Vec<u8>,
    /// Reconstructions in the padded domain, one per frame.
    pub recons: Vec<Frame>,
    pub pad: PadInfo,
    /// Payload bits per frame (latent streams only, container overhead
    /// excluded).
    pub frame_bits: Vec<u64>,
}

impl EncodedSequence {
    /// Bits per pixel over the original (uncropped) dimensions.
    pub fn bpp(&self) -> f64 {
        let total: u64 = self.frame_bits.iter().sum();
        let pixels =
            self.pad.orig_width as f64 * self.pad.orig_height as f64 * self.recons.len() as f64;
        total as f64 / pixels
    }
}

/// Encode a frame sequence into a self-describing bitstream.
pub fn encode_sequence(
    model: &mut CodecModel,
    frames: &[Frame],
    gop: u16,
    iframe: &dyn IframeCodec,
    policy: DimensionPolicy,
) -> Result<EncodedSequence> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("no frames to encode".into()));
    }
    if gop == 0 {
        return Err(Error::InvalidInput("GOP length must be at least 1".into()));
    }
    let dim0 = frames[0].dim();
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != dim0 {
            return Err(Error::ShapeMismatch(format!(
                "frame {i} is {:?}, expected {:?}",
                f.dim(),
                dim0
            )));
        }
    }
    let (first_padded, pad) = validate_or_pad(&frames[0], policy)?;
    if pad.padded_width > u16::MAX as usize || pad.padded_height > u16::MAX as usize {
        return Err(Error::Resolution(format!(
            "padded dimensions {}x{} exceed the container's 16-bit field",
            pad.padded_width, pad.padded_height
        )));
    }
    let tables = model.tables()?;
    let hash = model.topology_hash();

    let mut records = Vec::with_capacity(frames.len());
    let mut recons = Vec::with_capacity(frames.len());
    let mut frame_bits = Vec::with_capacity(frames.len());
    let mut prev_recon: Option<Frame> = None;
    for (i, frame) in frames.iter().enumerate() {
        let padded = if i == 0 {
            first_padded.clone()
        } else {
            validate_or_pad(frame, policy)?.0
        };
        if i as u64 % gop as u64 == 0 {
            let (payload, recon) = iframe.encode(&padded, model.lambda)?;
            frame_bits.push(payload.len() as u64 * 8);
            records.push(FrameRecord {
                frame_type: FrameType::Intra,
                payload,
            });
            recons.push(recon.clone());
            prev_recon = Some(recon);
        } else {
            let reference = prev_recon.as_ref().unwrap();
            let (mv, res, recon) = model.encode_pframe(reference, &padded, &tables)?;
            frame_bits.push((mv.len() as u64 + res.len() as u64) * 8);
            records.push(FrameRecord {
                frame_type: FrameType::Predicted,
                payload: join_pframe_payload(&mv, &res),
            });
            recons.push(recon.clone());
            prev_recon = Some(recon);
        }
    }

    let header = ContainerHeader {
        orig_width: pad.orig_width as u16,
        orig_height: pad.orig_height as u16,
        padded_width: pad.padded_width as u16,
        padded_height: pad.padded_height as u16,
        frame_count: frames.len() as u32,
        gop,
        metric: model.metric.code(),
        lambda: model.lambda,
        topology_hash: hash,
        iframe_codec_id: iframe.id(),
    };
    let bytes = write_container(&header, &records)?;
    Ok(EncodedSequence {
        bytes,
        recons,
        pad,
        frame_bits,
    })
}

/// Decode a bitstream with the model it was encoded with. Frames come back
/// cropped to their original dimensions.
pub fn decode_sequence(
    model: &mut CodecModel,
    bytes: &[u8],
) -> Result<(Vec<Frame>, ContainerHeader)> {
    let (header, records) = read_container(bytes)?;
    let hash = model.topology_hash();
    if hash != header.topology_hash {
        return Err(Error::ModelMismatch(
            "bitstream was produced by a different model (topology hash differs)".into(),
        ));
    }
    let iframe = codec_by_id(header.iframe_codec_id)?;
    let tables = model.tables()?;
    let pad = PadInfo {
        orig_width: header.orig_width as usize,
        orig_height: header.orig_height as usize,
        padded_width: header.padded_width as usize,
        padded_height: header.padded_height as usize,
    };
    let mut out = Vec::with_capacity(records.len());
    let mut prev_recon: Option<Frame> = None;
    for (i, rec) in records.iter().enumerate() {
        let recon = match rec.frame_type {
            FrameType::Intra => {
                let f = iframe.decode(&rec.payload)?;
                if f.dim() != (3, pad.padded_height, pad.padded_width) {
                    return Err(Error::Corrupt(format!(
                        "frame {i}: intra frame is {:?}, header says {}x{}",
                        f.dim(),
                        pad.padded_width,
                        pad.padded_height
                    )));
                }
                f
            }
            FrameType::Predicted => {
                let reference = prev_recon.as_ref().ok_or_else(|| {
                    Error::Corrupt(format!("frame {i}: predicted frame without a reference"))
                })?;
                let (mv, res) = split_pframe_payload(&rec.payload)?;
                model.decode_pframe(reference, mv, res, &tables)?
            }
        };
        out.push(crop_to_original(&recon, &pad));
        prev_recon = Some(recon);
    }
    Ok((out, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::synthetic_clip;
    use crate::frames::SyntheticSpec;
    use crate::iframe::LosslessPng;

    fn small_model(seed: u64) -> CodecModel {
        CodecModel::new(1024.0, DistortionMetric::Mse, seed)
    }

    #[test]
    fn pframe_decode_matches_encoder_reconstruction() {
        let model = small_model(42);
        let tables = model.tables().unwrap();
        let clip = synthetic_clip(&SyntheticSpec::default());
        let (mv, res, recon) = model
            .encode_pframe(&clip[0], &clip[1], &tables)
            .unwrap();
        let decoded = model
            .decode_pframe(&clip[0], &mv, &res, &tables)
            .unwrap();
        assert_eq!(recon, decoded, "decoder must mirror encoder bit-exactly");
        assert!(recon.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn sequence_round_trips_and_reencodes_identically() {
        let mut model = small_model(7);
        let spec = SyntheticSpec {
            frames: 3,
            ..SyntheticSpec::default()
        };
        let clip = synthetic_clip(&spec);
        let enc1 = encode_sequence(
            &mut model,
            &clip,
            2,
            &LosslessPng,
            DimensionPolicy::Reject,
        )
        .unwrap();
        let enc2 = encode_sequence(
            &mut model,
            &clip,
            2,
            &LosslessPng,
            DimensionPolicy::Reject,
        )
        .unwrap();
        assert_eq!(enc1.bytes, enc2.bytes, "encoding must be deterministic");

        let (decoded, header) = decode_sequence(&mut model, &enc1.bytes).unwrap();
        assert_eq!(decoded.len(), 3);
        assert_eq!(header.gop, 2);
        for (d, r) in decoded.iter().zip(enc1.recons.iter()) {
            assert_eq!(d, r);
        }
        assert!(enc1.bpp() > 0.0);
    }

    #[test]
    fn padded_sequences_crop_back_to_original_size() {
        let mut model = small_model(9);
        // 60x70 is not dimension-aligned: rejected under Reject, coded
        // under Pad, and restored at the original size.
        let mut frames = Vec::new();
        for t in 0..2 {
            frames.push(ndarray::Array3::from_shape_fn((3, 70, 60), |(c, i, j)| {
                ((i + j * 2 + c * 5 + t * 3) % 97) as f32 / 96.0
            }));
        }
        let err = encode_sequence(
            &mut model,
            &frames,
            10,
            &LosslessPng,
            DimensionPolicy::Reject,
        );
        assert!(matches!(err, Err(Error::Resolution(_))));

        let enc = encode_sequence(&mut model, &frames, 10, &LosslessPng, DimensionPolicy::Pad)
            .unwrap();
        let (decoded, header) = decode_sequence(&mut model, &enc.bytes).unwrap();
        assert_eq!((header.padded_width, header.padded_height), (64, 80));
        assert_eq!(decoded[0].dim(), (3, 70, 60));
        // Lossless intra anchor: frame 0 survives exactly on the 8-bit grid.
        let grid = frames[0].mapv(crate::frames::quantize_to_8bit);
        assert_eq!(decoded[0], grid);
        // P-frame reconstruction matches the encoder's cropped recon.
        let cropped = crop_to_original(&enc.recons[1], &enc.pad);
        assert_eq!(decoded[1], cropped);
    }

    #[test]
    fn decode_rejects_wrong_model() {
        let mut model = small_model(1);
        let clip = synthetic_clip(&SyntheticSpec::default());
        let enc = encode_sequence(
            &mut model,
            &clip,
            10,
            &LosslessPng,
            DimensionPolicy::Reject,
        )
        .unwrap();
        let mut other = small_model(2);
        assert!(matches!(
            decode_sequence(&mut other, &enc.bytes),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn topology_hash_tracks_weights_and_operating_point() {
        let mut a = small_model(3);
        let h1 = a.topology_hash();
        assert_eq!(h1, a.topology_hash(), "hash must be stable");
        let mut b = small_model(3);
        assert_eq!(h1, b.topology_hash(), "same seed, same hash");
        b.lambda = 512.0;
        assert_ne!(h1, b.topology_hash(), "lambda is part of the identity");
        let mut c = small_model(3);
        c.mc.conv_in.b[0] += 1e-3;
        assert_ne!(h1, c.topology_hash(), "weights are part of the identity");
    }
}
