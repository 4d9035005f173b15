//! Intra-frame codecs.
//!
//! I-frames anchor each GOP; the codec trait returns both the payload and
//! the reconstruction the encoder must use as its reference, so encoder
//! and decoder stay in lockstep. Two implementations ship: a lossless PNG
//! store (lossless at 8-bit depth) and an adapter around external BPG
//! binaries for lossy anchors.

use std::path::PathBuf;
use std::process::Command;

use crate::error::{Error, Result};
use crate::frames::{frame_from_png_bytes, frame_to_png_bytes, Frame};

pub const LOSSLESS_PNG_ID: u8 = 0;
pub const BPG_ID: u8 = 1;

/// Environment variables naming the BPG binaries; bare `bpgenc`/`bpgdec`
/// on PATH are used when unset.
pub const BPG_ENCODER_ENV: &str = "ODVC_BPGENC";
pub const BPG_DECODER_ENV: &str = "ODVC_BPGDEC";

pub trait IframeCodec {
    fn id(&self) -> u8;
    fn name(&self) -> &'static str;
    /// Encode a frame at a quality steered by the model's lambda. Returns
    /// the payload and the exact reconstruction a decoder will produce.
    fn encode(&self, frame: &Frame, lambda: f32) -> Result<(Vec<u8>, Frame)>;
    fn decode(&self, bytes: &[u8]) -> Result<Frame>;
}

/// Stores the 8-bit frame as a PNG; bit-exact against its own decode.
pub struct LosslessPng;

impl IframeCodec for LosslessPng {
    fn id(&self) -> u8 {
        LOSSLESS_PNG_ID
    }

    fn name(&self) -> &'static str {
        "png"
    }

    fn encode(&self, frame: &Frame, _lambda: f32) -> Result<(Vec<u8>, Frame)> {
        let bytes = frame_to_png_bytes(frame)?;
        // Round the reconstruction through the actual decode path so the
        // encoder reference is the decoder output by construction.
        let recon = frame_from_png_bytes(&bytes)?;
        Ok((bytes, recon))
    }

    fn decode(&self, bytes: &[u8]) -> Result<Frame> {
        frame_from_png_bytes(bytes)
    }
}

/// Lossy anchor via the external `bpgenc`/`bpgdec` binaries.
pub struct BpgCodec {
    encoder: PathBuf,
    decoder: PathBuf,
}

impl BpgCodec {
    pub fn new() -> Self {
        let encoder = std::env::var_os(BPG_ENCODER_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("bpgenc"));
        let decoder = std::env::var_os(BPG_DECODER_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("bpgdec"));
        BpgCodec { encoder, decoder }
    }

    /// Quantizer step for a rate-distortion weight; higher lambda means
    /// higher quality anchors.
    pub fn qp_for_lambda(lambda: f32) -> u32 {
        // Nearest of the calibrated (lambda, qp) pairs.
        let map = [(256.0f32, 37u32), (512.0, 32), (1024.0, 27), (2048.0, 22)];
        map.iter()
            .min_by(|a, b| {
                let da = (a.0.ln() - lambda.ln()).abs();
                let db = (b.0.ln() - lambda.ln()).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .1
    }

    pub fn available(&self) -> bool {
        let probe = |p: &PathBuf| {
            Command::new(p)
                .arg("-h")
                .output()
                .map(|_| true)
                .unwrap_or(false)
        };
        probe(&self.encoder) && probe(&self.decoder)
    }

    fn run(&self, cmd: &mut Command, what: &str) -> Result<()> {
        let out = cmd.output().map_err(|e| {
            Error::Unavailable(format!(
                "{what} ({}) failed to launch: {e}",
                cmd.get_program().to_string_lossy()
            ))
        })?;
        if !out.status.success() {
            return Err(Error::Unavailable(format!(
                "{what} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        Ok(())
    }
}

impl Default for BpgCodec {
    fn default() -> Self {
        Self::new()
    }
}

impl IframeCodec for BpgCodec {
    fn id(&self) -> u8 {
        BPG_ID
    }

    fn name(&self) -> &'static str {
        "bpg"
    }

    fn encode(&self, frame: &Frame, lambda: f32) -> Result<(Vec<u8>, Frame)> {
        let dir = tempfile::tempdir()?;
        let png = dir.path().join("in.png");
        let bpg = dir.path().join("out.bpg");
        std::fs::write(&png, frame_to_png_bytes(frame)?)?;
        let qp = Self::qp_for_lambda(lambda);
        self.run(
            Command::new(&self.encoder)
                .arg("-q")
                .arg(qp.to_string())
                .arg("-o")
                .arg(&bpg)
                .arg(&png),
            "bpg encoder",
        )?;
        let bytes = std::fs::read(&bpg)?;
        let recon = self.decode(&bytes)?;
        Ok((bytes, recon))
    }

    fn decode(&self, bytes: &[u8]) -> Result<Frame> {
        let dir = tempfile::tempdir()?;
        let bpg = dir.path().join("in.bpg");
        let png = dir.path().join("out.png");
        std::fs::write(&bpg, bytes)?;
        self.run(
            Command::new(&self.decoder)
                .arg("-o")
                .arg(&png)
                .arg(&bpg),
            "bpg decoder",
        )?;
        frame_from_png_bytes(&std::fs::read(&png)?)
    }
}

/// Instantiate the codec recorded in a bitstream header.
pub fn codec_by_id(id: u8) -> Result<Box<dyn IframeCodec>> {
    match id {
        LOSSLESS_PNG_ID => Ok(Box::new(LosslessPng)),
        BPG_ID => Ok(Box::new(BpgCodec::new())),
        other => Err(Error::Corrupt(format!("unknown intra codec id {other}"))),
    }
}

/// Instantiate a codec by CLI name.
pub fn codec_by_name(name: &str) -> Result<Box<dyn IframeCodec>> {
    match name {
        "lossless" | "png" => Ok(Box::new(LosslessPng)),
        "bpg" => Ok(Box::new(BpgCodec::new())),
        other => Err(Error::InvalidInput(format!(
            "unknown intra codec '{other}' (expected lossless or bpg)"
        ))),
    }
}
