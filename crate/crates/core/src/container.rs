//! Bitstream container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "ODVC"
//! u8  format version
//! u16 original width, u16 original height
//! u16 padded width,   u16 padded height
//! u32 frame count
//! u16 GOP length
//! u8  distortion metric (0 = MSE, 1 = MS-SSIM)
//! f32 lambda
//! 32B model topology hash
//! u8  intra codec id
//! ```
//!
//! followed by one record per frame: `u8` frame type (0 intra,
//! 1 predicted), `u32` payload length, the payload, and the payload's
//! CRC32. Predicted payloads are `u32` motion length, motion bytes,
//! `u32` residual length, residual bytes.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ODVC";
pub const FORMAT_VERSION: u8 = 1;

pub const METRIC_MSE: u8 = 0;
pub const METRIC_MSSSIM: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Intra = 0,
    Predicted = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub orig_width: u16,
    pub orig_height: u16,
    pub padded_width: u16,
    pub padded_height: u16,
    pub frame_count: u32,
    pub gop: u16,
    pub metric: u8,
    pub lambda: f32,
    pub topology_hash: [u8; 32],
    pub iframe_codec_id: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub frame_type: FrameType,
    pub payload: Vec<u8>,
}

pub fn write_container(header: &ContainerHeader, records: &[FrameRecord]) -> Result<Vec<u8>> {
    if records.len() != header.frame_count as usize {
        return Err(Error::InvalidInput(format!(
            "header says {} frames but {} records given",
            header.frame_count,
            records.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&header.orig_width.to_le_bytes());
    out.extend_from_slice(&header.orig_height.to_le_bytes());
    out.extend_from_slice(&header.padded_width.to_le_bytes());
    out.extend_from_slice(&header.padded_height.to_le_bytes());
    out.extend_from_slice(&header.frame_count.to_le_bytes());
    out.extend_from_slice(&header.gop.to_le_bytes());
    out.push(header.metric);
    out.extend_from_slice(&header.lambda.to_le_bytes());
    out.extend_from_slice(&header.topology_hash);
    out.push(header.iframe_codec_id);
    for rec in records {
        out.push(rec.frame_type as u8);
        out.extend_from_slice(&(rec.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec.payload);
        out.extend_from_slice(&crc32fast::hash(&rec.payload).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "bitstream truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<(ContainerHeader, Vec<FrameRecord>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Corrupt("bad magic, not a codec bitstream".into()));
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported bitstream version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let orig_width = r.u16()?;
    let orig_height = r.u16()?;
    let padded_width = r.u16()?;
    let padded_height = r.u16()?;
    let frame_count = r.u32()?;
    let gop = r.u16()?;
    let metric = r.u8()?;
    let lambda = r.f32()?;
    let topology_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let iframe_codec_id = r.u8()?;
    if metric > METRIC_MSSSIM {
        return Err(Error::Corrupt(format!("unknown metric code {metric}")));
    }
    if padded_width < orig_width || padded_height < orig_height {
        return Err(Error::Corrupt(
            "padded dimensions smaller than original".into(),
        ));
    }
    let header = ContainerHeader {
        orig_width,
        orig_height,
        padded_width,
        padded_height,
        frame_count,
        gop,
        metric,
        lambda,
        topology_hash,
        iframe_codec_id,
    };
    let mut records = Vec::with_capacity(frame_count as usize);
    for i in 0..frame_count {
        let frame_type = match r.u8()? {
            0 => FrameType::Intra,
            1 => FrameType::Predicted,
            t => {
                return Err(Error::Corrupt(format!("frame {i}: unknown frame type {t}")));
            }
        };
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        let stored_crc = r.u32()?;
        let actual = crc32fast::hash(&payload);
        if stored_crc != actual {
            return Err(Error::Corrupt(format!(
                "frame {i}: payload CRC mismatch (stored {stored_crc:08x}, computed {actual:08x})"
            )));
        }
        records.push(FrameRecord {
            frame_type,
            payload,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after last frame",
            bytes.len() - r.pos
        )));
    }
    Ok((header, records))
}

/// Assemble a predicted-frame payload from its two latent streams.
pub fn join_pframe_payload(mv: &[u8], res: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + mv.len() + res.len());
    out.extend_from_slice(&(mv.len() as u32).to_le_bytes());
    out.extend_from_slice(mv);
    out.extend_from_slice(&(res.len() as u32).to_le_bytes());
    out.extend_from_slice(res);
    out
}

/// Split a predicted-frame payload into (motion bytes, residual bytes).
pub fn split_pframe_payload(payload: &[u8]) -> Result<(&[u8], &[u8])> {
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let mv_len = r.u32()? as usize;
    let mv = r.take(mv_len)?;
    let res_len = r.u32()? as usize;
    let res = r.take(res_len)?;
    if r.pos != payload.len() {
        return Err(Error::Corrupt(
            "predicted frame payload has trailing bytes".into(),
        ));
    }
    Ok((mv, res))
}
