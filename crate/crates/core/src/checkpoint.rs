//! Model weight archives.
//!
//! A checkpoint is a little-endian binary file: magic "ODVW", format
//! version, metric code, lambda, parameter count, then each parameter as
//! (name, shape, f32 data) in traversal order, closed by a CRC32 over
//! everything after the magic. Loading rebuilds a model skeleton and fills
//! every named parameter; names or shapes that do not match the current
//! architecture are rejected rather than silently dropped.

use std::path::Path;

use crate::codec::{CodecModel, DistortionMetric};
use crate::error::{Error, Result};
use crate::params::HasParams;

const MAGIC: [u8; 4] = *b"ODVW";
const VERSION: u8 = 1;

/// Serialize a model to checkpoint bytes.
pub fn checkpoint_bytes(model: &mut CodecModel) -> Vec<u8> {
    let mut body = Vec::new();
    body.push(VERSION);
    body.push(model.metric.code());
    body.extend_from_slice(&model.lambda.to_le_bytes());
    let mut count = 0u32;
    let mut params = Vec::new();
    model.for_each_param("", &mut |name: &str, view: ndarray::ArrayViewMutD<'_, f32>| {
        count += 1;
        params.push((name.to_string(), view.to_owned()));
    });
    body.extend_from_slice(&count.to_le_bytes());
    for (name, arr) in &params {
        body.extend_from_slice(&(name.len() as u16).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(arr.ndim() as u8);
        for &d in arr.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(4 + body.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out
}

pub fn save_checkpoint(path: &Path, model: &mut CodecModel) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

/// Rebuild a model from checkpoint bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<CodecModel> {
    if bytes.len() < 14 || bytes[0..4] != MAGIC {
        return Err(Error::Corrupt("not a model checkpoint".into()));
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored_crc != actual {
        return Err(Error::Corrupt(format!(
            "checkpoint CRC mismatch (stored {stored_crc:08x}, computed {actual:08x})"
        )));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let version = take(&mut pos, 1)?[0];
    if version != VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let metric = DistortionMetric::from_code(take(&mut pos, 1)?[0])?;
    let lambda = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut stored: std::collections::BTreeMap<String, ndarray::ArrayD<f32>> =
        std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::Corrupt(format!("parameter {name}: bad shape: {e}")))?;
        if stored.insert(name.clone(), arr).is_some() {
            return Err(Error::Corrupt(format!("duplicate parameter {name}")));
        }
    }
    if pos != body.len() {
        return Err(Error::Corrupt("trailing bytes in checkpoint".into()));
    }

    let mut model = CodecModel::new(lambda, metric, 0);
    let mut err: Option<Error> = None;
    model.for_each_param("", &mut |name: &str, mut view: ndarray::ArrayViewMutD<'_, f32>| {
        if err.is_some() {
            return;
        }
        match stored.remove(name) {
            Some(arr) if arr.shape() == view.shape() => view.assign(&arr),
            Some(arr) => {
                err = Some(Error::ModelMismatch(format!(
                    "parameter {name}: checkpoint has shape {:?}, model expects {:?}",
                    arr.shape(),
                    view.shape()
                )));
            }
            None => {
                err = Some(Error::ModelMismatch(format!(
                    "checkpoint is missing parameter {name}"
                )));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::ModelMismatch(format!(
            "checkpoint has unknown parameter {name}"
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<CodecModel> {
    model_from_bytes(&std::fs::read(path)?)
}
