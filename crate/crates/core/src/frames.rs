//! Frame and sequence I/O.
//!
//! A frame is a (3, H, W) `f32` tensor with values in [0, 1], converted
//! to and from 8-bit RGB PNG at the boundaries. Sequences are directories
//! of numbered PNGs with an optional `manifest.txt` sidecar recording
//! dimensions, frame count, GOP size, and the filename pattern.
//!
//! The codec operates on dimensions that are multiples of 16 (four stride-2
//! stages in each transform). Other sizes are either rejected or padded by
//! edge replication on the right and bottom, with the original size kept so
//! output can be cropped back.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use image::{DynamicImage, ImageFormat, RgbImage};
use ndarray::{s, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// A decoded frame: channels RGB, then rows, then columns.
pub type Frame = Array3<f32>;

/// Spatial granularity required by the transform stack.
pub const DIMENSION_MULTIPLE: usize = 16;

/// Smallest side the pipeline accepts before padding.
pub const MIN_SIDE: usize = 16;

pub const DEFAULT_FRAME_PATTERN: &str = "f%03d.png";
pub const DEFAULT_GOP: u16 = 10;

fn rgb8_to_frame(img: &RgbImage) -> Frame {
    let (w, h) = img.dimensions();
    let mut f = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            f[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    f
}

fn frame_to_rgb8(frame: &Frame) -> RgbImage {
    let (c, h, w) = frame.dim();
    assert_eq!(c, 3, "frame must have 3 channels");
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = frame[[ch, y as usize, x as usize]];
            p.0[ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Load a PNG as a frame, mapping byte value b to b / 255.
pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.into_rgb8();
    let f = rgb8_to_frame(&img);
    let (_, h, w) = f.dim();
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Resolution(format!(
            "{}: frame {w}x{h} is smaller than the {MIN_SIDE}px minimum side",
            path.display()
        )));
    }
    Ok(f)
}

/// Save a frame as PNG, mapping value v to round(v * 255) clamped to [0, 255].
pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    frame_to_rgb8(frame)
        .save_with_format(path, ImageFormat::Png)
        .map_err(Error::from)
}

/// Encode a frame to PNG bytes in memory (same quantization as [`save_frame`]).
pub fn frame_to_png_bytes(frame: &Frame) -> Result<Vec<u8>> {
    let img = frame_to_rgb8(frame);
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Decode PNG bytes produced by [`frame_to_png_bytes`].
pub fn frame_from_png_bytes(bytes: &[u8]) -> Result<Frame> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_rgb8();
    Ok(rgb8_to_frame(&img))
}

/// The frame value an 8-bit PNG round trip preserves: round(v * 255) / 255.
pub fn quantize_to_8bit(v: f32) -> f32 {
    (v * 255.0).round().clamp(0.0, 255.0) / 255.0
}

/// How to handle dimensions that are not multiples of 16.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimensionPolicy {
    Reject,
    Pad,
}

/// Original size retained through padding so reconstructions can be cropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadInfo {
    pub orig_width: usize,
    pub orig_height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
}

impl PadInfo {
    pub fn is_padded(&self) -> bool {
        self.orig_width != self.padded_width || self.orig_height != self.padded_height
    }
}

fn next_multiple(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Check a frame against the dimension contract, padding by edge
/// replication when the policy allows it.
pub fn validate_or_pad(frame: &Frame, policy: DimensionPolicy) -> Result<(Frame, PadInfo)> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected 3 channels, got {c}"
        )));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Resolution(format!(
            "frame {w}x{h} is smaller than the {MIN_SIDE}px minimum side"
        )));
    }
    let info = PadInfo {
        orig_width: w,
        orig_height: h,
        padded_width: next_multiple(w, DIMENSION_MULTIPLE),
        padded_height: next_multiple(h, DIMENSION_MULTIPLE),
    };
    if !info.is_padded() {
        return Ok((frame.clone(), info));
    }
    if policy == DimensionPolicy::Reject {
        let mut msg = String::new();
        if w % DIMENSION_MULTIPLE != 0 {
            let _ = write!(msg, "width {w} is not a multiple of {DIMENSION_MULTIPLE}");
        }
        if h % DIMENSION_MULTIPLE != 0 {
            if !msg.is_empty() {
                msg.push_str("; ");
            }
            let _ = write!(msg, "height {h} is not a multiple of {DIMENSION_MULTIPLE}");
        }
        return Err(Error::Resolution(msg));
    }
    let mut padded = Array3::<f32>::zeros((3, info.padded_height, info.padded_width));
    padded.slice_mut(s![.., ..h, ..w]).assign(frame);
    // Replicate the last column to the right, then the last row downward.
    for j in w..info.padded_width {
        let col = padded.slice(s![.., ..h, w - 1]).to_owned();
        padded.slice_mut(s![.., ..h, j]).assign(&col);
    }
    for i in h..info.padded_height {
        let row = padded.slice(s![.., h - 1, ..]).to_owned();
        padded.slice_mut(s![.., i, ..]).assign(&row);
    }
    Ok((padded, info))
}

/// Crop a padded reconstruction back to its original size.
pub fn crop_to_original(frame: &Frame, info: &PadInfo) -> Frame {
    frame
        .slice(s![.., ..info.orig_height, ..info.orig_width])
        .to_owned()
}

/// Expand a printf-style `%0Nd` (or `%d`) pattern with a frame index.
pub fn format_frame_name(pattern: &str, index: usize) -> Result<String> {
    let Some(pos) = pattern.find('%') else {
        return Err(Error::InvalidInput(format!(
            "frame pattern {pattern:?} has no % placeholder"
        )));
    };
    let rest = &pattern[pos + 1..];
    let digits_end = rest
        .char_indices()
        .find(|(_, ch)| !ch.is_ascii_digit())
        .map(|(i, _)| i)
        .unwrap_or(rest.len());
    let (width_str, after) = rest.split_at(digits_end);
    if !after.starts_with('d') {
        return Err(Error::InvalidInput(format!(
            "frame pattern {pattern:?} must use a %0Nd placeholder"
        )));
    }
    let width: usize = if width_str.is_empty() {
        0
    } else {
        width_str.parse().map_err(|_| {
            Error::InvalidInput(format!("frame pattern {pattern:?} has a bad field width"))
        })?
    };
    Ok(format!(
        "{}{:0width$}{}",
        &pattern[..pos],
        index,
        &after[1..],
        width = width
    ))
}

/// Sequence sidecar record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub gop: u16,
    pub pattern: String,
    pub start: usize,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let body = format!(
        "width = {}\nheight = {}\ncount = {}\ngop = {}\npattern = {}\nstart = {}\n",
        m.width, m.height, m.count, m.gop, m.pattern, m.start
    );
    std::fs::write(dir.join(MANIFEST_NAME), body)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)?;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidInput(format!(
                "{}: bad manifest line {line:?}",
                path.display()
            )));
        };
        fields.insert(k.trim(), v.trim());
    }
    let get_num = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .ok_or_else(|| Error::InvalidInput(format!("{}: missing {key}", path.display())))?
            .parse()
            .map_err(|_| Error::InvalidInput(format!("{}: bad {key}", path.display())))
    };
    Ok(Manifest {
        width: get_num("width")?,
        height: get_num("height")?,
        count: get_num("count")?,
        gop: get_num("gop").unwrap_or(DEFAULT_GOP as usize) as u16,
        pattern: fields
            .get("pattern")
            .map(|s| s.to_string())
            .unwrap_or_else(|| DEFAULT_FRAME_PATTERN.to_string()),
        start: get_num("start").unwrap_or(0),
    })
}

/// A sequence directory resolved to frame paths.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub manifest: Manifest,
    pub paths: Vec<PathBuf>,
}

/// Open a sequence directory. With a manifest, paths follow its pattern;
/// without one, all PNGs are taken in lexicographic order and dimensions
/// are probed from the first frame.
pub fn open_sequence(dir: &Path) -> Result<Sequence> {
    if dir.join(MANIFEST_NAME).exists() {
        let manifest = read_manifest(dir)?;
        let mut paths = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let name = format_frame_name(&manifest.pattern, manifest.start + i)?;
            let p = dir.join(&name);
            if !p.exists() {
                return Err(Error::InvalidInput(format!(
                    "{}: manifest names {name} but the file is missing",
                    dir.display()
                )));
            }
            paths.push(p);
        }
        return Ok(Sequence { manifest, paths });
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no manifest and no PNG frames",
            dir.display()
        )));
    }
    let first = load_frame(&paths[0])?;
    let (_, h, w) = first.dim();
    Ok(Sequence {
        manifest: Manifest {
            width: w,
            height: h,
            count: paths.len(),
            gop: DEFAULT_GOP,
            pattern: DEFAULT_FRAME_PATTERN.to_string(),
            start: 0,
        },
        paths,
    })
}

/// Load every frame of a sequence, checking dimensions stay constant.
pub fn load_sequence_frames(seq: &Sequence) -> Result<Vec<Frame>> {
    let mut frames = Vec::with_capacity(seq.paths.len());
    for p in &seq.paths {
        let f = load_frame(p)?;
        let (_, h, w) = f.dim();
        if (w, h) != (seq.manifest.width, seq.manifest.height) {
            return Err(Error::ShapeMismatch(format!(
                "{}: frame is {w}x{h}, sequence is {}x{}",
                p.display(),
                seq.manifest.width,
                seq.manifest.height
            )));
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Source of training clips: short runs of consecutive frames sharing one
/// crop window, each frame (3, S, S) with S a multiple of 16.
pub trait ClipStream {
    fn next_clip(&mut self) -> Result<Vec<Frame>>;
}

/// Cycles over a fixed set of in-memory clips. Used for desk-scale training
/// and tests.
pub struct MemoryClipStream {
    clips: Vec<Vec<Frame>>,
    at: usize,
}

impl MemoryClipStream {
    pub fn new(clips: Vec<Vec<Frame>>) -> Self {
        assert!(!clips.is_empty(), "empty clip set");
        MemoryClipStream { clips, at: 0 }
    }
}

impl ClipStream for MemoryClipStream {
    fn next_clip(&mut self) -> Result<Vec<Frame>> {
        let clip = self.clips[self.at % self.clips.len()].clone();
        self.at += 1;
        Ok(clip)
    }
}

/// Seeded sampler over one or more sequence directories.
pub struct DatasetSampler {
    sequences: Vec<Sequence>,
    clip_len: usize,
    crop: usize,
    rng: ChaCha20Rng,
    cache: HashMap<(usize, usize), Rc<Frame>>,
}

const SAMPLER_CACHE_CAP: usize = 512;

impl DatasetSampler {
    /// `root` is either a single sequence directory or a directory of
    /// sequence subdirectories. `crop` must be a multiple of 16.
    pub fn new(root: &Path, clip_len: usize, crop: usize, seed: u64) -> Result<Self> {
        if clip_len < 2 {
            return Err(Error::InvalidInput("clip_len must be at least 2".into()));
        }
        if crop % DIMENSION_MULTIPLE != 0 || crop == 0 {
            return Err(Error::InvalidInput(format!(
                "crop {crop} is not a positive multiple of {DIMENSION_MULTIPLE}"
            )));
        }
        let mut sequences = Vec::new();
        match open_sequence(root) {
            Ok(seq) => sequences.push(seq),
            Err(_) => {
                let mut subdirs: Vec<PathBuf> = std::fs::read_dir(root)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_dir())
                    .collect();
                subdirs.sort();
                for d in subdirs {
                    if let Ok(seq) = open_sequence(&d) {
                        sequences.push(seq);
                    }
                }
            }
        }
        sequences.retain(|s| s.manifest.count >= clip_len);
        for s in &sequences {
            if s.manifest.width < crop || s.manifest.height < crop {
                return Err(Error::Resolution(format!(
                    "sequence {}x{} is smaller than the {crop}px crop",
                    s.manifest.width, s.manifest.height
                )));
            }
        }
        if sequences.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{}: no usable sequences with at least {clip_len} frames",
                root.display()
            )));
        }
        Ok(DatasetSampler {
            sequences,
            clip_len,
            crop,
            rng: ChaCha20Rng::seed_from_u64(seed),
            cache: HashMap::new(),
        })
    }

    fn frame(&mut self, seq_idx: usize, frame_idx: usize) -> Result<Rc<Frame>> {
        if let Some(f) = self.cache.get(&(seq_idx, frame_idx)) {
            return Ok(Rc::clone(f));
        }
        let f = Rc::new(load_frame(&self.sequences[seq_idx].paths[frame_idx])?);
        if self.cache.len() >= SAMPLER_CACHE_CAP {
            self.cache.clear();
        }
        self.cache.insert((seq_idx, frame_idx), Rc::clone(&f));
        Ok(f)
    }
}

impl ClipStream for DatasetSampler {
    fn next_clip(&mut self) -> Result<Vec<Frame>> {
        let si = self.rng.random_range(0..self.sequences.len());
        let m = &self.sequences[si].manifest;
        let start = self.rng.random_range(0..=m.count - self.clip_len);
        let x0 = self.rng.random_range(0..=m.width - self.crop);
        let y0 = self.rng.random_range(0..=m.height - self.crop);
        let mut clip = Vec::with_capacity(self.clip_len);
        for t in 0..self.clip_len {
            let full = self.frame(si, start + t)?;
            clip.push(
                full.slice(s![.., y0..y0 + self.crop, x0..x0 + self.crop])
                    .to_owned(),
            );
        }
        Ok(clip)
    }
}

/// Parameters for the synthetic translating-texture generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Nominal per-frame translation in pixels (horizontal, vertical).
    pub shift: (f64, f64),
    pub waves: usize,
    /// Fractional spread of per-wave speeds: wave k advances at
    /// shift * (1 + e_k) with e_k uniform in [-jitter, jitter], so the
    /// motion is only approximately rigid (shimmer). Zero restores exact
    /// frame-to-frame translation.
    pub velocity_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 64,
            height: 64,
            frames: 2,
            shift: (1.0, 0.0),
            waves: 24,
            velocity_jitter: 0.35,
            seed: 7,
        }
    }
}

/// Generate a clip whose frames are one continuous band-limited texture
/// sampled at translated positions: frame t reads the texture at
/// (x + t * shift_x, y + t * shift_y), so the ground-truth flow between
/// consecutive frames is exactly `shift`.
pub fn synthetic_clip(spec: &SyntheticSpec) -> Vec<Frame> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let k = spec.waves.max(1);
    let mut omega = Vec::with_capacity(k);
    let mut phase = Vec::with_capacity(k);
    let mut amp_raw = Vec::with_capacity(k);
    for _ in 0..k {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        // Log-uniform over [3, 48) px so the texture carries energy from
        // near-Nyquist detail up to image-scale gradients.
        let wavelength = 3.0 * 16.0f64.powf(rng.random::<f64>());
        let w = std::f64::consts::TAU / wavelength;
        omega.push((w * theta.cos(), w * theta.sin()));
        phase.push([
            rng.random::<f64>() * std::f64::consts::TAU,
            rng.random::<f64>() * std::f64::consts::TAU,
            rng.random::<f64>() * std::f64::consts::TAU,
        ]);
        amp_raw.push(0.5 + rng.random::<f64>());
    }
    // Total amplitude 0.42 keeps values inside [0.08, 0.92].
    let total: f64 = amp_raw.iter().sum();
    let amp: Vec<f64> = amp_raw.iter().map(|a| 0.42 * a / total).collect();

    (0..spec.frames)
        .map(|t| {
            let ox = t as f64 * spec.shift.0;
            let oy = t as f64 * spec.shift.1;
            Array3::from_shape_fn((3, spec.height, spec.width), |(c, i, j)| {
                let x = j as f64 + ox;
                let y = i as f64 + oy;
                let mut v = 0.5;
                for ((&(wx, wy), ph), &a) in omega.iter().zip(phase.iter()).zip(amp.iter()) {
                    v += a * (wx * x + wy * y + ph[c]).sin();
                }
                v as f32
            })
        })
        .collect()
}

/// The bundled 64x64 two-frame clip with a +1px horizontal shift.
pub fn acceptance_clip() -> Vec<Frame> {
    synthetic_clip(&SyntheticSpec::default())
}

/// Write a synthetic clip as a PNG sequence with a manifest.
pub fn write_synthetic_sequence(dir: &Path, spec: &SyntheticSpec, gop: u16) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let frames = synthetic_clip(spec);
    let manifest = Manifest {
        width: spec.width,
        height: spec.height,
        count: spec.frames,
        gop,
        pattern: DEFAULT_FRAME_PATTERN.to_string(),
        start: 0,
    };
    for (i, f) in frames.iter().enumerate() {
        let name = format_frame_name(&manifest.pattern, i)?;
        save_frame(&dir.join(name), f)?;
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}
