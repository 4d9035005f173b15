//! Rate-distortion measurement and reporting.
//!
//! [`evaluate`] runs the full encode/decode loop on a sequence, verifies
//! that the decoder reproduces the encoder's reconstructions bit for bit,
//! and only then reports metrics. A verification failure is a codec bug
//! and surfaces as a hard error, never as a metric. bpp counts the whole
//! container (headers, CRCs, I-frames) against the original frame area.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{encode_sequence, decode_sequence, CodecModel, DistortionMetric};
use crate::error::{Error, Result};
use crate::frames::{crop_to_original, DimensionPolicy, Frame};
use crate::iframe::IframeCodec;
use crate::metrics::{max_msssim_scales, msssim, psnr};

/// One point on a rate-distortion curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub sequence: String,
    pub lambda: f32,
    pub metric: DistortionMetric,
    /// Container bits divided by frame count times original frame area.
    pub bpp: f64,
    /// Mean of per-frame PSNR values.
    pub psnr_db: f64,
    /// Mean of per-frame MS-SSIM values.
    pub msssim: f64,
}

/// Per-frame measurement detail.
#[derive(Debug, Clone, Copy)]
pub struct FrameEval {
    pub psnr_db: f64,
    pub msssim: f64,
}

/// The result of evaluating one sequence: the RD point, the container
/// that produced it, and per-frame details.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub point: RdPoint,
    pub container: Vec<u8>,
    pub frames: Vec<FrameEval>,
}

/// Encode, decode, verify, and measure one sequence.
pub fn evaluate(
    model: &mut CodecModel,
    frames: &[Frame],
    gop: u16,
    iframe: &dyn IframeCodec,
    policy: DimensionPolicy,
    sequence: &str,
) -> Result<EvalOutcome> {
    let encoded = encode_sequence(model, frames, gop, iframe, policy)?;
    let (decoded, _header) = decode_sequence(model, &encoded.bytes)?;
    if decoded.len() != frames.len() {
        return Err(Error::Verification(format!(
            "decoded {} frames, encoded {}",
            decoded.len(),
            frames.len()
        )));
    }
    for (i, dec) in decoded.iter().enumerate() {
        let enc_recon = crop_to_original(&encoded.recons[i], &encoded.pad);
        let identical = dec
            .iter()
            .zip(enc_recon.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !identical {
            return Err(Error::Verification(format!(
                "frame {i}: decoder output differs from encoder reconstruction"
            )));
        }
    }

    let (_, h, w) = frames[0].dim();
    let scales = max_msssim_scales(h, w).min(5);
    let mut per_frame = Vec::with_capacity(frames.len());
    for (orig, dec) in frames.iter().zip(&decoded) {
        let p = psnr(orig.view(), dec.view());
        let s = if scales > 0 {
            msssim(orig.view(), dec.view(), scales)?
        } else {
            f64::NAN
        };
        per_frame.push(FrameEval {
            psnr_db: p,
            msssim: s,
        });
    }
    let n = per_frame.len() as f64;
    let point = RdPoint {
        sequence: sequence.to_string(),
        lambda: model.lambda,
        metric: model.metric,
        bpp: encoded.bytes.len() as f64 * 8.0 / (frames.len() as f64 * (w * h) as f64),
        psnr_db: per_frame.iter().map(|f| f.psnr_db).sum::<f64>() / n,
        msssim: per_frame.iter().map(|f| f.msssim).sum::<f64>() / n,
    };
    Ok(EvalOutcome {
        point,
        container: encoded.bytes,
        frames: per_frame,
    })
}

pub const RD_CSV_HEADER: &str = "sequence,lambda,metric,bpp,psnr_db,msssim";

/// Serialize RD points to CSV, header included.
pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for p in points {
        writeln!(
            out,
            "{},{},{},{:.8},{:.6},{:.8}",
            p.sequence,
            p.lambda,
            p.metric.name(),
            p.bpp,
            p.psnr_db,
            p.msssim
        )
        .unwrap();
    }
    out
}

/// Parse CSV produced by [`rd_csv`]; the header row is required.
pub fn parse_rd_csv(text: &str) -> Result<Vec<RdPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RD_CSV_HEADER => {}
        other => {
            return Err(Error::InvalidInput(format!(
                "bad RD CSV header: {other:?}"
            )))
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::InvalidInput(format!(
                "RD CSV row {} has {} columns, expected 6",
                i + 2,
                cols.len()
            )));
        }
        let fld = |j: usize, name: &str| -> Result<f64> {
            cols[j].trim().parse::<f64>().map_err(|_| {
                Error::InvalidInput(format!("RD CSV row {}: bad {name} '{}'", i + 2, cols[j]))
            })
        };
        points.push(RdPoint {
            sequence: cols[0].trim().to_string(),
            lambda: fld(1, "lambda")? as f32,
            metric: cols[2].trim().parse()?,
            bpp: fld(3, "bpp")?,
            psnr_db: fld(4, "psnr_db")?,
            msssim: fld(5, "msssim")?,
        });
    }
    Ok(points)
}

/// Read RD points from a CSV file.
pub fn read_rd_csv(path: &Path) -> Result<Vec<RdPoint>> {
    parse_rd_csv(&std::fs::read_to_string(path)?)
}

/// Plain-text RD table, rows sorted by bpp.
pub fn rd_table(points: &[RdPoint]) -> String {
    let mut sorted: Vec<&RdPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    let mut out = String::new();
    writeln!(
        out,
        "{:<20} {:>8} {:>8} {:>10} {:>9} {:>9}",
        "sequence", "lambda", "metric", "bpp", "psnr_db", "msssim"
    )
    .unwrap();
    for p in sorted {
        writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>10.5} {:>9.3} {:>9.5}",
            p.sequence,
            p.lambda,
            p.metric.name(),
            p.bpp,
            p.psnr_db,
            p.msssim
        )
        .unwrap();
    }
    out
}

/// Render RD points as a two-panel SVG plot (bpp vs PSNR, bpp vs MS-SSIM),
/// one polyline per sequence, points sorted by bpp.
pub fn rd_svg(points: &[RdPoint]) -> String {
    const W: f64 = 460.0;
    const H: f64 = 360.0;
    const ML: f64 = 58.0; // left margin for axis labels
    const MB: f64 = 42.0;
    const MT: f64 = 26.0;
    const MR: f64 = 14.0;

    let mut sequences: Vec<&str> = points.iter().map(|p| p.sequence.as_str()).collect();
    sequences.sort_unstable();
    sequences.dedup();
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         font-family=\"sans-serif\" font-size=\"11\">",
        (W * 2.0) as u32,
        H as u32
    )
    .unwrap();
    writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();

    let bounds = |vals: &mut dyn Iterator<Item = f64>| -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in vals {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = (hi - lo) * 0.07;
            (lo - pad, hi + pad)
        }
    };
    let (x_lo, x_hi) = bounds(&mut points.iter().map(|p| p.bpp));

    for (panel, (title, y_of)) in [
        ("PSNR (dB)", Box::new(|p: &RdPoint| p.psnr_db) as Box<dyn Fn(&RdPoint) -> f64>),
        ("MS-SSIM", Box::new(|p: &RdPoint| p.msssim)),
    ]
    .into_iter()
    .enumerate()
    {
        let ox = panel as f64 * W;
        let (y_lo, y_hi) = bounds(&mut points.iter().map(&y_of));
        let px = |bpp: f64| ox + ML + (bpp - x_lo) / (x_hi - x_lo) * (W - ML - MR);
        let py = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

        // Axes and labels.
        writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{MT}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"none\" stroke=\"#444\"/>",
            ox + ML,
            W - ML - MR,
            H - MT - MB
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"16\" text-anchor=\"middle\" font-weight=\"bold\">{title}</text>",
            ox + ML + (W - ML - MR) / 2.0
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">bits per pixel</text>",
            ox + ML + (W - ML - MR) / 2.0,
            H - 8.0
        )
        .unwrap();
        for frac in [0.0, 0.5, 1.0] {
            let bx = x_lo + frac * (x_hi - x_lo);
            let by = y_lo + frac * (y_hi - y_lo);
            writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>",
                px(bx),
                H - MB + 16.0,
                bx
            )
            .unwrap();
            writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
                ox + ML - 6.0,
                py(by) + 4.0,
                by
            )
            .unwrap();
        }

        for (si, seq) in sequences.iter().enumerate() {
            let mut pts: Vec<&RdPoint> = points
                .iter()
                .filter(|p| p.sequence == *seq && y_of(p).is_finite())
                .collect();
            pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
            if pts.is_empty() {
                continue;
            }
            let color = COLORS[si % COLORS.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.1},{:.1}", px(p.bpp), py(y_of(p))))
                .collect();
            if path.len() > 1 {
                writeln!(
                    svg,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                    path.join(" ")
                )
                .unwrap();
            }
            for p in &pts {
                writeln!(
                    svg,
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                    px(p.bpp),
                    py(y_of(p))
                )
                .unwrap();
            }
            if panel == 0 {
                writeln!(
                    svg,
                    "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{seq}</text>",
                    ox + ML + 8.0,
                    MT + 16.0 + 14.0 * si as f64
                )
                .unwrap();
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{synthetic_clip, SyntheticSpec};
    use crate::iframe::LosslessPng;

    #[test]
    fn evaluate_round_trips_and_reports_exact_bpp() {
        let mut model = CodecModel::new(1024.0, DistortionMetric::Mse, 11);
        let frames = synthetic_clip(&SyntheticSpec::default());
        let out = evaluate(
            &mut model,
            &frames,
            4,
            &LosslessPng,
            DimensionPolicy::Reject,
            "shift64",
        )
        .unwrap();
        let (_, h, w) = frames[0].dim();
        let expect_bpp =
            out.container.len() as f64 * 8.0 / (frames.len() as f64 * (w * h) as f64);
        assert_eq!(out.point.bpp, expect_bpp);
        assert!(out.point.bpp > 0.0);
        assert!(out.point.msssim <= 1.0 && out.point.msssim >= 0.0);
        assert_eq!(out.frames.len(), frames.len());
        // Lossless I-frame: the first frame is the 8-bit quantized input,
        // reconstructed exactly, so its PSNR is far above the P-frames'.
        assert!(out.frames[0].psnr_db > out.point.psnr_db);
    }

    #[test]
    fn lossless_single_frame_hits_the_psnr_cap() {
        // One frame, lossless I-frame codec: reconstruction equals the
        // 8-bit quantized input exactly.
        let mut model = CodecModel::new(256.0, DistortionMetric::Mse, 3);
        let mut frames = synthetic_clip(&SyntheticSpec::default());
        frames.truncate(1);
        // Pre-quantize so encode input == decode output bit for bit.
        let q = frames[0].mapv(crate::frames::quantize_to_8bit);
        let out = evaluate(
            &mut model,
            &[q],
            4,
            &LosslessPng,
            DimensionPolicy::Reject,
            "single",
        )
        .unwrap();
        assert_eq!(out.point.psnr_db, 100.0);
        assert!((out.point.msssim - 1.0).abs() < 1e-6);
    }

    #[test]
    fn csv_round_trips() {
        let points = vec![
            RdPoint {
                sequence: "a".into(),
                lambda: 256.0,
                metric: DistortionMetric::Mse,
                bpp: 0.125,
                psnr_db: 31.25,
                msssim: 0.9625,
            },
            RdPoint {
                sequence: "a".into(),
                lambda: 2048.0,
                metric: DistortionMetric::Mse,
                bpp: 0.5,
                psnr_db: 36.5,
                msssim: 0.9875,
            },
        ];
        let csv = rd_csv(&points);
        let parsed = parse_rd_csv(&csv).unwrap();
        assert_eq!(parsed, points);
        assert!(parse_rd_csv("nonsense\n1,2,3").is_err());
    }

    #[test]
    fn table_sorts_by_bpp_and_svg_is_well_formed() {
        let mk = |l: f32, bpp: f64, p: f64| RdPoint {
            sequence: "seq".into(),
            lambda: l,
            metric: DistortionMetric::Mse,
            bpp,
            psnr_db: p,
            msssim: 0.9,
        };
        let points = vec![mk(2048.0, 0.5, 36.0), mk(256.0, 0.1, 30.0), mk(512.0, 0.2, 32.0)];
        let table = rd_table(&points);
        let rows: Vec<&str> = table.lines().skip(1).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].contains("256"));
        assert!(rows[2].contains("2048"));
        let svg = rd_svg(&points);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 6); // 3 points x 2 panels
    }
}
