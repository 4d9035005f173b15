//! `odvc`: encode, decode, train, and evaluate the learned video codec.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use odvc_core::checkpoint::{load_checkpoint, save_checkpoint};
use odvc_core::codec::{decode_sequence, CodecModel, DistortionMetric};
use odvc_core::eval::{evaluate, rd_csv, rd_svg, rd_table, read_rd_csv, RdPoint};
use odvc_core::frames::{
    format_frame_name, load_sequence_frames, open_sequence, save_frame, write_manifest,
    write_synthetic_sequence, DatasetSampler, DimensionPolicy, Manifest, SyntheticSpec,
    DEFAULT_FRAME_PATTERN,
};
use odvc_core::iframe::codec_by_name;
use odvc_core::training::{train, Stage, TrainConfig};
use odvc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "odvc", version, about = "Learned video codec with motion compensation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a frame sequence directory into a bitstream container.
    Encode {
        /// Sequence directory (PNG frames, optional manifest.txt).
        #[arg(long)]
        input: PathBuf,
        /// Model checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Intra-frame period; defaults to the sequence manifest's GOP.
        #[arg(long)]
        gop: Option<u16>,
        /// I-frame codec: lossless or bpg.
        #[arg(long, default_value = "lossless")]
        iframe: String,
        /// Pad frames whose sides are not multiples of 16 instead of rejecting them.
        #[arg(long)]
        pad: bool,
        /// Output container path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a container back into PNG frames.
    Decode {
        /// Container path.
        #[arg(long = "in")]
        input: PathBuf,
        /// Model checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for decoded frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model with the progressive four-stage schedule.
    Train {
        /// Dataset root: one sequence directory, or a directory of them.
        #[arg(long)]
        data: PathBuf,
        /// Rate-distortion tradeoff weight.
        #[arg(long)]
        lambda: f32,
        /// Distortion metric: psnr (MSE loss) or msssim.
        #[arg(long, default_value = "psnr")]
        metric: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Initial checkpoint; training then runs only the final stage
        /// (used for MS-SSIM fine-tuning from an MSE model).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Per-stage step caps: me,motion,mc,full.
        #[arg(long, value_delimiter = ',', default_value = "2000,1000,1000,3000")]
        max_steps: Vec<usize>,
        /// Convergence window in steps.
        #[arg(long, default_value_t = 500)]
        window: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Training crop side (multiple of 16).
        #[arg(long, default_value_t = 64)]
        crop: usize,
        /// Frames per training clip.
        #[arg(long, default_value_t = 2)]
        clip_len: usize,
        /// Per-step loss CSV path.
        #[arg(long)]
        log_csv: Option<PathBuf>,
    },
    /// Encode, decode, verify, and report an RD point as CSV.
    Evaluate {
        /// Sequence directory.
        #[arg(long)]
        input: PathBuf,
        /// Model checkpoint path.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gop: Option<u16>,
        #[arg(long, default_value = "lossless")]
        iframe: String,
        #[arg(long)]
        pad: bool,
        /// Sequence id for the CSV; defaults to the input directory name.
        #[arg(long)]
        sequence: Option<String>,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate RD CSV files into a table and an SVG plot.
    Curves {
        /// RD CSV files produced by `evaluate`.
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        /// Write the plain-text table here (also printed to stdout).
        #[arg(long)]
        out_table: Option<PathBuf>,
        /// Write the SVG plot here.
        #[arg(long)]
        out_svg: Option<PathBuf>,
    },
    /// Generate a synthetic translating-texture test sequence.
    Synth {
        /// Output sequence directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 2)]
        frames: usize,
        /// Per-frame translation "dx,dy" in pixels.
        #[arg(long, default_value = "1,0")]
        shift: String,
        #[arg(long, default_value_t = 24)]
        waves: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// GOP recorded in the manifest.
        #[arg(long, default_value_t = 10)]
        gop: u16,
    },
}

fn policy(pad: bool) -> DimensionPolicy {
    if pad {
        DimensionPolicy::Pad
    } else {
        DimensionPolicy::Reject
    }
}

fn load_input(dir: &Path) -> Result<(Vec<odvc_core::Frame>, u16)> {
    let seq = open_sequence(dir)?;
    let frames = load_sequence_frames(&seq)?;
    Ok((frames, seq.manifest.gop))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Encode {
            input,
            model,
            gop,
            iframe,
            pad,
            out,
        } => {
            let codec = codec_by_name(&iframe)?;
            let mut model = load_checkpoint(&model)?;
            let (frames, manifest_gop) = load_input(&input)?;
            let gop = gop.unwrap_or(manifest_gop);
            let encoded =
                odvc_core::codec::encode_sequence(&mut model, &frames, gop, codec.as_ref(), policy(pad))?;
            std::fs::write(&out, &encoded.bytes)?;
            eprintln!(
                "encoded {} frames, {} bytes, {:.4} bpp -> {}",
                frames.len(),
                encoded.bytes.len(),
                encoded.bpp(),
                out.display()
            );
        }
        Command::Decode { input, model, out } => {
            let mut model = load_checkpoint(&model)?;
            let bytes = std::fs::read(&input)?;
            let (frames, header) = decode_sequence(&mut model, &bytes)?;
            std::fs::create_dir_all(&out)?;
            for (i, f) in frames.iter().enumerate() {
                let name = format_frame_name(DEFAULT_FRAME_PATTERN, i)?;
                save_frame(&out.join(name), f)?;
            }
            write_manifest(
                &out,
                &Manifest {
                    width: header.orig_width as usize,
                    height: header.orig_height as usize,
                    count: frames.len(),
                    gop: header.gop,
                    pattern: DEFAULT_FRAME_PATTERN.to_string(),
                    start: 0,
                },
            )?;
            eprintln!("decoded {} frames -> {}", frames.len(), out.display());
        }
        Command::Train {
            data,
            lambda,
            metric,
            seed,
            out,
            init,
            max_steps,
            window,
            lr,
            crop,
            clip_len,
            log_csv,
        } => {
            let metric: DistortionMetric = metric.parse()?;
            if max_steps.len() != 4 {
                return Err(Error::InvalidInput(format!(
                    "--max-steps needs 4 comma-separated values, got {}",
                    max_steps.len()
                )));
            }
            let mut model = match &init {
                Some(path) => {
                    let mut m = load_checkpoint(path)?;
                    m.lambda = lambda;
                    m.metric = metric;
                    m
                }
                None => CodecModel::new(lambda, metric, seed),
            };
            let mut sampler = DatasetSampler::new(&data, clip_len, crop, seed)?;
            let cfg = TrainConfig {
                max_steps: [max_steps[0], max_steps[1], max_steps[2], max_steps[3]],
                window,
                lr,
                seed,
                start_stage: if init.is_some() {
                    Stage::Full
                } else {
                    Stage::MotionEstimation
                },
                log_csv,
                checkpoint_dir: out.parent().map(Path::to_path_buf),
                ..TrainConfig::default()
            };
            let report = train(&mut model, &mut sampler, &cfg)?;
            save_checkpoint(&out, &mut model)?;
            let last = report.history.last();
            eprintln!(
                "trained {} steps (per stage: {:?}), final loss {:.6}, checkpoint -> {}",
                report.history.len(),
                report.steps_per_stage,
                last.map_or(f64::NAN, |r| r.stats.loss),
                out.display()
            );
        }
        Command::Evaluate {
            input,
            model,
            gop,
            iframe,
            pad,
            sequence,
            out,
        } => {
            let codec = codec_by_name(&iframe)?;
            let mut model = load_checkpoint(&model)?;
            let (frames, manifest_gop) = load_input(&input)?;
            let gop = gop.unwrap_or(manifest_gop);
            let name = sequence.unwrap_or_else(|| {
                input
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "sequence".to_string())
            });
            let outcome = evaluate(&mut model, &frames, gop, codec.as_ref(), policy(pad), &name)?;
            let csv = rd_csv(std::slice::from_ref(&outcome.point));
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Curves {
            csvs,
            out_table,
            out_svg,
        } => {
            let mut points: Vec<RdPoint> = Vec::new();
            for path in &csvs {
                points.extend(read_rd_csv(path)?);
            }
            if points.is_empty() {
                return Err(Error::InvalidInput("no RD points in the given CSVs".into()));
            }
            let table = rd_table(&points);
            print!("{table}");
            if let Some(path) = out_table {
                std::fs::write(path, &table)?;
            }
            if let Some(path) = out_svg {
                std::fs::write(path, rd_svg(&points))?;
            }
        }
        Command::Synth {
            out,
            width,
            height,
            frames,
            shift,
            waves,
            seed,
            gop,
        } => {
            let (dx, dy) = shift
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("bad --shift '{shift}', expected dx,dy"))
                })?;
            let spec = SyntheticSpec {
                width,
                height,
                frames,
                shift: (dx, dy),
                waves,
                seed,
            };
            write_synthetic_sequence(&out, &spec, gop)?;
            eprintln!("wrote {frames} frames ({width}x{height}) -> {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code() as i32);
    }
}
