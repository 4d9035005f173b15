//! Release acceptance gate.
//!
//! One test runs every numbered release criterion and prints a PASS/FAIL
//! line per criterion (visible with `--nocapture`, or on failure). All
//! criteria execute before the final assert so one failure never hides
//! the status of the rest.
//!
//! The training criteria run deliberately small schedules: per-step cost
//! on a single CPU core is roughly 0.45 s for motion estimation, 0.47 s
//! for the motion stage, 0.8 s for compensation, and 1.0 s for the full
//! objective at 64x64. All training shares one 150-step motion-estimation
//! stage (it is lambda-independent), then the canonical lambda-1024 model
//! used by the schedule and fine-tune criteria runs 50/50/60, short
//! enough to leave the fine-tune real MS-SSIM headroom, while the rate
//! sweep trains each lambda 50/50/240 because its monotonicity claim is
//! about settled operating points, not mid-descent snapshots.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array3, ArrayD, ArrayViewMutD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use odvc_core::bottleneck::{
    build_cdf_tables, decode_latent, dequantize, encode_latent, likelihood_var, quantize_round,
    rate_bits, FactorizedPrior, PriorVars,
};
use odvc_core::checkpoint::{checkpoint_bytes, model_from_bytes};
use odvc_core::codec::{decode_sequence, encode_sequence, CodecModel, DistortionMetric};
use odvc_core::error::Error;
use odvc_core::eval::evaluate;
use odvc_core::flow::FlowNet;
use odvc_core::frames::{
    crop_to_original, quantize_to_8bit, synthetic_clip, DimensionPolicy, Frame, MemoryClipStream,
    SyntheticSpec,
};
use odvc_core::iframe::LosslessPng;
use odvc_core::metrics::{msssim, psnr};
use odvc_core::motion_comp::McNet;
use odvc_core::nn::tape::{Tape, Var};
use odvc_core::nn::warp::warp_fwd;
use odvc_core::params::{join, HasParams, ParamFn, VarTable};
use odvc_core::range_coder::{RangeDecoder, RangeEncoder, PROB_TOTAL};
use odvc_core::training::{train, warp_mse, Stage, TrainConfig};
use odvc_core::transforms::{AnalysisTransform, SynthesisTransform, LATENT_CHANNELS, LATENT_STRIDE};

struct Check {
    n: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn criterion_name(n: usize) -> &'static str {
    match n {
        1 => "entropy coding exactness",
        2 => "rate estimate fidelity",
        3 => "gradients vs central differences",
        4 => "tensor shape chain",
        5 => "codec determinism",
        6 => "progressive training on the bundled clip",
        7 => "rate-distortion monotonicity",
        8 => "ms-ssim fine-tune",
        9 => "resolution contract",
        10 => "metric sanity",
        _ => unreachable!(),
    }
}

fn panic_text(e: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = e.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = e.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

fn check_line(c: &Check) -> String {
    let tag = if c.pass { "PASS" } else { "FAIL" };
    format!("criterion {:>2}: {} - {} ({})", c.n, tag, c.name, c.detail)
}

fn run_check(n: usize, f: impl FnOnce() -> (bool, String)) -> Check {
    let c = match catch_unwind(AssertUnwindSafe(f)) {
        Ok((pass, detail)) => Check {
            n,
            name: criterion_name(n),
            pass,
            detail,
        },
        Err(e) => Check {
            n,
            name: criterion_name(n),
            pass: false,
            detail: format!("panicked: {}", panic_text(&*e)),
        },
    };
    // Progress feed for long runs; the sorted summary prints at the end.
    eprintln!("{}", check_line(&c));
    c
}

fn bits_equal(a: &Frame, b: &Frame) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Criterion 1: every random latent tensor range-decodes back bit-exactly.

fn c1_entropy_exactness() -> (bool, String) {
    let start = Instant::now();
    let prior = FactorizedPrior::<f32>::new(8, 3);
    let tables = build_cdf_tables(&prior).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    // Span cycle covers in-support values, near misses, and deep escapes.
    let spans = [1i32, 4, 60, 4000];
    for k in 0..1000usize {
        let h = rng.random_range(1..=8usize);
        let w = rng.random_range(1..=8usize);
        let s = spans[k % spans.len()];
        let q = Array3::from_shape_fn((8, h, w), |_| rng.random_range(-s..=s));
        let mut enc = RangeEncoder::new();
        encode_latent(&q, &tables, &mut enc);
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        let back = decode_latent((8, h, w), &tables, &mut dec).unwrap();
        if back != q {
            return (false, format!("tensor {k} did not round-trip"));
        }
    }
    let dt = start.elapsed().as_secs_f64();
    (
        dt < 60.0,
        format!("1000 tensors round-tripped in {dt:.2}s (limit 60s)"),
    )
}

// ---------------------------------------------------------------------------
// Criterion 2: coded size tracks the model's own rate estimate.

fn c2_rate_fidelity() -> (bool, String) {
    // Train a small factorized prior on spread two-sided data so each
    // channel settles at a few bits per symbol; at that rate the coder's
    // flush overhead is far below the tolerance.
    let channels = 8usize;
    let (lh, lw) = (24usize, 24usize);
    let mut prior = FactorizedPrior::<f32>::new(channels, 77);
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let scales: Vec<f64> = (0..channels).map(|c| 0.8 * 1.32f64.powi(c as i32)).collect();

    let mut m_state: Vec<ArrayD<f32>> = Vec::new();
    let mut v_state: Vec<ArrayD<f32>> = Vec::new();
    prior.for_each_param("", &mut |_n: &str, view: ArrayViewMutD<'_, f32>| {
        m_state.push(ArrayD::zeros(view.raw_dim()));
        v_state.push(ArrayD::zeros(view.raw_dim()));
    });
    let (b1, b2) = (0.9f64, 0.999f64);
    for t in 1..=250i32 {
        let tape = Tape::<f32>::new();
        let table = VarTable::from_model(&tape, &mut prior);
        let pv = PriorVars::from_table(&table, "");
        let data = ArrayD::from_shape_fn(IxDyn(&[channels, lh, lw]), |ix| {
            let u: f64 = rng.random::<f64>() - 0.5;
            let lap = -scales[ix[0]] * u.signum() * (1.0 - 2.0 * u.abs()).ln();
            (lap + rng.random::<f64>() - 0.5) as f32
        });
        let y = tape.input(data);
        let n_sym = (channels * lh * lw) as f64;
        let loss = likelihood_var(&y, &pv)
            .ln()
            .sum()
            .scale(-1.0 / (std::f64::consts::LN_2 * n_sym));
        let mut grads = tape.backward(&loss);
        let vars: Vec<Var<f32>> = table.iter().map(|(_, v)| v.clone()).collect();
        let alpha = (1e-3 * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t))) as f32;
        let eps = (1e-8 * (1.0 - b2.powi(t)).sqrt()) as f32;
        let mut i = 0usize;
        prior.for_each_param("", &mut |_n: &str, mut view: ArrayViewMutD<'_, f32>| {
            if let Some(g) = grads.take(&vars[i]) {
                ndarray::Zip::from(&mut view)
                    .and(&mut m_state[i])
                    .and(&mut v_state[i])
                    .and(&g)
                    .for_each(|p, m, v, &g| {
                        *m = 0.9 * *m + 0.1 * g;
                        *v = 0.999 * *v + 0.001 * g * g;
                        *p -= alpha * *m / (v.sqrt() + eps);
                    });
            }
            i += 1;
        });
    }

    let set = build_cdf_tables(&prior).unwrap();
    let mut worst = 0.0f64;
    let mut min_est = f64::INFINITY;
    let mut failures = 0usize;
    for _ in 0..20 {
        // Draw symbols from the frozen tables themselves; escape slots are
        // table artifacts, not sampleable values, so they are redrawn.
        let q = Array3::from_shape_fn((channels, lh, lw), |(c, _, _)| {
            let tbl = &set.tables[c];
            loop {
                let u = rng.random_range(0..PROB_TOTAL);
                let s = tbl.cdf.partition_point(|&cv| cv <= u) - 1;
                if s < tbl.support_len() {
                    break tbl.min_sym + s as i32;
                }
            }
        });
        let est = rate_bits(prior.likelihood(dequantize::<f32>(&q).view()).view());
        let mut enc = RangeEncoder::new();
        encode_latent(&q, &set, &mut enc);
        let actual = (enc.finish().len() * 8) as f64;
        let rel = (actual - est).abs() / est;
        worst = worst.max(rel);
        min_est = min_est.min(est);
        if rel > 0.05 {
            failures += 1;
        }
    }
    (
        failures == 0,
        format!(
            "20 trials x {} symbols, worst |actual-estimate| {:.2}% of estimate (limit 5%), estimates >= {:.0} bits",
            channels * lh * lw,
            worst * 100.0,
            min_est
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 3: analytic gradients against central finite differences in f64.

/// Latent width of the reduced f64 pipeline used for derivative checks.
const FD_WIDTH: usize = 8;

struct SmallCodec {
    flow: FlowNet<f64>,
    mv_analysis: AnalysisTransform<f64>,
    mv_synthesis: SynthesisTransform<f64>,
    res_analysis: AnalysisTransform<f64>,
    res_synthesis: SynthesisTransform<f64>,
    mc: McNet<f64>,
    prior_m: FactorizedPrior<f64>,
    prior_y: FactorizedPrior<f64>,
}

impl SmallCodec {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        SmallCodec {
            flow: FlowNet::new(&mut rng),
            mv_analysis: AnalysisTransform::with_width(2, 3, FD_WIDTH, &mut rng),
            mv_synthesis: SynthesisTransform::with_width(2, 3, FD_WIDTH, &mut rng),
            res_analysis: AnalysisTransform::with_width(3, 5, FD_WIDTH, &mut rng),
            res_synthesis: SynthesisTransform::with_width(3, 5, FD_WIDTH, &mut rng),
            mc: McNet::new(&mut rng),
            prior_m: FactorizedPrior::new(FD_WIDTH, 31),
            prior_y: FactorizedPrior::new(FD_WIDTH, 32),
        }
    }
}

impl HasParams<f64> for SmallCodec {
    fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<'_, f64>) {
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

/// A fixed (reference, target) pair plus frozen quantization noise, so the
/// loss is a deterministic function of the parameters alone.
struct FdCase {
    codec: SmallCodec,
    reference: Array3<f64>,
    target: Array3<f64>,
    noise_m: ArrayD<f64>,
    noise_y: ArrayD<f64>,
}

impl FdCase {
    fn new() -> Self {
        let clip = synthetic_clip(&SyntheticSpec {
            width: 16,
            height: 16,
            frames: 2,
            shift: (1.3, 0.7),
            waves: 5,
            seed: 17,
        });
        let mut rng = ChaCha20Rng::seed_from_u64(304);
        FdCase {
            codec: SmallCodec::new(30),
            reference: clip[0].mapv(f64::from),
            target: clip[1].mapv(f64::from),
            noise_m: ArrayD::from_shape_fn(IxDyn(&[FD_WIDTH, 1, 1]), |_| rng.random::<f64>() - 0.5),
            noise_y: ArrayD::from_shape_fn(IxDyn(&[FD_WIDTH, 1, 1]), |_| rng.random::<f64>() - 0.5),
        }
    }

    /// Mirror of the per-stage training objective (MSE distortion).
    fn loss(&mut self, stage: Stage) -> (Tape<f64>, VarTable<f64>, Var<f64>) {
        let tape = Tape::<f64>::new();
        let table = VarTable::from_model(&tape, &mut self.codec);
        let (_, h, w) = self.target.dim();
        let pixels = h * w;
        let lambda = 256.0;
        let refv = tape.input(self.reference.clone().into_dyn());
        let tgtv = tape.input(self.target.clone().into_dyn());
        let flow = self.codec.flow.estimate_var(&refv, &tgtv, &table, "flow");
        let loss = if stage == Stage::MotionEstimation {
            mse64(&tgtv, &refv.warp(&flow))
        } else {
            let m = self
                .codec
                .mv_analysis
                .forward_var(&flow, &table, "mv_analysis");
            let m_tilde = m.add(&tape.input(self.noise_m.clone()));
            let pm = PriorVars::from_table(&table, "prior_m");
            let rate_m = rate64(&likelihood_var(&m_tilde, &pm), pixels);
            let flow_hat = self
                .codec
                .mv_synthesis
                .forward_var(&m_tilde, &table, "mv_synthesis");
            let warped = refv.warp(&flow_hat);
            let prediction = match stage {
                Stage::Motion => warped,
                _ => self
                    .codec
                    .mc
                    .predict_var(&refv, &warped, &flow_hat, &table, "mc"),
            };
            if stage != Stage::Full {
                mse64(&tgtv, &prediction).scale(lambda).add(&rate_m)
            } else {
                let residual = tgtv.sub(&prediction);
                let y = self
                    .codec
                    .res_analysis
                    .forward_var(&residual, &table, "res_analysis");
                let y_tilde = y.add(&tape.input(self.noise_y.clone()));
                let py = PriorVars::from_table(&table, "prior_y");
                let rate_y = rate64(&likelihood_var(&y_tilde, &py), pixels);
                let r_hat = self
                    .codec
                    .res_synthesis
                    .forward_var(&y_tilde, &table, "res_synthesis");
                let recon = prediction.add(&r_hat);
                mse64(&tgtv, &recon).scale(lambda).add(&rate_m).add(&rate_y)
            }
        };
        (tape, table, loss)
    }
}

fn mse64(a: &Var<f64>, b: &Var<f64>) -> Var<f64> {
    let d = a.sub(b);
    d.mul(&d).mean()
}

fn rate64(p: &Var<f64>, pixels: usize) -> Var<f64> {
    p.ln()
        .sum()
        .scale(-1.0 / (std::f64::consts::LN_2 * pixels as f64))
}

/// Gradient floor below which a coordinate is numerically uninformative:
/// central differences on an O(10) loss carry ~1e-9 absolute noise, so
/// relative comparison is only meaningful above this scale.
const FD_FLOOR: f64 = 1e-5;

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Check `d loss/d inputs[i]` for a standalone op graph built by `build`.
fn fd_check(
    inputs: &mut [ArrayD<f64>],
    build: &dyn Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
    rng: &mut ChaCha20Rng,
    points: usize,
) -> (usize, f64) {
    let eval = |arrs: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var<f64>> = arrs.iter().map(|a| tape.param(a.clone())).collect();
        build(&tape, &vars).scalar()
    };
    let grads: Vec<Option<ArrayD<f64>>> = {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var<f64>> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let loss = build(&tape, &vars);
        let mut gs = tape.backward(&loss);
        vars.iter().map(|v| gs.take(v)).collect()
    };
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut attempts = 0usize;
    while checked < points && attempts < 40 * points {
        attempts += 1;
        let i = rng.random_range(0..inputs.len());
        let k = rng.random_range(0..inputs[i].len());
        let g = match &grads[i] {
            Some(a) => a.iter().nth(k).copied().unwrap(),
            None => continue,
        };
        let x0 = inputs[i].iter().nth(k).copied().unwrap();
        let h = fd_step(x0);
        *inputs[i].iter_mut().nth(k).unwrap() = x0 + h;
        let fp = eval(inputs);
        *inputs[i].iter_mut().nth(k).unwrap() = x0 - h;
        let fm = eval(inputs);
        *inputs[i].iter_mut().nth(k).unwrap() = x0;
        let fd = (fp - fm) / (2.0 * h);
        if fd.abs().max(g.abs()) < FD_FLOOR {
            continue;
        }
        let rel = (fd - g).abs() / fd.abs().max(g.abs());
        worst = worst.max(rel);
        checked += 1;
    }
    (checked, worst)
}

/// Read, and optionally overwrite, one parameter entry by name + flat index.
fn param_at(codec: &mut SmallCodec, name: &str, k: usize, set: Option<f64>) -> f64 {
    let mut out = f64::NAN;
    codec.for_each_param("", &mut |n: &str, mut view: ArrayViewMutD<'_, f64>| {
        if n == name {
            let slot = view.iter_mut().nth(k).unwrap();
            out = *slot;
            if let Some(v) = set {
                *slot = v;
            }
        }
    });
    out
}

fn fd_loss_check(
    case: &mut FdCase,
    stage: Stage,
    prefixes: &[&str],
    rng: &mut ChaCha20Rng,
) -> (usize, f64) {
    let mut names: Vec<(String, usize)> = Vec::new();
    case.codec
        .for_each_param("", &mut |n: &str, view: ArrayViewMutD<'_, f64>| {
            if prefixes.iter().any(|p| n.starts_with(p)) {
                names.push((n.to_string(), view.len()));
            }
        });
    let mut gmap: HashMap<String, ArrayD<f64>> = HashMap::new();
    {
        let (tape, table, loss) = case.loss(stage);
        let mut grads = tape.backward(&loss);
        for (n, _) in &names {
            if let Some(g) = grads.take(table.get(n)) {
                gmap.insert(n.clone(), g);
            }
        }
    }
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut attempts = 0usize;
    while checked < 12 && attempts < 240 {
        attempts += 1;
        let (name, len) = {
            let (n, l) = &names[rng.random_range(0..names.len())];
            (n.clone(), *l)
        };
        let k = rng.random_range(0..len);
        let g = match gmap.get(&name) {
            Some(a) => a.iter().nth(k).copied().unwrap(),
            None => continue,
        };
        let x0 = param_at(&mut case.codec, &name, k, None);
        let h = fd_step(x0);
        param_at(&mut case.codec, &name, k, Some(x0 + h));
        let fp = case.loss(stage).2.scalar();
        param_at(&mut case.codec, &name, k, Some(x0 - h));
        let fm = case.loss(stage).2.scalar();
        param_at(&mut case.codec, &name, k, Some(x0));
        let fd = (fp - fm) / (2.0 * h);
        if fd.abs().max(g.abs()) < FD_FLOOR {
            continue;
        }
        let rel = (fd - g).abs() / fd.abs().max(g.abs());
        worst = worst.max(rel);
        checked += 1;
    }
    (checked, worst)
}

fn c3_gradient_suite() -> (bool, String) {
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let mut parts: Vec<String> = Vec::new();
    let mut all_ok = true;
    let add = |parts: &mut Vec<String>, all_ok: &mut bool, label: &str, r: (usize, f64)| {
        let (n, worst) = r;
        if n < 10 || !(worst < 1e-4) {
            *all_ok = false;
        }
        parts.push(format!("{label} {n}pts {worst:.1e}"));
    };

    for inverse in [false, true] {
        let c = 4usize;
        let mut arrays = vec![
            ArrayD::from_shape_fn(IxDyn(&[c, 6, 6]), |_| rng.random::<f64>() * 2.0 - 1.0),
            ArrayD::from_shape_fn(IxDyn(&[c]), |_| 0.6 + rng.random::<f64>() * 0.8),
            ArrayD::from_shape_fn(IxDyn(&[c, c]), |_| rng.random::<f64>() * 0.3 - 0.15),
        ];
        // A random projection makes every output coordinate contribute.
        let wsum = ArrayD::from_shape_fn(IxDyn(&[c, 6, 6]), |_| rng.random::<f64>() * 2.0 - 1.0);
        let build = move |tape: &Tape<f64>, vars: &[Var<f64>]| -> Var<f64> {
            vars[0]
                .gdn(&vars[1], &vars[2], inverse)
                .mul(&tape.input(wsum.clone()))
                .sum()
        };
        let r = fd_check(&mut arrays, &build, &mut rng, 12);
        add(&mut parts, &mut all_ok, if inverse { "igdn" } else { "gdn" }, r);
    }

    {
        let mut arrays = vec![
            ArrayD::from_shape_fn(IxDyn(&[3, 8, 8]), |_| rng.random::<f64>()),
            // Offsets keep sample positions away from integer lattice kinks.
            ArrayD::from_shape_fn(IxDyn(&[2, 8, 8]), |_| rng.random::<f64>() * 3.0 - 1.2),
        ];
        let wsum = ArrayD::from_shape_fn(IxDyn(&[3, 8, 8]), |_| rng.random::<f64>() * 2.0 - 1.0);
        let build = move |tape: &Tape<f64>, vars: &[Var<f64>]| -> Var<f64> {
            vars[0].warp(&vars[1]).mul(&tape.input(wsum.clone())).sum()
        };
        let r = fd_check(&mut arrays, &build, &mut rng, 12);
        add(&mut parts, &mut all_ok, "warp", r);
    }

    {
        let prior = FactorizedPrior::<f64>::new(4, 35);
        let mut arrays: Vec<ArrayD<f64>> = vec![ArrayD::from_shape_fn(IxDyn(&[4, 5, 5]), |_| {
            rng.random::<f64>() * 6.0 - 2.75
        })];
        arrays.push(prior.h1.clone().into_dyn());
        arrays.push(prior.b1.clone().into_dyn());
        arrays.push(prior.a1.clone().into_dyn());
        arrays.push(prior.h2.clone().into_dyn());
        arrays.push(prior.b2.clone().into_dyn());
        arrays.push(prior.a2.clone().into_dyn());
        arrays.push(prior.h3.clone().into_dyn());
        arrays.push(prior.b3.clone().into_dyn());
        arrays.push(prior.a3.clone().into_dyn());
        arrays.push(prior.h4.clone().into_dyn());
        arrays.push(prior.b4.clone().into_dyn());
        arrays.push(prior.a4.clone().into_dyn());
        let build = |_tape: &Tape<f64>, vars: &[Var<f64>]| -> Var<f64> {
            let pv = PriorVars {
                h1: vars[1].clone(),
                b1: vars[2].clone(),
                a1: vars[3].clone(),
                h2: vars[4].clone(),
                b2: vars[5].clone(),
                a2: vars[6].clone(),
                h3: vars[7].clone(),
                b3: vars[8].clone(),
                a3: vars[9].clone(),
                h4: vars[10].clone(),
                b4: vars[11].clone(),
                a4: vars[12].clone(),
            };
            likelihood_var(&vars[0], &pv).ln().sum().scale(-1.0)
        };
        let r = fd_check(&mut arrays, &build, &mut rng, 12);
        add(&mut parts, &mut all_ok, "likelihood", r);
    }

    let mut case = FdCase::new();
    let stages: [(Stage, &str, &[&str]); 4] = [
        (Stage::MotionEstimation, "loss-me", &["flow."]),
        (
            Stage::Motion,
            "loss-motion",
            &["flow.", "mv_analysis.", "mv_synthesis.", "prior_m."],
        ),
        (
            Stage::Compensation,
            "loss-mc",
            &["flow.", "mv_analysis.", "mv_synthesis.", "prior_m.", "mc."],
        ),
        (
            Stage::Full,
            "loss-full",
            &[
                "flow.",
                "mv_analysis.",
                "mv_synthesis.",
                "prior_m.",
                "mc.",
                "res_analysis.",
                "res_synthesis.",
                "prior_y.",
            ],
        ),
    ];
    for (stage, label, prefixes) in stages {
        let r = fd_loss_check(&mut case, stage, prefixes, &mut rng);
        add(&mut parts, &mut all_ok, label, r);
    }

    (all_ok, parts.join(", "))
}

// ---------------------------------------------------------------------------
// Criterion 4: every intermediate shape of the coding chain.

fn c4_shape_chain() -> (bool, String) {
    let model = CodecModel::new(512.0, DistortionMetric::Mse, 9);
    let tables = model.tables().unwrap();
    let mut bad: Vec<String> = Vec::new();
    for (w, h) in [(64usize, 64usize), (256usize, 192usize)] {
        let clip = synthetic_clip(&SyntheticSpec {
            width: w,
            height: h,
            frames: 2,
            shift: (1.0, 2.0),
            waves: 7,
            seed: 33,
        });
        let (r, t) = (&clip[0], &clip[1]);
        let (lh, lw) = (h / LATENT_STRIDE, w / LATENT_STRIDE);
        let mut chk = |what: &str, got: (usize, usize, usize), want: (usize, usize, usize)| {
            if got != want {
                bad.push(format!("{w}x{h} {what}: {got:?} != {want:?}"));
            }
        };

        let v = model.flow.estimate(r.view(), t.view());
        chk("flow", v.dim(), (2, h, w));
        let m = model.mv_analysis.forward(v.view());
        chk("motion latent", m.dim(), (LATENT_CHANNELS, lh, lw));
        let m_q = quantize_round(m.view());
        chk("quantized motion latent", m_q.dim(), (LATENT_CHANNELS, lh, lw));
        let v_hat = model.mv_synthesis.forward(dequantize::<f32>(&m_q).view());
        chk("decoded flow", v_hat.dim(), (2, h, w));
        let warped = warp_fwd(r.view(), v_hat.view());
        chk("warped reference", warped.dim(), (3, h, w));
        let x_bar = model.mc.predict(r.view(), warped.view(), v_hat.view());
        chk("prediction", x_bar.dim(), (3, h, w));
        let residual = t - &x_bar;
        chk("residual", residual.dim(), (3, h, w));
        let y = model.res_analysis.forward(residual.view());
        chk("residual latent", y.dim(), (LATENT_CHANNELS, lh, lw));
        let y_q = quantize_round(y.view());
        chk("quantized residual latent", y_q.dim(), (LATENT_CHANNELS, lh, lw));
        let r_hat = model.res_synthesis.forward(dequantize::<f32>(&y_q).view());
        chk("decoded residual", r_hat.dim(), (3, h, w));

        let (mv_bytes, res_bytes, recon) = model.encode_pframe(r, t, &tables).unwrap();
        chk("encoder reconstruction", recon.dim(), (3, h, w));
        let dec = model.decode_pframe(r, &mv_bytes, &res_bytes, &tables).unwrap();
        chk("decoder reconstruction", dec.dim(), (3, h, w));
    }
    if bad.is_empty() {
        (
            true,
            format!(
                "all shapes verified at 64x64 and 256x192 (latents {}x(h/{})x(w/{}))",
                LATENT_CHANNELS, LATENT_STRIDE, LATENT_STRIDE
            ),
        )
    } else {
        (false, bad.join("; "))
    }
}

// ---------------------------------------------------------------------------
// Criterion 5: decoder matches the encoder bit for bit; bitstreams are stable.

fn c5_determinism() -> (bool, String) {
    let mut mismatches = 0usize;
    let mut reencode_diffs = 0usize;
    for trial in 0..50u64 {
        let mut model = CodecModel::new(512.0, DistortionMetric::Mse, 1000 + trial);
        let mut rng = ChaCha20Rng::seed_from_u64(2000 + trial);
        let mut rand_frame = || Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f32>());
        let reference = rand_frame();
        let target = rand_frame();
        let extra = rand_frame();
        let tables = model.tables().unwrap();
        let (mv, res, recon) = model.encode_pframe(&reference, &target, &tables).unwrap();
        let dec = model.decode_pframe(&reference, &mv, &res, &tables).unwrap();
        if !bits_equal(&dec, &recon) {
            mismatches += 1;
            continue;
        }
        if trial % 10 == 0 {
            let frames = vec![reference, target, extra];
            let e1 =
                encode_sequence(&mut model, &frames, 2, &LosslessPng, DimensionPolicy::Reject)
                    .unwrap();
            let e2 =
                encode_sequence(&mut model, &frames, 2, &LosslessPng, DimensionPolicy::Reject)
                    .unwrap();
            if e1.bytes != e2.bytes {
                reencode_diffs += 1;
            }
        }
    }
    (
        mismatches == 0 && reencode_diffs == 0,
        format!(
            "50 random-model trials: {} decoder mismatches, {} re-encode differences",
            mismatches, reencode_diffs
        ),
    )
}

// ---------------------------------------------------------------------------
// Criteria 6, 7, 8: progressive training, the lambda sweep, ms-ssim tuning.

fn shared_cfg() -> TrainConfig {
    TrainConfig {
        max_steps: [150, 0, 0, 0],
        window: 40,
        rel_improvement: 1e-3,
        lr: 1e-4,
        seed: 11,
        start_stage: Stage::MotionEstimation,
        log_csv: None,
        checkpoint_dir: None,
    }
}

fn training_criteria_impl() -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    let push = |out: &mut Vec<Check>, c: Check| {
        eprintln!("{}", check_line(&c));
        out.push(c);
    };
    let clip = synthetic_clip(&SyntheticSpec::default());
    let fail_rest = |out: &mut Vec<Check>, from: usize, why: &str| {
        for n in from..=8 {
            push(
                out,
                Check {
                    n,
                    name: criterion_name(n),
                    pass: false,
                    detail: format!("skipped: {why}"),
                },
            );
        }
    };

    // Criterion 6: the progressive schedule at lambda 1024.
    let t6 = Instant::now();
    let mut model = CodecModel::new(1024.0, DistortionMetric::Mse, 0);
    let mut stream = MemoryClipStream::new(vec![clip.clone()]);
    let me_cfg = shared_cfg();
    if let Err(e) = train(&mut model, &mut stream, &me_cfg) {
        fail_rest(&mut out, 6, &format!("motion-estimation training failed: {e}"));
        return out;
    }
    let (warped_mse_me, zero_mse) = warp_mse(&model, &clip[0], &clip[1]);
    let me_snapshot = checkpoint_bytes(&mut model);

    let rest_cfg = TrainConfig {
        max_steps: [0, 50, 50, 60],
        start_stage: Stage::Motion,
        seed: 12,
        ..shared_cfg()
    };
    let full_report = match train(&mut model, &mut stream, &rest_cfg) {
        Ok(r) => r,
        Err(e) => {
            fail_rest(&mut out, 6, &format!("training failed: {e}"));
            return out;
        }
    };
    let outcome = match evaluate(
        &mut model,
        &clip,
        2,
        &LosslessPng,
        DimensionPolicy::Reject,
        "bundled",
    ) {
        Ok(o) => o,
        Err(e) => {
            fail_rest(&mut out, 6, &format!("evaluation failed: {e}"));
            return out;
        }
    };
    let t6_secs = t6.elapsed().as_secs_f64();

    let a_ok = warped_mse_me < 0.25 * zero_mse;
    let (warped_mse_final, _) = warp_mse(&model, &clip[0], &clip[1]);
    let warped_psnr = -10.0 * warped_mse_final.log10();
    let p_psnr = outcome.frames[1].psnr_db;
    let b_ok = p_psnr > 30.0 && p_psnr > warped_psnr;
    let full_losses: Vec<f64> = full_report
        .history
        .iter()
        .filter(|r| r.stage == Stage::Full)
        .map(|r| r.stats.loss)
        .collect();
    let q = full_losses.len() / 4;
    let (first_win, last_win) = if q >= 1 {
        (
            mean(&full_losses[..q]),
            mean(&full_losses[full_losses.len() - q..]),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    let c_ok = q >= 1 && last_win < first_win;
    let time_ok = t6_secs < 900.0;
    push(&mut out, Check {
        n: 6,
        name: criterion_name(6),
        pass: a_ok && b_ok && c_ok && time_ok,
        detail: format!(
            "warp mse {:.2e} vs 25% of zero-motion {:.2e}; p-frame psnr {:.2} dB (floor 30, warped {:.2}); final-stage loss {:.3} -> {:.3}; {:.0}s of 900s",
            warped_mse_me,
            0.25 * zero_mse,
            p_psnr,
            warped_psnr,
            first_win,
            last_win,
            t6_secs
        ),
    });

    // Criterion 7: lambda sweep re-using the lambda-independent first stage.
    // The sweep asks for overfit operating points, so its branches train a
    // longer final stage than the canonical model: below roughly 150 full
    // steps the branches have not separated and their ordering is descent
    // noise rather than rate-distortion structure. All four lambdas train
    // the same schedule from the same motion-estimation snapshot. Four
    // operating points give three adjacent pairs; the tolerance of one
    // non-monotone pair carries over, so at least two must be monotone.
    let sweep_cfg = TrainConfig {
        max_steps: [0, 50, 50, 240],
        start_stage: Stage::Motion,
        seed: 12,
        ..shared_cfg()
    };
    let lambdas = [256.0f32, 512.0, 1024.0, 2048.0];
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut sweep_err: Option<String> = None;
    for &l in &lambdas {
        let r = (|| -> Result<(f64, f64), Error> {
            let mut m = model_from_bytes(&me_snapshot)?;
            m.lambda = l;
            let mut stream = MemoryClipStream::new(vec![clip.clone()]);
            train(&mut m, &mut stream, &sweep_cfg)?;
            let o = evaluate(
                &mut m,
                &clip,
                2,
                &LosslessPng,
                DimensionPolicy::Reject,
                "bundled",
            )?;
            Ok((o.point.bpp, o.frames[1].psnr_db))
        })();
        match r {
            Ok(p) => points.push(p),
            Err(e) => {
                sweep_err = Some(format!("lambda {l}: {e}"));
                break;
            }
        }
    }
    match sweep_err {
        Some(why) => push(&mut out, Check {
            n: 7,
            name: criterion_name(7),
            pass: false,
            detail: why,
        }),
        None => {
            let mut good_pairs = 0usize;
            for i in 0..points.len() - 1 {
                // PSNR non-decreasing in lambda is MSE non-increasing.
                if points[i + 1].0 >= points[i].0 && points[i + 1].1 >= points[i].1 {
                    good_pairs += 1;
                }
            }
            let bpps: Vec<String> = points.iter().map(|p| format!("{:.4}", p.0)).collect();
            let psnrs: Vec<String> = points.iter().map(|p| format!("{:.2}", p.1)).collect();
            push(&mut out, Check {
                n: 7,
                name: criterion_name(7),
                pass: good_pairs >= 2,
                detail: format!(
                    "bpp [{}], p-frame psnr [{}] over lambda {:?}; {} of 3 adjacent pairs monotone (need 2)",
                    bpps.join(", "),
                    psnrs.join(", "),
                    [256, 512, 1024, 2048],
                    good_pairs
                ),
            });
        }
    }

    // Criterion 8: ms-ssim fine-tune from the lambda-1024 model. The gain
    // is judged on the clip-level ms-ssim reported by evaluate, the same
    // number the rate-distortion tooling reports. Training runs in rounds
    // with a measurement after each so the pass records how many of the
    // 2000 budgeted steps were actually needed; a stalled score ends the
    // attempt early rather than burning the whole budget.
    let base_ms = outcome.point.msssim;
    let mut ft = match model_from_bytes(&checkpoint_bytes(&mut model)) {
        Ok(m) => m,
        Err(e) => {
            push(&mut out, Check {
                n: 8,
                name: criterion_name(8),
                pass: false,
                detail: format!("clone failed: {e}"),
            });
            return out;
        }
    };
    ft.lambda = 32.0;
    ft.metric = DistortionMetric::MsSsim;
    let mut best = base_ms;
    let mut steps_used = 0usize;
    let mut stalled = 0usize;
    let mut reached: Option<usize> = None;
    let mut tune_err: Option<String> = None;
    for round in 0..10u64 {
        let cfg = TrainConfig {
            max_steps: [0, 0, 0, 200],
            start_stage: Stage::Full,
            seed: 50 + round,
            ..shared_cfg()
        };
        let mut stream = MemoryClipStream::new(vec![clip.clone()]);
        let report = match train(&mut ft, &mut stream, &cfg) {
            Ok(r) => r,
            Err(e) => {
                tune_err = Some(e.to_string());
                break;
            }
        };
        steps_used += report.steps_per_stage[Stage::Full.index()];
        match evaluate(
            &mut ft,
            &clip,
            2,
            &LosslessPng,
            DimensionPolicy::Reject,
            "bundled",
        ) {
            Ok(o) => {
                let ms = o.point.msssim;
                if ms > best + 1e-6 {
                    best = ms;
                    stalled = 0;
                } else {
                    stalled += 1;
                }
                if ms - base_ms >= 0.001 {
                    reached = Some(steps_used);
                    break;
                }
                if stalled >= 2 && round >= 2 {
                    break;
                }
            }
            Err(e) => {
                tune_err = Some(e.to_string());
                break;
            }
        }
    }
    push(&mut out, Check {
        n: 8,
        name: criterion_name(8),
        pass: reached.is_some(),
        detail: match (&reached, &tune_err) {
            (Some(steps), _) => format!(
                "clip ms-ssim {:.5} -> {:.5} (+{:.5}) after {} of 2000 budgeted steps",
                base_ms,
                best,
                best - base_ms,
                steps
            ),
            (None, Some(e)) => format!("fine-tune failed: {e}"),
            (None, None) => format!(
                "clip ms-ssim {:.5} -> best {:.5} (+{:.5}) after {} steps; needed +0.001",
                base_ms,
                best,
                best - base_ms,
                steps_used
            ),
        },
    });

    out
}

// ---------------------------------------------------------------------------
// Criterion 9: width/height that are not multiples of 16.

fn c9_resolution_contract() -> (bool, String) {
    let spec = SyntheticSpec {
        width: 60,
        height: 70,
        frames: 2,
        shift: (1.0, 1.0),
        waves: 8,
        seed: 41,
    };
    // Pre-quantized frames make the lossless intra path an exact identity.
    let frames: Vec<Frame> = synthetic_clip(&spec)
        .into_iter()
        .map(|f| f.mapv(quantize_to_8bit))
        .collect();
    let mut model = CodecModel::new(1024.0, DistortionMetric::Mse, 10);
    let rejected = matches!(
        encode_sequence(&mut model, &frames, 2, &LosslessPng, DimensionPolicy::Reject),
        Err(Error::Resolution(_))
    );
    let enc = match encode_sequence(&mut model, &frames, 2, &LosslessPng, DimensionPolicy::Pad) {
        Ok(e) => e,
        Err(e) => return (false, format!("pad-policy encode failed: {e}")),
    };
    let (dec, _) = match decode_sequence(&mut model, &enc.bytes) {
        Ok(d) => d,
        Err(e) => return (false, format!("decode failed: {e}")),
    };
    let dims_ok = dec.len() == 2 && dec.iter().all(|f| f.dim() == (3, 70, 60));
    let i_ok = dims_ok && bits_equal(&dec[0], &frames[0]);
    let p_ok = dims_ok && bits_equal(&dec[1], &crop_to_original(&enc.recons[1], &enc.pad));
    (
        rejected && dims_ok && i_ok && p_ok,
        format!(
            "reject refused: {rejected}; padded round trip at 60x70: dims {dims_ok}, intra exact {i_ok}, inter exact {p_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Criterion 10: metric fixed points.

fn c10_metric_sanity() -> (bool, String) {
    let a = Array3::<f32>::zeros((3, 32, 32));
    let b = Array3::<f32>::from_elem((3, 32, 32), 0.1);
    let p = psnr(a.view(), b.view());
    let clip = synthetic_clip(&SyntheticSpec {
        width: 176,
        height: 176,
        frames: 1,
        shift: (0.0, 0.0),
        waves: 9,
        seed: 21,
    });
    let ms = msssim(clip[0].view(), clip[0].view(), 5).unwrap();
    (
        (p - 20.0).abs() <= 0.01 && (ms - 1.0).abs() <= 1e-6,
        format!("uniform-0.1 psnr {p:.4} dB (want 20 +- 0.01), identical ms-ssim {ms:.8} (want 1 +- 1e-6)"),
    )
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let wall = Instant::now();
    let mut checks: Vec<Check> = Vec::new();

    checks.push(run_check(1, c1_entropy_exactness));
    checks.push(run_check(2, c2_rate_fidelity));
    checks.push(run_check(3, c3_gradient_suite));
    checks.push(run_check(4, c4_shape_chain));
    checks.push(run_check(5, c5_determinism));
    checks.push(run_check(9, c9_resolution_contract));
    checks.push(run_check(10, c10_metric_sanity));
    match catch_unwind(training_criteria_impl) {
        Ok(v) => checks.extend(v),
        Err(e) => {
            let why = panic_text(&*e);
            for n in [6, 7, 8] {
                checks.push(Check {
                    n,
                    name: criterion_name(n),
                    pass: false,
                    detail: format!("panicked: {why}"),
                });
            }
        }
    }

    checks.sort_by_key(|c| c.n);
    println!();
    let mut all = true;
    for c in &checks {
        println!("{}", check_line(c));
        all &= c.pass;
    }
    println!("acceptance wall time {:.1}s", wall.elapsed().as_secs_f64());
    let failing: Vec<String> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{} ({})", c.n, c.name))
        .collect();
    assert!(all, "failing criteria: {}", failing.join(", "));
}
