//! Progressive training.
//!
//! The codec trains in four stages, each optimizing the loss of a larger
//! slice of the pipeline: flow alone (warping loss), flow plus the motion
//! autoencoder and its rate, plus the compensation network, and finally
//! the full rate-distortion objective with the residual path. Because each
//! stage's loss graph touches exactly the parameters that stage owns,
//! gradient presence does the gating; no explicit freezing is needed.
//!
//! Rates are measured in bits per pixel under additive-uniform-noise
//! proxies of quantization. Distortion is MSE, or 1 - MS-SSIM when
//! fine-tuning for MS-SSIM (final stage only). The optimizer is Adam,
//! reset at stage boundaries; the final stage decays its learning rate
//! tenfold on convergence, twice. A non-finite loss aborts training and
//! leaves a checkpoint of the last finite state.

use std::io::Write as _;
use std::path::PathBuf;

use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::bottleneck::{likelihood_var, PriorVars};
use crate::checkpoint::save_checkpoint;
use crate::codec::{CodecModel, DistortionMetric};
use crate::error::{Error, Result};
use crate::frames::{ClipStream, Frame};
use crate::metrics::{max_msssim_scales, msssim_var};
use crate::nn::tape::{GradStore, Tape, Var};
use crate::params::{HasParams, VarTable};

/// Training stages, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    MotionEstimation,
    Motion,
    Compensation,
    Full,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::MotionEstimation,
        Stage::Motion,
        Stage::Compensation,
        Stage::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::MotionEstimation => "me",
            Stage::Motion => "motion",
            Stage::Compensation => "mc",
            Stage::Full => "full",
        }
    }

    /// Position of this stage in [`Stage::ALL`], matching the layout of
    /// per-stage arrays such as `TrainConfig::max_steps`.
    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).unwrap()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Adam with per-parameter first/second moment state, keyed by the
/// model's traversal order.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step(
        &mut self,
        model: &mut CodecModel,
        table: &VarTable<f32>,
        grads: &mut GradStore<f32>,
    ) {
        self.t += 1;
        let n = table.len();
        self.m.resize_with(n, || None);
        self.v.resize_with(n, || None);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let alpha = (self.lr * bc2.sqrt() / bc1) as f32;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let eps = (self.eps * bc2.sqrt()) as f32;
        let mut idx = 0usize;
        let vars: Vec<_> = table.iter().map(|(_, v)| v.clone()).collect();
        let m_state = &mut self.m;
        let v_state = &mut self.v;
        model.for_each_param("", &mut |_name: &str,
                                       mut view: ndarray::ArrayViewMutD<'_, f32>| {
            let i = idx;
            idx += 1;
            let Some(g) = grads.take(&vars[i]) else {
                return;
            };
            let m = m_state[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = v_state[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut view)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= alpha * *m / (v.sqrt() + eps);
                });
        });
    }
}

/// One training step's scalar outputs.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub distortion: f64,
    pub rate_m_bpp: f64,
    pub rate_y_bpp: f64,
}

/// A row of the training history.
#[derive(Debug, Clone, Copy)]
pub struct HistoryRow {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub stats: StepStats,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Maximum steps per stage, indexed like [`Stage::ALL`].
    pub max_steps: [usize; 4],
    /// Convergence window length in steps.
    pub window: usize,
    /// A stage converges when the windowed mean loss improves by less
    /// than this relative fraction.
    pub rel_improvement: f64,
    pub lr: f64,
    pub seed: u64,
    /// First stage to run; later entries of [`Stage::ALL`] follow.
    pub start_stage: Stage,
    pub log_csv: Option<PathBuf>,
    /// Directory for divergence checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: [2000, 1000, 1000, 3000],
            window: 500,
            rel_improvement: 1e-3,
            lr: 1e-4,
            seed: 0,
            start_stage: Stage::MotionEstimation,
            log_csv: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub steps_per_stage: [usize; 4],
}

impl TrainReport {
    /// Mean loss over the last `window` rows of a stage, and over the
    /// window before that, if available.
    pub fn windowed_means(&self, stage: Stage, window: usize) -> Option<(f64, f64)> {
        let losses: Vec<f64> = self
            .history
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.stats.loss)
            .collect();
        if losses.len() < 2 * window {
            return None;
        }
        let n = losses.len();
        let prev = losses[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
        let cur = losses[n - window..].iter().sum::<f64>() / window as f64;
        Some((prev, cur))
    }
}

fn mse_var<F: crate::nn::scalar::Scalar>(a: &Var<F>, b: &Var<F>) -> Var<F> {
    let d = a.sub(b);
    d.mul(&d).mean()
}

/// Rate of a likelihood tensor in bits per pixel of the frame.
fn rate_bpp_var<F: crate::nn::scalar::Scalar>(p: &Var<F>, frame_pixels: usize) -> Var<F> {
    p.ln()
        .sum()
        .scale(-1.0 / (std::f64::consts::LN_2 * frame_pixels as f64))
}

struct StageGraph {
    loss: Var<f32>,
    distortion: Var<f32>,
    rate_m: Option<Var<f32>>,
    rate_y: Option<Var<f32>>,
}

/// Build the loss graph for one stage on one (reference, target) pair.
fn build_stage_graph(
    model: &CodecModel,
    stage: Stage,
    tape: &Tape<f32>,
    table: &VarTable<f32>,
    reference: &Frame,
    target: &Frame,
    rng: &mut ChaCha20Rng,
) -> Result<StageGraph> {
    let (_, h, w) = target.dim();
    let pixels = h * w;
    let lambda = model.lambda as f64;
    let refv = tape.input(reference.clone().into_dyn());
    let tgtv = tape.input(target.clone().into_dyn());

    let flow = model.flow.estimate_var(&refv, &tgtv, table, "flow");
    if stage == Stage::MotionEstimation {
        let warped = refv.warp(&flow);
        let d = mse_var(&tgtv, &warped);
        return Ok(StageGraph {
            loss: d.clone(),
            distortion: d,
            rate_m: None,
            rate_y: None,
        });
    }

    // Motion autoencoder with additive-noise quantization proxy.
    let m = model.mv_analysis.forward_var(&flow, table, "mv_analysis");
    let noise = ArrayD::from_shape_fn(m.value().raw_dim(), |_| rng.random::<f32>() - 0.5);
    let m_tilde = m.add(&tape.input(noise));
    let prior_m = PriorVars::from_table(table, "prior_m");
    let p_m = likelihood_var(&m_tilde, &prior_m);
    let rate_m = rate_bpp_var(&p_m, pixels);
    let flow_hat = model.mv_synthesis.forward_var(&m_tilde, table, "mv_synthesis");
    let warped = refv.warp(&flow_hat);

    let prediction = match stage {
        Stage::Motion => warped,
        _ => model.mc.predict_var(&refv, &warped, &flow_hat, table, "mc"),
    };

    if stage != Stage::Full {
        let d = mse_var(&tgtv, &prediction);
        let loss = d.scale(lambda).add(&rate_m);
        return Ok(StageGraph {
            loss,
            distortion: d,
            rate_m: Some(rate_m),
            rate_y: None,
        });
    }

    // Residual autoencoder.
    let residual = tgtv.sub(&prediction);
    let y = model.res_analysis.forward_var(&residual, table, "res_analysis");
    let noise = ArrayD::from_shape_fn(y.value().raw_dim(), |_| rng.random::<f32>() - 0.5);
    let y_tilde = y.add(&tape.input(noise));
    let prior_y = PriorVars::from_table(table, "prior_y");
    let p_y = likelihood_var(&y_tilde, &prior_y);
    let rate_y = rate_bpp_var(&p_y, pixels);
    let r_hat = model.res_synthesis.forward_var(&y_tilde, table, "res_synthesis");
    let recon = prediction.add(&r_hat);

    let d = match model.metric {
        DistortionMetric::Mse => mse_var(&tgtv, &recon),
        DistortionMetric::MsSsim => {
            let scales = max_msssim_scales(h, w).min(5);
            if scales == 0 {
                return Err(Error::InvalidInput(format!(
                    "frames {w}x{h} too small for MS-SSIM training"
                )));
            }
            msssim_var(&recon, &tgtv, scales)?.scale(-1.0).add_scalar(1.0)
        }
    };
    let loss = d.scale(lambda).add(&rate_m).add(&rate_y);
    Ok(StageGraph {
        loss,
        distortion: d,
        rate_m: Some(rate_m),
        rate_y: Some(rate_y),
    })
}

/// Windowed convergence detector.
struct Convergence {
    window: usize,
    rel: f64,
    losses: Vec<f64>,
}

impl Convergence {
    fn new(window: usize, rel: f64) -> Self {
        Convergence {
            window,
            rel,
            losses: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.losses.clear();
    }

    fn push(&mut self, loss: f64) -> bool {
        self.losses.push(loss);
        let n = self.losses.len();
        if n < 2 * self.window || n % self.window != 0 {
            return false;
        }
        let prev: f64 =
            self.losses[n - 2 * self.window..n - self.window].iter().sum::<f64>()
                / self.window as f64;
        let cur: f64 = self.losses[n - self.window..].iter().sum::<f64>() / self.window as f64;
        (prev - cur) / prev.abs().max(1e-12) < self.rel
    }
}

/// Run progressive training on clips drawn from `stream`.
pub fn train(
    model: &mut CodecModel,
    stream: &mut dyn ClipStream,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut csv = match &cfg.log_csv {
        Some(path) => {
            let mut f = std::fs::File::create(path)?;
            writeln!(f, "step,stage,lr,loss,distortion,rate_m_bpp,rate_y_bpp")?;
            Some(f)
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut steps_per_stage = [0usize; 4];
    let mut global_step = 0usize;

    for &stage in &Stage::ALL[cfg.start_stage.index()..] {
        let mut adam = Adam::new(cfg.lr);
        let mut conv = Convergence::new(cfg.window, cfg.rel_improvement);
        // The final stage decays the learning rate tenfold on each
        // convergence, running three plateaus in total.
        let decays_left_init = if stage == Stage::Full { 2 } else { 0 };
        let mut decays_left = decays_left_init;
        for _ in 0..cfg.max_steps[stage.index()] {
            let clip = stream.next_clip()?;
            if clip.len() < 2 {
                return Err(Error::InvalidInput(
                    "training clips need at least 2 frames".into(),
                ));
            }
            let reference = &clip[0];
            let target = &clip[1];

            let tape = Tape::<f32>::new();
            let table = VarTable::from_model(&tape, model);
            let graph = build_stage_graph(model, stage, &tape, &table, reference, target, &mut rng)?;
            let loss = graph.loss.scalar() as f64;
            if !loss.is_finite() {
                let dir = cfg
                    .checkpoint_dir
                    .clone()
                    .unwrap_or_else(std::env::temp_dir);
                std::fs::create_dir_all(&dir)?;
                let path = dir.join("diverged.ckpt");
                save_checkpoint(&path, model)?;
                return Err(Error::Diverged {
                    step: global_step,
                    stage: stage.name().to_string(),
                    checkpoint: path,
                });
            }
            let stats = StepStats {
                loss,
                distortion: graph.distortion.scalar() as f64,
                rate_m_bpp: graph.rate_m.as_ref().map_or(0.0, |r| r.scalar() as f64),
                rate_y_bpp: graph.rate_y.as_ref().map_or(0.0, |r| r.scalar() as f64),
            };
            let mut grads = tape.backward(&graph.loss);
            adam.step(model, &table, &mut grads);

            global_step += 1;
            steps_per_stage[stage.index()] += 1;
            if let Some(f) = csv.as_mut() {
                writeln!(
                    f,
                    "{},{},{:e},{:.6e},{:.6e},{:.6e},{:.6e}",
                    global_step,
                    stage,
                    adam.lr,
                    stats.loss,
                    stats.distortion,
                    stats.rate_m_bpp,
                    stats.rate_y_bpp
                )?;
            }
            history.push(HistoryRow {
                step: global_step,
                stage,
                lr: adam.lr,
                stats,
            });

            if conv.push(loss) {
                if decays_left > 0 {
                    decays_left -= 1;
                    adam.lr /= 10.0;
                    conv.reset();
                } else {
                    break;
                }
            }
        }
    }
    Ok(TrainReport {
        history,
        steps_per_stage,
    })
}

/// Warp quality of the current flow network on one frame pair: returns
/// (MSE after warping by estimated flow, MSE of using the reference as-is).
pub fn warp_mse(model: &CodecModel, reference: &Frame, target: &Frame) -> (f64, f64) {
    let flow = model.flow.estimate(reference.view(), target.view());
    let warped = crate::nn::warp::warp_fwd(reference.view(), flow.view());
    let mse = |a: &Frame, b: &Frame| {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64
    };
    (mse(&warped, target), mse(reference, target))
}
