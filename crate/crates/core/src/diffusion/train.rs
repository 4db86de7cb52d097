use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{to_model, Predictor};
use crate::degrade::{degrade_sampled, DegradationRanges};
use crate::denoiser::{loss_and_grad, lp_loss, write_checkpoint, AdamState, DenoiserCheckpoint, PredictionTarget};
use crate::error::{Error, Result};
use crate::imaging::rng::normal;
use crate::imaging::{ImageTensor, RngStream};
use crate::nn::Tensor;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub target: PredictionTarget,
    pub p_norm: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            target: PredictionTarget::X0,
            p_norm: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_norm != 1 && self.p_norm != 2 {
            return Err(Error::Config(format!("p_norm must be 1 or 2, got {}", self.p_norm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaSampling {
    /// `γ = γ_t` for `t` uniform on `1..=T`.
    DiscreteT,
    /// `t` uniform, then `γ` uniform on `(γ_t, γ_{t−1})`.
    #[default]
    ContinuousBand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: AdamConfig,
    pub total_steps: u64,
    pub gamma_sampling: GammaSampling,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            optimizer: AdamConfig::default(),
            total_steps: 20_000,
            gamma_sampling: GammaSampling::ContinuousBand,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer moments must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// A clean target and the image its condition is degraded from. In round 0
/// both are the same picture; after enhancement the target is the enhanced
/// copy while the condition still comes from the original.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub id: String,
    pub target: ImageTensor,
    pub source: ImageTensor,
}

impl TrainPair {
    pub fn same(id: impl Into<String>, image: ImageTensor) -> Self {
        Self {
            id: id.into(),
            source: image.clone(),
            target: image,
        }
    }
}

/// Model-range training batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub indices: Vec<usize>,
    pub x0: Tensor<f32>,
    pub cond: Tensor<f32>,
    pub gammas: Vec<f64>,
    pub eps: Tensor<f32>,
    pub noisy: Tensor<f32>,
}

impl TrainBatch {
    pub fn target(&self, t: PredictionTarget) -> &Tensor<f32> {
        match t {
            PredictionTarget::X0 => &self.x0,
            PredictionTarget::Epsilon => &self.eps,
        }
    }
}

const STREAM_TRAIN: u64 = 0x7452_4149_4e;

fn step_stream(seed: u64, step: u64) -> RngStream {
    RngStream::new(seed, STREAM_TRAIN).child(step)
}

/// Corpus indices used at `step` (uniform, with replacement).
pub fn batch_indices(seed: u64, step: u64, corpus_len: usize, batch_size: usize) -> Vec<usize> {
    let mut r = step_stream(seed, step).child(0).rng();
    (0..batch_size).map(|_| r.random_range(0..corpus_len)).collect()
}

fn sample_gamma<R: Rng>(schedule: &NoiseSchedule, mode: GammaSampling, r: &mut R) -> f64 {
    let t = r.random_range(1..=schedule.steps());
    match mode {
        GammaSampling::DiscreteT => schedule.gamma(t),
        GammaSampling::ContinuousBand => {
            let (lo, hi) = (schedule.gamma(t), schedule.gamma(t - 1));
            let u: f64 = r.random();
            lo + u * (hi - lo)
        }
    }
}

/// Assembles the batch for `step`: fresh degradations, noise levels and noise.
pub fn make_batch(
    pairs: &[TrainPair],
    ranges: &DegradationRanges,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    step: u64,
) -> Result<TrainBatch> {
    if pairs.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let stream = step_stream(cfg.seed, step);
    let indices = batch_indices(cfg.seed, step, pairs.len(), cfg.batch_size);
    let mut conds = Vec::with_capacity(indices.len());
    for (i, &idx) in indices.iter().enumerate() {
        let (xd, _) = degrade_sampled(&pairs[idx].source, ranges, stream.child(1 << 32 | i as u64))?;
        conds.push(xd);
    }
    let targets: Vec<&ImageTensor> = indices.iter().map(|&i| &pairs[i].target).collect();
    let x0 = to_model(&targets)?;
    let cond = to_model(&conds.iter().collect::<Vec<_>>())?;
    let b = indices.len();
    let hw = x0.plane();
    let mut gammas = Vec::with_capacity(b);
    let mut eps = Tensor::zeros(x0.c, b, x0.h, x0.w);
    let mut noisy = Tensor::zeros(x0.c, b, x0.h, x0.w);
    for bi in 0..b {
        let mut r = stream.child(2 << 32 | bi as u64).rng();
        let gamma = sample_gamma(schedule, cfg.gamma_sampling, &mut r);
        gammas.push(gamma);
        let (a, s) = (gamma.sqrt(), (1.0 - gamma).sqrt());
        for ch in 0..x0.c {
            let range = (ch * b + bi) * hw..(ch * b + bi + 1) * hw;
            for j in range {
                let e = normal(&mut r);
                eps.data[j] = e as f32;
                noisy.data[j] = (a * x0.data[j] as f64 + s * e) as f32;
            }
        }
    }
    Ok(TrainBatch {
        indices,
        x0,
        cond,
        gammas,
        eps,
        noisy,
    })
}

/// Mean `|f(x_d, x̂, γ) − target|^p` over the batch.
pub fn loss(model: &dyn Predictor, batch: &TrainBatch, loss_cfg: &LossConfig) -> Result<f64> {
    loss_cfg.validate()?;
    let pred = model.predict(&batch.noisy, &batch.cond, &batch.gammas)?;
    if !pred.all_finite() {
        return Err(Error::Numeric("non-finite prediction".into()));
    }
    Ok(lp_loss(&pred, batch.target(loss_cfg.target), loss_cfg.p_norm)?.0)
}

/// One row of the loss trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f64,
    pub wall_ms: f64,
}

/// Where training writes its side outputs; all optional.
#[derive(Debug, Clone, Default)]
pub struct TrainHooks {
    /// Periodic and final checkpoints land here as `step_<n>.idmc` and `last.idmc`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Loss trace CSV, appended to as training runs.
    pub trace_path: Option<PathBuf>,
    /// Called after every step with the trace row.
    pub progress: Option<fn(&TraceRow)>,
}

pub struct TrainOutcome {
    pub checkpoint: DenoiserCheckpoint,
    pub trace: Vec<TraceRow>,
}

fn adam_update(params: &mut [Vec<f32>], grads: &[Vec<f32>], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let step_size = (lr * c2.sqrt() / c1) as f32;
    let eps_hat = (cfg.eps * c2.sqrt()) as f32;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *pi -= step_size * *mi / (vi.sqrt() + eps_hat);
        }
    }
}

/// Runs the optimiser from `ckpt.step_count` up to `cfg.total_steps`.
///
/// Each step's batch depends only on `(cfg.seed, step)` and the optimiser
/// state lives in the checkpoint, so stopping and resuming from a saved
/// checkpoint reproduces an uninterrupted run exactly.
pub fn train(
    mut ckpt: DenoiserCheckpoint,
    pairs: &[TrainPair],
    ranges: &DegradationRanges,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    hooks: &TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    ranges.validate()?;
    if loss_cfg.target != ckpt.config.prediction_target {
        return Err(Error::Config(format!(
            "loss target {:?} does not match the network's prediction target {:?}",
            loss_cfg.target, ckpt.config.prediction_target
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if let Some(dir) = &hooks.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut trace_writer = match &hooks.trace_path {
        Some(p) => {
            let fresh = ckpt.step_count == 0 || !p.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
        }
        None => None,
    };
    ckpt.schedule = schedule.config().clone();
    let mut opt = ckpt.optimizer.take().unwrap_or_else(|| AdamState::zeros_like(&ckpt.params));
    let mut trace = Vec::new();
    let started = Instant::now();
    while ckpt.step_count < cfg.total_steps {
        let step = ckpt.step_count;
        let batch = make_batch(pairs, ranges, schedule, cfg, step)?;
        let (value, grads) = match loss_and_grad(
            ckpt.net(),
            &ckpt.params,
            &batch.noisy,
            &batch.cond,
            &batch.gammas,
            batch.target(loss_cfg.target),
            loss_cfg.p_norm,
        ) {
            Ok(v) => v,
            Err(Error::Numeric(_)) => {
                ckpt.optimizer = Some(opt);
                return Err(nan_abort(&ckpt, hooks, step, f64::NAN));
            }
            Err(e) => return Err(e),
        };
        if !value.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            ckpt.optimizer = Some(opt);
            return Err(nan_abort(&ckpt, hooks, step, value));
        }
        adam_update(&mut ckpt.params, &grads, &mut opt, cfg.learning_rate, &cfg.optimizer);
        if !ckpt.all_finite() {
            ckpt.optimizer = Some(opt);
            return Err(nan_abort(&ckpt, hooks, step, value));
        }
        ckpt.step_count += 1;
        let row = TraceRow {
            step,
            loss: value,
            learning_rate: cfg.learning_rate,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = trace_writer.as_mut() {
            w.serialize(&row)?;
        }
        if let Some(f) = hooks.progress {
            f(&row);
        }
        trace.push(row);
        if let Some(dir) = &hooks.checkpoint_dir {
            if cfg.checkpoint_every > 0 && ckpt.step_count % cfg.checkpoint_every == 0 {
                if let Some(w) = trace_writer.as_mut() {
                    w.flush().map_err(|e| Error::io(dir, e))?;
                }
                ckpt.optimizer = Some(opt.clone());
                write_checkpoint(&ckpt, dir.join(format!("step_{}.idmc", ckpt.step_count)))?;
                write_checkpoint(&ckpt, dir.join("last.idmc"))?;
                log::debug!("checkpoint at step {} in {}", ckpt.step_count, dir.display());
            }
        }
    }
    if let Some(w) = trace_writer.as_mut() {
        w.flush().map_err(|e| Error::io(hooks.trace_path.as_ref().unwrap(), e))?;
    }
    ckpt.optimizer = Some(opt);
    if let Some(dir) = &hooks.checkpoint_dir {
        write_checkpoint(&ckpt, dir.join("last.idmc"))?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, trace })
}

fn nan_abort(ckpt: &DenoiserCheckpoint, hooks: &TrainHooks, step: u64, loss: f64) -> Error {
    let mut msg = format!("non-finite loss or gradient at step {step} (loss = {loss})");
    if let Some(dir) = &hooks.checkpoint_dir {
        let path = dir.join("nan_dump.idmc");
        match write_checkpoint(ckpt, &path) {
            Ok(()) => msg.push_str(&format!("; state dumped to {}", path.display())),
            Err(e) => msg.push_str(&format!("; state dump failed: {e}")),
        }
    }
    Error::Numeric(msg)
}
