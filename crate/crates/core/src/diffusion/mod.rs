//! Forward noising, the reverse sampler and (in [`train`]) the optimisation
//! loop.
//!
//! Images enter the model as `x ↦ 2x − 1` and leave through the inverse;
//! [`to_model`] and [`from_model`] are the only places that conversion happens.

mod train;

pub use train::{
    batch_indices, loss, make_batch, train, AdamConfig, GammaSampling, LossConfig, TraceRow, TrainBatch, TrainConfig,
    TrainHooks, TrainOutcome, TrainPair,
};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserCheckpoint, PredictionTarget};
use crate::error::{Error, Result};
use crate::imaging::rng::normal;
use crate::imaging::{ImageTensor, RngStream};
use crate::nn::Tensor;
use crate::parallel;
use crate::schedule::InferencePlan;

/// Default number of sampling steps.
pub const DEFAULT_STEPS: usize = 10;

/// Images restored together in one network call.
pub const RESTORE_CHUNK: usize = 16;

/// Anything that maps `(noisy, condition, γ)` to an x0 or ε prediction.
pub trait Predictor: Sync {
    fn target(&self) -> PredictionTarget;
    /// `noisy` and `cond` are `C × B × H × W` in model range.
    fn predict(&self, noisy: &Tensor<f32>, cond: &Tensor<f32>, gammas: &[f64]) -> Result<Tensor<f32>>;
}

impl Predictor for DenoiserCheckpoint {
    fn target(&self) -> PredictionTarget {
        self.config.prediction_target
    }

    fn predict(&self, noisy: &Tensor<f32>, cond: &Tensor<f32>, gammas: &[f64]) -> Result<Tensor<f32>> {
        DenoiserCheckpoint::predict(self, noisy, cond, gammas)
    }
}

/// Packs `[0, 1]` images into one model-range batch tensor.
pub fn to_model(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w, c) = first.shape();
    let b = images.len();
    let mut t = Tensor::zeros(c, b, h, w);
    for (bi, im) in images.iter().enumerate() {
        first.ensure_same_shape(im)?;
        for (i, px) in im.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                t.data[(ch * b + bi) * h * w + i] = 2.0 * v - 1.0;
            }
        }
    }
    Ok(t)
}

/// Unpacks a model-range batch into clipped `[0, 1]` images.
pub fn from_model<F: crate::nn::Float>(t: &Tensor<F>) -> Result<Vec<ImageTensor>> {
    let (c, b, h, w) = (t.c, t.b, t.h, t.w);
    (0..b)
        .map(|bi| {
            let mut data = vec![0.0f32; h * w * c];
            for ch in 0..c {
                let plane = &t.data[(ch * b + bi) * h * w..(ch * b + bi + 1) * h * w];
                for (i, &v) in plane.iter().enumerate() {
                    data[i * c + ch] = ((v.f64() as f32 + 1.0) * 0.5).clamp(0.0, 1.0);
                }
            }
            ImageTensor::new(h, w, c, data)
        })
        .collect()
}

/// `√γ·x0 + √(1−γ)·ε`.
pub fn q_sample(x0: &[f32], gamma: f64, eps: &[f32]) -> Result<Vec<f32>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} values, noise {}", x0.len(), eps.len())));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Parameter(format!("gamma {gamma} outside (0, 1]")));
    }
    let (a, s) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32).collect())
}

/// One reverse update for a single value:
/// `(x_t − (1−α)/√(1−γ)·ε̂)/√α + √(1−α)·z`.
pub fn ddpm_update(x_t: f64, eps_hat: f64, alpha: f64, gamma: f64, z: f64) -> f64 {
    if alpha == 1.0 {
        return x_t;
    }
    (x_t - (1.0 - alpha) / (1.0 - gamma).sqrt() * eps_hat) / alpha.sqrt() + (1.0 - alpha).sqrt() * z
}

/// `ε̂ = (x_t − √γ·x̂0)/√(1−γ)`; undefined at `γ = 1`.
pub fn eps_from_x0(x_t: f64, x0: f64, gamma: f64) -> Result<f64> {
    if gamma >= 1.0 {
        return Err(Error::Numeric("cannot convert x0 to noise at gamma = 1".into()));
    }
    Ok((x_t - gamma.sqrt() * x0) / (1.0 - gamma).sqrt())
}

/// Chain state for a batch: `x_t` in model range, not clipped between steps.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub t: usize,
    pub gamma: f64,
    pub x_t: Tensor<f64>,
}

/// Splits a raw prediction into `(x̂0, ε̂)`; x̂0 is clipped to `[−1, 1]`.
fn decompose(target: PredictionTarget, x_t: &Tensor<f64>, raw: &Tensor<f32>, gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    match target {
        PredictionTarget::X0 => {
            let x0: Vec<f64> = raw.data.iter().map(|&v| (v as f64).clamp(-1.0, 1.0)).collect();
            let eps = x_t
                .data
                .iter()
                .zip(&x0)
                .map(|(&x, &p)| eps_from_x0(x, p, gamma))
                .collect::<Result<_>>()?;
            Ok((x0, eps))
        }
        PredictionTarget::Epsilon => {
            let eps: Vec<f64> = raw.data.iter().map(|&v| v as f64).collect();
            if gamma <= 0.0 {
                return Err(Error::Numeric("gamma must be positive".into()));
            }
            let x0 = x_t
                .data
                .iter()
                .zip(&eps)
                .map(|(&x, &e)| ((x - (1.0 - gamma).sqrt() * e) / gamma.sqrt()).clamp(-1.0, 1.0))
                .collect();
            Ok((x0, eps))
        }
    }
}

/// One step of the reverse chain for a batch. `rngs` supplies one noise
/// stream per batch item.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step(
    model: &dyn Predictor,
    state: &DiffusionState,
    cond: &Tensor<f32>,
    alpha_eff: f64,
    gamma_eff: f64,
    next_t: usize,
    rngs: &[RngStream],
    add_noise: bool,
) -> Result<DiffusionState> {
    if !(alpha_eff > 0.0 && alpha_eff <= 1.0) {
        return Err(Error::Parameter(format!("alpha {alpha_eff} outside (0, 1]")));
    }
    let x = &state.x_t;
    if rngs.len() != x.b {
        return Err(Error::Shape(format!("{} noise streams for batch of {}", rngs.len(), x.b)));
    }
    let raw = model.predict(&x.cast(), cond, &vec![gamma_eff; x.b])?;
    let (_, eps) = decompose(model.target(), x, &raw, gamma_eff)?;
    let noise = if add_noise { batch_noise(x, rngs) } else { vec![0.0; x.len()] };
    let mut next = x.clone();
    for ((n, &e), &z) in next.data.iter_mut().zip(&eps).zip(&noise) {
        *n = ddpm_update(*n, e, alpha_eff, gamma_eff, z);
    }
    Ok(DiffusionState {
        t: next_t,
        gamma: gamma_eff / alpha_eff,
        x_t: next,
    })
}

/// Standard normal draws laid out like `like`, item `b` drawn from `rngs[b]`.
fn batch_noise(like: &Tensor<f64>, rngs: &[RngStream]) -> Vec<f64> {
    let (c, b, hw) = (like.c, like.b, like.plane());
    let mut out = vec![0.0; like.len()];
    for (bi, stream) in rngs.iter().enumerate() {
        let mut r = stream.rng();
        for ch in 0..c {
            for v in &mut out[(ch * b + bi) * hw..(ch * b + bi + 1) * hw] {
                *v = normal(&mut r);
            }
        }
    }
    out
}

/// Per-step record of a restoration chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainTrace {
    /// RMS change `‖x_{t−1} − x_t‖` of each stochastic step, in chain order.
    pub step_deltas: Vec<f64>,
}

/// Restores a batch of same-shaped images; item `i` uses only `streams[i]`.
pub fn restore_batch_traced(
    model: &dyn Predictor,
    degraded: &[&ImageTensor],
    plan: &InferencePlan,
    streams: &[RngStream],
) -> Result<(Vec<ImageTensor>, Vec<ChainTrace>)> {
    if plan.is_empty() {
        return Err(Error::Parameter("empty inference plan".into()));
    }
    if streams.len() != degraded.len() {
        return Err(Error::Shape("one stream per image required".into()));
    }
    let cond = to_model(degraded)?;
    let k_total = plan.len();
    let step_rngs = |k: usize| streams.iter().map(|s| s.child(k as u64)).collect::<Vec<_>>();
    let mut state = DiffusionState {
        t: plan.t_indices[k_total - 1],
        gamma: plan.effective_gammas[k_total - 1],
        x_t: Tensor::from_vec(cond.c, cond.b, cond.h, cond.w, batch_noise(&cond.cast(), &step_rngs(0))),
    };
    let mut traces = vec![ChainTrace { step_deltas: Vec::new() }; degraded.len()];
    for k in (1..k_total).rev() {
        let alpha = plan.effective_alphas[k];
        let gamma = plan.effective_gammas[k];
        let next = ddpm_step(model, &state, &cond, alpha, gamma, plan.t_indices[k - 1], &step_rngs(k), true)?;
        record_deltas(&state.x_t, &next.x_t, &mut traces);
        state = next;
    }
    // terminal step: emit the clipped x̂0 prediction without noise
    let gamma = plan.effective_gammas[0];
    let raw = model.predict(&state.x_t.cast(), &cond, &vec![gamma; cond.b])?;
    let (x0, _) = decompose(model.target(), &state.x_t, &raw, gamma)?;
    let out = from_model(&Tensor::from_vec(cond.c, cond.b, cond.h, cond.w, x0))?;
    Ok((out, traces))
}

fn record_deltas(prev: &Tensor<f64>, next: &Tensor<f64>, traces: &mut [ChainTrace]) {
    let (c, b, hw) = (prev.c, prev.b, prev.plane());
    for (bi, tr) in traces.iter_mut().enumerate() {
        let mut ss = 0.0;
        for ch in 0..c {
            let r = (ch * b + bi) * hw..(ch * b + bi + 1) * hw;
            ss += prev.data[r.clone()].iter().zip(&next.data[r]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        tr.step_deltas.push((ss / (c * hw) as f64).sqrt());
    }
}

pub fn restore(model: &dyn Predictor, degraded: &ImageTensor, plan: &InferencePlan, rng: RngStream) -> Result<ImageTensor> {
    let (mut out, _) = restore_batch_traced(model, &[degraded], plan, &[rng])?;
    Ok(out.pop().expect("one output"))
}

/// Restores many images in fixed chunks of [`RESTORE_CHUNK`] across
/// `workers` threads; results do not depend on the worker count.
pub fn restore_many(
    model: &dyn Predictor,
    degraded: &[ImageTensor],
    plan: &InferencePlan,
    streams: &[RngStream],
    workers: usize,
) -> Result<Vec<ImageTensor>> {
    if streams.len() != degraded.len() {
        return Err(Error::Shape("one stream per image required".into()));
    }
    let items: Vec<(&ImageTensor, RngStream)> = degraded.iter().zip(streams.iter().copied()).collect();
    parallel::map_chunks(&items, RESTORE_CHUNK, workers, |chunk| {
        // group by shape so mixed-size corpora still batch
        let mut out: Vec<Option<ImageTensor>> = vec![None; chunk.len()];
        let mut pending: Vec<usize> = (0..chunk.len()).collect();
        while let Some(&first) = pending.first() {
            let shape = chunk[first].0.shape();
            let (same, rest): (Vec<usize>, Vec<usize>) = pending.iter().partition(|&&i| chunk[i].0.shape() == shape);
            let imgs: Vec<&ImageTensor> = same.iter().map(|&i| chunk[i].0).collect();
            let rngs: Vec<RngStream> = same.iter().map(|&i| chunk[i].1).collect();
            let (restored, _) = restore_batch_traced(model, &imgs, plan, &rngs)?;
            for (i, r) in same.into_iter().zip(restored) {
                out[i] = Some(r);
            }
            pending = rest;
        }
        Ok(out.into_iter().map(|o| o.expect("restored")).collect())
    })
}

/// Stream for restoring image `id` under a global seed.
pub fn restore_stream(seed: u64, id: &str) -> RngStream {
    RngStream::new(seed, 0x5245_5354).keyed(id)
}

/// Returns the x0 it was built with, whatever the inputs; a sampler driven by
/// it must reproduce that image exactly.
#[derive(Debug, Clone)]
pub struct OracleX0 {
    pub x0: Tensor<f32>,
}

impl OracleX0 {
    pub fn for_image(x0: &ImageTensor) -> Result<Self> {
        Ok(Self { x0: to_model(&[x0])? })
    }
}

impl Predictor for OracleX0 {
    fn target(&self) -> PredictionTarget {
        PredictionTarget::X0
    }

    fn predict(&self, noisy: &Tensor<f32>, _cond: &Tensor<f32>, _gammas: &[f64]) -> Result<Tensor<f32>> {
        if noisy.shape() != self.x0.shape() {
            return Err(Error::Shape("oracle asked about a different batch".into()));
        }
        Ok(self.x0.clone())
    }
}

/// Predicts the condition itself as x0: restoring with it returns the input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPredictor;

impl Predictor for IdentityPredictor {
    fn target(&self) -> PredictionTarget {
        PredictionTarget::X0
    }

    fn predict(&self, _noisy: &Tensor<f32>, cond: &Tensor<f32>, _gammas: &[f64]) -> Result<Tensor<f32>> {
        Ok(cond.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{gen_toy_face, ToyFaceSpec};
    use crate::schedule::{make_inference_plan, ScheduleConfig};
    use proptest::prelude::*;

    fn face(seed: u64) -> ImageTensor {
        gen_toy_face(&ToyFaceSpec::default(), RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn q_sample_endpoints_and_closed_form() {
        let x0 = vec![0.3f32, -0.7, 1.0];
        let eps = vec![0.5f32, 2.0, -1.0];
        assert_eq!(q_sample(&x0, 1.0, &eps).unwrap(), x0);
        let tiny = q_sample(&x0, 1e-12, &eps).unwrap();
        for (a, b) in tiny.iter().zip(&eps) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(q_sample(&[1.0; 4], 0.25, &[0.0; 4]).unwrap(), vec![0.5; 4]);
        assert!(q_sample(&x0, 0.5, &eps[..2]).is_err());
        assert!(q_sample(&x0, 0.0, &eps).is_err());
    }

    #[test]
    fn q_sample_moments() {
        let mut r = RngStream::new(9, 9).rng();
        let n = 10_000;
        for gamma in [0.1, 0.5, 0.9] {
            let x0 = vec![0.4f32; n];
            let eps: Vec<f32> = (0..n).map(|_| normal(&mut r) as f32).collect();
            let xs = q_sample(&x0, gamma, &eps).unwrap();
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = ((1.0 - gamma) / n as f64).sqrt();
            let se_var = (1.0 - gamma) * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - gamma.sqrt() * 0.4).abs() < 3.0 * se_mean, "gamma {gamma} mean {mean}");
            assert!((var - (1.0 - gamma)).abs() < 3.0 * se_var, "gamma {gamma} var {var}");
        }
    }

    #[test]
    fn ddpm_update_scalar_oracle() {
        let got = ddpm_update(0.5, 0.2, 0.99, 0.9, 0.0);
        let expected = (0.5 - (0.01 / 0.1f64.sqrt()) * 0.2) / 0.99f64.sqrt();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(ddpm_update(0.37, 5.0, 1.0, 0.5, 3.0), 0.37);
    }

    #[test]
    fn true_noise_recovers_x0_in_one_step() {
        let mut r = RngStream::new(1, 1).rng();
        for _ in 0..100 {
            let x0: f64 = rand::Rng::random_range(&mut r, -1.0..1.0);
            let eps = normal(&mut r);
            let gamma: f64 = rand::Rng::random_range(&mut r, 0.01..0.99);
            let x_t = gamma.sqrt() * x0 + (1.0 - gamma).sqrt() * eps;
            let back = ddpm_update(x_t, eps, gamma, gamma, 0.0);
            assert!((back - x0).abs() < 1e-5);
        }
    }

    #[test]
    fn gamma_one_conversion_is_guarded() {
        assert!(eps_from_x0(0.1, 0.1, 1.0).is_err());
        let x = to_model(&[&face(1)]).unwrap();
        let state = DiffusionState { t: 1, gamma: 1.0, x_t: x.cast() };
        let r = ddpm_step(&IdentityPredictor, &state, &x, 1.0, 1.0, 0, &[RngStream::new(0, 0)], false);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn alpha_one_step_is_identity() {
        let x = to_model(&[&face(2)]).unwrap();
        let state = DiffusionState { t: 5, gamma: 0.5, x_t: x.cast() };
        let next = ddpm_step(&IdentityPredictor, &state, &x, 1.0, 0.5, 4, &[RngStream::new(0, 0)], true).unwrap();
        assert_eq!(next.x_t, state.x_t);
    }

    #[test]
    fn oracle_restore_reproduces_x0_for_any_k() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let x = face(3);
        let oracle = OracleX0 { x0: to_model(&[&x]).unwrap() };
        let degraded = crate::degrade::gaussian_blur(&x, 2.0).unwrap();
        for k in [1, 5, 10, 20] {
            let plan = make_inference_plan(&schedule, k).unwrap();
            let out = restore(&oracle, &degraded, &plan, RngStream::new(4, k as u64)).unwrap();
            let err = out.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err <= 1e-4, "K={k}: {err}");
        }
    }

    #[test]
    fn identity_predictor_returns_condition() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let plan = make_inference_plan(&schedule, 10).unwrap();
        let x = face(5);
        let out = restore(&IdentityPredictor, &x, &plan, RngStream::new(1, 0)).unwrap();
        let err = out.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn batched_restore_matches_single_and_is_worker_invariant() {
        let cfg = crate::denoiser::DenoiserConfig {
            base_channels: 8,
            gamma_embed_dim: 16,
            ..crate::denoiser::DenoiserConfig::for_channels(3)
        };
        let mut ck = crate::denoiser::init_denoiser(&cfg, RngStream::new(3, 0)).unwrap();
        let head = ck.net().head_bias().0 - 1;
        ck.params[head].iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 5) as f32 - 2.0) * 0.01);
        let schedule = ScheduleConfig::default().build().unwrap();
        let plan = make_inference_plan(&schedule, 3).unwrap();
        let imgs: Vec<ImageTensor> = (0..3).map(face).collect();
        let streams: Vec<RngStream> = (0..3).map(|i| RngStream::new(8, i)).collect();
        let many = restore_many(&ck, &imgs, &plan, &streams, 1).unwrap();
        let many2 = restore_many(&ck, &imgs, &plan, &streams, 3).unwrap();
        assert_eq!(many, many2);
        for i in 0..3 {
            let single = restore(&ck, &imgs[i], &plan, streams[i]).unwrap();
            let diff = single.data().iter().zip(many[i].data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-5, "{diff}");
            assert!(single.is_valid());
        }
    }

    proptest! {
        #[test]
        fn model_range_round_trip(seed in 0u64..1000) {
            let x = face(seed);
            let t = to_model(&[&x]).unwrap();
            prop_assert!(t.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = from_model(&t).unwrap();
            let err = back[0].data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            prop_assert!(err < 1e-6);
        }
    }
}
