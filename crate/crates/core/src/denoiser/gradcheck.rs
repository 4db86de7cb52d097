use rand::seq::index;
use serde::Serialize;

use super::{lp_loss, DenoiserCheckpoint};
use crate::error::{Error, Result};
use crate::imaging::RngStream;
use crate::nn::{Float, Graph, Tensor};

/// Gradients smaller than this are compared on an absolute scale. Forward-pass
/// round-off leaves central differences with about 1e-10 of absolute noise in
/// double precision, which would dominate the ratio for tinier gradients.
pub const REL_FLOOR: f64 = 1e-4;

/// Inputs and regression target for one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckBatch {
    pub noisy: Tensor<f64>,
    pub cond: Tensor<f64>,
    pub gammas: Vec<f64>,
    pub target: Tensor<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation flipped the sign of some residual (p = 1 only).
    pub skipped_kinks: usize,
    pub step: f64,
}

struct Eval {
    loss: f64,
    signs: Vec<i8>,
}

/// Compares analytic gradients with central differences on `n_samples`
/// randomly chosen scalar parameters, evaluated in precision `F`.
pub fn grad_check<F: Float>(
    ckpt: &DenoiserCheckpoint,
    batch: &GradCheckBatch,
    p_norm: u8,
    n_samples: usize,
    rng: RngStream,
) -> Result<GradCheckReport> {
    let net = ckpt.net();
    let params: Vec<Vec<F>> = ckpt
        .params
        .iter()
        .map(|p| p.iter().map(|&v| F::of(v as f64)).collect())
        .collect();
    let noisy = batch.noisy.cast::<F>();
    let cond = batch.cond.cast::<F>();
    let target = batch.target.cast::<F>();
    net.check_pair(&noisy, &cond, &batch.gammas)?;
    let step = if std::mem::size_of::<F>() == 4 { 1e-3 } else { 1e-5 };

    let eval = |params: &[Vec<F>]| -> Result<Eval> {
        let mut g = Graph::new(params);
        let a = g.input(noisy.clone());
        let b = g.input(cond.clone());
        let out = net.forward(&mut g, a, b, &batch.gammas);
        let pred = g.value(out);
        let (loss, _) = lp_loss(pred, &target, p_norm)?;
        let signs = pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| if p > t { 1 } else if p < t { -1 } else { 0 })
            .collect();
        Ok(Eval { loss, signs })
    };

    let mut g = Graph::new(&params);
    let a = g.input(noisy.clone());
    let b = g.input(cond.clone());
    let out = net.forward(&mut g, a, b, &batch.gammas);
    let (_, seed) = lp_loss(g.value(out), &target, p_norm)?;
    let analytic = g.backward(out, seed);
    if analytic.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }
    let base = eval(&params)?;

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Vec::len).sum();
    let picks = index::sample(&mut rng.rng(), total, n_samples.min(total));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        step,
    };
    let mut work = params.clone();
    for flat in picks.iter() {
        let tensor = offsets.partition_point(|&o| o <= flat) - 1;
        let j = flat - offsets[tensor];
        let orig = work[tensor][j];
        work[tensor][j] = orig + F::of(step);
        let plus = eval(&work)?;
        work[tensor][j] = orig - F::of(step);
        let minus = eval(&work)?;
        work[tensor][j] = orig;
        if p_norm == 1 && (plus.signs != base.signs || minus.signs != base.signs) {
            report.skipped_kinks += 1;
            continue;
        }
        let fd = (plus.loss - minus.loss) / (2.0 * step);
        if !fd.is_finite() {
            return Err(Error::Numeric("non-finite finite difference".into()));
        }
        let an = analytic[tensor][j].f64();
        let denom = an.abs().max(fd.abs()).max(REL_FLOOR);
        report.max_rel_error = report.max_rel_error.max((an - fd).abs() / denom);
        report.checked += 1;
    }
    Ok(report)
}
