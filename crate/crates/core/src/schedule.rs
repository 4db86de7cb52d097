//! Noise schedules and the coarse inference grid.
//!
//! Timesteps are 1-based throughout (`t ∈ 1..=T`), matching how the forward
//! process is usually written; `gamma(0)` is defined as 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    #[default]
    Linear,
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule_family: ScheduleFamily,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule_family: ScheduleFamily::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.schedule_family {
            ScheduleFamily::Linear => make_linear_schedule(self.steps, self.beta_start, self.beta_end),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alphas: Vec<f64>,
    gammas: Vec<f64>,
}

/// Linear-β schedule: `α_t = 1 − β_t`, `γ_t = ∏_{i≤t} α_i`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let alphas: Vec<f64> = (0..steps)
        .map(|i| {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start)
            };
            1.0 - beta
        })
        .collect();
    let gammas = alphas
        .iter()
        .scan(1.0f64, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            schedule_family: ScheduleFamily::Linear,
        },
        alphas,
        gammas,
    })
}

impl NoiseSchedule {
    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Number of training timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `γ_t`, with `γ_0 = 1`.
    pub fn gamma(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.gammas[t - 1]
        }
    }
}

/// A K-step walk down the schedule with telescoped per-step alphas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePlan {
    pub t_indices: Vec<usize>,
    pub effective_alphas: Vec<f64>,
    pub effective_gammas: Vec<f64>,
}

impl InferencePlan {
    pub fn len(&self) -> usize {
        self.t_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_indices.is_empty()
    }
}

pub fn make_inference_plan(schedule: &NoiseSchedule, k: usize) -> Result<InferencePlan> {
    let steps = schedule.steps();
    if k == 0 || k > steps {
        return Err(Error::Parameter(format!(
            "inference steps must lie in 1..={steps}, got {k}"
        )));
    }
    let mut t_indices = Vec::with_capacity(k);
    for i in 1..=k {
        // round-half-up of i·T/K in exact integer arithmetic
        let mut t = (2 * i * steps + k) / (2 * k);
        if let Some(&prev) = t_indices.last() {
            t = t.max(prev + 1);
        }
        t_indices.push(t.min(steps));
    }
    let effective_gammas: Vec<f64> = t_indices.iter().map(|&t| schedule.gamma(t)).collect();
    let effective_alphas = effective_gammas
        .iter()
        .scan(1.0f64, |prev, &g| {
            let a = g / *prev;
            *prev = g;
            Some(a)
        })
        .collect();
    Ok(InferencePlan {
        t_indices,
        effective_alphas,
        effective_gammas,
    })
}
