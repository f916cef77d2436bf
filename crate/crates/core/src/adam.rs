//! Adam with bias correction, optional global-norm clipping, and an explicit
//! policy for non-finite gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    /// Refuse the step and leave parameters and moments untouched.
    #[default]
    Reject,
    /// Replace NaN by 0, clamp everything to `±clamp_bound`, count the hits.
    ClampAndRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global L2 clip threshold; `None` disables clipping.
    pub clip_norm: Option<f32>,
    pub non_finite: NonFinitePolicy,
    pub clamp_bound: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            non_finite: NonFinitePolicy::Reject,
            clamp_bound: 1e6,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment buffers, one per parameter tensor, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Gradient entries that were non-finite (clamp policy only).
    pub clamped: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<StepReport> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::shape(format!(
                "adam: parameter {i} has {} values, gradient {}, moments {}",
                p.len(),
                g.len(),
                state.first[i].len()
            )));
        }
    }

    let mut report = StepReport::default();
    let mut owned: Vec<Vec<f32>> = Vec::new();
    let bad: usize = grads
        .iter()
        .map(|g| g.iter().filter(|v| !v.is_finite()).count())
        .sum();
    if bad > 0 {
        match cfg.non_finite {
            NonFinitePolicy::Reject => {
                return Err(Error::NonFinite(format!("{bad} gradient entries")));
            }
            NonFinitePolicy::ClampAndRecord => {
                report.clamped = bad;
                let b = cfg.clamp_bound;
                owned = grads
                    .iter()
                    .map(|g| {
                        g.iter()
                            .map(|&v| if v.is_nan() { 0.0 } else { v.clamp(-b, b) })
                            .collect()
                    })
                    .collect();
            }
        }
    }
    let grads: Vec<&[f32]> = if owned.is_empty() {
        grads.to_vec()
    } else {
        owned.iter().map(Vec::as_slice).collect()
    };

    report.grad_norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    let mut gscale = 1.0f32;
    if let Some(c) = cfg.clip_norm {
        if report.grad_norm > c as f64 {
            gscale = (c as f64 / report.grad_norm) as f32;
            report.clipped = true;
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            let gj = g[j] * gscale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(report)
}
