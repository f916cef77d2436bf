//! Adversarial input search for the spatio-temporal receptive field
//! (STRF): find `X ∈ [0,1]` over frames `t = −τ..τ` that maximizes a loss
//! on the output at `t = 0`, then look at which input frames moved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState, NonFinitePolicy};
use crate::autodiff::Tape;
use crate::diagnostics::metrics::extended_f64;
use crate::error::{Error, Result};
use crate::models::train::derive_seed;
use crate::models::{InferenceOptions, RecurrentModel, RecurrentState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrfLoss {
    /// `‖y_0‖`.
    NormY0,
    /// `|y_0|` at the centre pixel, channel 0.
    CenterPixel,
}

impl std::str::FromStr for StrfLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm_y0" => Ok(Self::NormY0),
            "center_pixel" => Ok(Self::CenterPixel),
            _ => Err(Error::config(format!(
                "unknown STRF loss `{s}` (norm_y0, center_pixel)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrfConfig {
    pub loss: StrfLoss,
    pub tau: usize,
    pub n: usize,
    pub iters: usize,
    pub lr: f32,
    pub restarts: usize,
    /// Mean absolute change of a frame that counts as influential.
    pub theta_infl: f64,
    /// `max_{t>0} ‖y_t‖ / ‖y_0‖` above this is divergence.
    pub theta_div: f64,
    pub seed: u64,
}

impl Default for StrfConfig {
    fn default() -> Self {
        Self {
            loss: StrfLoss::CenterPixel,
            tau: 40,
            n: 64,
            iters: 1000,
            lr: 1e-2,
            restarts: 3,
            theta_infl: 1e-3,
            theta_div: 1e3,
            seed: 0,
        }
    }
}

impl StrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.restarts == 0 {
            return Err(Error::config("strf.n and strf.restarts must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("strf.lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Bounded,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrfReport {
    /// Optimized inputs, `2τ+1` frames from `t = −τ`.
    #[serde(skip)]
    pub x: Vec<Tensor>,
    #[serde(skip)]
    pub y: Vec<Tensor>,
    /// Loss per iteration of the best restart.
    pub loss_trace: Vec<f64>,
    /// Final loss of each restart, and the running best over them.
    pub restart_losses: Vec<f64>,
    pub best_so_far: Vec<f64>,
    pub best_restart: usize,
    /// `e_t = mean |x_t − x_t^init|`, indexed from `t = −τ`.
    pub influence: Vec<f64>,
    pub temporal_extent: usize,
    pub verdict: Verdict,
    pub diverged: bool,
    #[serde(with = "extended_f64")]
    pub growth: f64,
    /// The gradient w.r.t. X was exactly zero at initialization on every
    /// restart.
    pub dead_gradient: bool,
    /// Optimizer steps that hit non-finite gradients (clamped).
    pub clamped_steps: usize,
}

struct Restart {
    x: Vec<Tensor>,
    init: Vec<Tensor>,
    trace: Vec<f64>,
    dead: bool,
    clamped: usize,
}

fn objective(
    model: &RecurrentModel,
    xs: &[Tensor],
    loss: StrfLoss,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let (k, b) = model.constant_params(&mut tape)?;
    let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let ys = model.unroll_tape(&mut tape, &k, &b, &vars)?;
    let y0 = *ys.last().expect("at least one frame");
    let l = match loss {
        StrfLoss::NormY0 => tape.l2_norm(y0),
        StrfLoss::CenterPixel => tape.center_pixel_abs(y0)?,
    };
    let value = tape.value(l).item() as f64;
    let g = tape.backward(l)?;
    Ok((
        value,
        vars.iter()
            .zip(xs)
            .map(|(&v, x)| g.get_or_zeros(v, x.len()))
            .collect(),
    ))
}

fn run_restart(model: &RecurrentModel, cfg: &StrfConfig, seed: u64) -> Result<Restart> {
    let c = model.spec.in_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<Tensor> = (0..2 * cfg.tau + 1)
        .map(|_| Tensor::from_fn(&[cfg.n, cfg.n, c], |_| rng.random::<f32>()))
        .collect();
    // only frames up to t = 0 reach y_0
    let mut x: Vec<Tensor> = init[..=cfg.tau].to_vec();
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        non_finite: NonFinitePolicy::ClampAndRecord,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&vec![x[0].len(); x.len()]);
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    let mut dead = false;
    let mut clamped = 0;
    for it in 0..=cfg.iters {
        let (value, grads) = objective(model, &x, cfg.loss)?;
        trace.push(value);
        if it == 0 {
            dead = grads.iter().all(|g| g.iter().all(|&v| v == 0.0));
        }
        if it == cfg.iters {
            break;
        }
        // ascent: Adam minimizes −L
        let neg: Vec<Vec<f32>> = grads
            .into_iter()
            .map(|g| g.into_iter().map(|v| -v).collect())
            .collect();
        let grad_refs: Vec<&[f32]> = neg.iter().map(|g| g.as_slice()).collect();
        let mut params: Vec<&mut [f32]> = x.iter_mut().map(|t| t.data_mut()).collect();
        let rep = adam_step(&mut params, &grad_refs, &mut adam, &adam_cfg)?;
        if rep.clamped > 0 {
            clamped += 1;
        }
        for t in &mut x {
            t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    x.extend_from_slice(&init[cfg.tau + 1..]);
    Ok(Restart {
        x,
        init,
        trace,
        dead,
        clamped,
    })
}

/// `max_{t>0} ‖y_t‖ / ‖y_0‖`; ∞ when an output is non-finite.
pub fn growth_ratio(y: &[Tensor], t0: usize) -> f64 {
    let y0 = y[t0].l2_norm();
    let mut g = 0.0f64;
    for yt in &y[t0 + 1..] {
        let v = yt.l2_norm();
        if !v.is_finite() {
            return f64::INFINITY;
        }
        g = g.max(if y0 > 0.0 {
            v / y0
        } else if v > 0.0 {
            f64::INFINITY
        } else {
            0.0
        });
    }
    if !y0.is_finite() {
        return f64::INFINITY;
    }
    g
}

/// The model must be inference-ready (raw, or normalized and frozen).
pub fn strf_search(model: &RecurrentModel, cfg: &StrfConfig) -> Result<StrfReport> {
    cfg.validate()?;
    model.inference_kernels()?;
    let restarts: Vec<Restart> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(model, cfg, derive_seed(cfg.seed, r as u64, 0x57F)))
        .collect::<Result<_>>()?;

    let restart_losses: Vec<f64> = restarts
        .iter()
        .map(|r| *r.trace.last().expect("non-empty"))
        .collect();
    let mut best_so_far = Vec::with_capacity(restart_losses.len());
    let mut best = 0;
    for (i, &l) in restart_losses.iter().enumerate() {
        // NaN losses never win
        if i == 0 || l > restart_losses[best] || restart_losses[best].is_nan() {
            best = i;
        }
        best_so_far.push(restart_losses[best]);
    }
    let dead_gradient = restarts.iter().all(|r| r.dead);
    let clamped_steps = restarts.iter().map(|r| r.clamped).sum();
    let r = restarts.into_iter().nth(best).expect("restarts > 0");

    let influence: Vec<f64> =
        r.x.iter()
            .zip(&r.init)
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&p, &q)| (p - q).abs() as f64)
                    .sum::<f64>()
                    / a.len() as f64
            })
            .collect();
    let temporal_extent = influence[..=cfg.tau]
        .iter()
        .filter(|&&e| e > cfg.theta_infl)
        .count();

    let runner = model.runner(InferenceOptions::default())?;
    let mut state = RecurrentState::new();
    let y: Vec<Tensor> =
        r.x.iter()
            .map(|x| Ok(runner.step(&mut state, x)?.y))
            .collect::<Result<_>>()?;
    let growth = growth_ratio(&y, cfg.tau);
    let diverged = !(growth <= cfg.theta_div);
    let verdict = if influence[0] > cfg.theta_infl || diverged {
        Verdict::Unbounded
    } else {
        Verdict::Bounded
    };
    Ok(StrfReport {
        x: r.x,
        y,
        loss_trace: r.trace,
        restart_losses,
        best_so_far,
        best_restart: best,
        influence,
        temporal_extent,
        verdict,
        diverged,
        growth,
        dead_gradient,
        clamped_steps,
    })
}

/// Every `every`-th frame side by side with a 1-pixel gap, clamped to
/// [0, 1] for display.
pub fn frame_strip(frames: &[Tensor], every: usize) -> Result<Tensor> {
    let picked: Vec<&Tensor> = frames.iter().step_by(every.max(1)).collect();
    let first = picked.first().ok_or_else(|| Error::shape("no frames"))?;
    let (h, w, c) = first.hwc()?;
    let width = picked.len() * (w + 1) - 1;
    let mut out = Tensor::zeros(&[h, width, c]);
    let o = out.data_mut();
    for (k, f) in picked.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = f.at3(y, x, ch);
                    o[(y * width + k * (w + 1) + x) * c + ch] = if v.is_finite() {
                        v.clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                }
            }
        }
    }
    Ok(out)
}
