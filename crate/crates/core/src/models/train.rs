//! Backpropagation through time with per-step normalization.
//!
//! Every step draws its data and noise from `(seed, step)` alone, so a run
//! resumed from a checkpoint retraces the uninterrupted one exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState, NonFinitePolicy};
use crate::autodiff::{Tape, Var};
use crate::dataio::noise::{add_noise, NoiseSpec};
use crate::diagnostics::metrics::psnr;
use crate::error::{Error, Result};
use crate::models::{RecurrentModel, Runner};
use crate::normalization::Normalized;
use crate::tensor::{Kernel, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f32,
    pub batch: usize,
    pub frames: usize,
    pub crop: usize,
    /// Noise standard deviation on the [0, 1] scale.
    pub noise_sigma: f32,
    pub seed: u64,
    /// Validation PSNR every this many steps; 0 disables it.
    pub val_every: u64,
    pub val_clips: usize,
    pub halt_on_non_finite: bool,
    pub clip_norm: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            batch: 4,
            frames: 7,
            crop: 64,
            noise_sigma: 30.0 / 255.0,
            seed: 0,
            val_every: 100,
            val_clips: 4,
            halt_on_non_finite: false,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.frames == 0 || self.crop == 0 {
            return Err(Error::config(
                "train.batch, train.frames and train.crop must be positive",
            ));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("train.lr must be ≥ 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma must be ≥ 0"));
        }
        Ok(())
    }
}

/// Source of clean training clips.
pub trait ClipSampler: Sync {
    /// `count` clips of `frames` frames at `crop × crop`, a pure function of
    /// `seed`.
    fn clips(
        &self,
        seed: u64,
        count: usize,
        frames: usize,
        crop: usize,
    ) -> Result<Vec<Vec<Tensor>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonFiniteEvent {
    pub step: u64,
    pub what: String,
}

/// Mixes a run seed with a step index and a stream tag.
pub fn derive_seed(seed: u64, step: u64, tag: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed
        ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_DATA: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_VAL: u64 = 3;

pub struct Trainer {
    pub model: RecurrentModel,
    pub cfg: TrainConfig,
    pub adam_cfg: AdamConfig,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: u64,
    pub history: Vec<LossRecord>,
    pub events: Vec<NonFiniteEvent>,
}

struct SampleGrads {
    loss: f64,
    kernels: Vec<Vec<f32>>,
    biases: Vec<Vec<f32>>,
}

impl Trainer {
    pub fn new(model: RecurrentModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam_cfg = AdamConfig {
            lr: cfg.lr,
            clip_norm: cfg.clip_norm,
            non_finite: NonFinitePolicy::Reject,
            ..AdamConfig::default()
        };
        let sizes: Vec<usize> = model
            .layers
            .iter()
            .flat_map(|l| [l.kernel.weights().len(), l.bias.len()])
            .collect();
        Ok(Self {
            adam: AdamState::new(&sizes),
            model,
            cfg,
            adam_cfg,
            step: 0,
            history: Vec::new(),
            events: Vec::new(),
        })
    }

    fn sample_loss(
        &self,
        normed: &[Option<Normalized>],
        clean: &[Tensor],
        noisy: &[Tensor],
    ) -> Result<SampleGrads> {
        let mut tape = Tape::new();
        let raw: Vec<Var> = self
            .model
            .layers
            .iter()
            .map(|l| tape.param(l.kernel.to_tensor()))
            .collect();
        let biases: Vec<Var> = self
            .model
            .layers
            .iter()
            .map(|l| tape.param(Tensor::new(vec![l.bias.len()], l.bias.clone()).expect("1-D")))
            .collect();
        let mut eff = Vec::with_capacity(raw.len());
        for (&k, n) in raw.iter().zip(normed) {
            eff.push(match n {
                Some(n) => n.apply(&mut tape, k)?,
                None => k,
            });
        }
        let xs: Vec<Var> = noisy.iter().map(|x| tape.constant(x.clone())).collect();
        let ys = self.model.unroll_tape(&mut tape, &eff, &biases, &xs)?;
        let mut terms = Vec::with_capacity(ys.len());
        for (y, c) in ys.iter().zip(clean) {
            let cv = tape.constant(c.clone());
            terms.push(tape.mse(*y, cv)?);
        }
        let loss = tape.sum_scalars(&terms)?;
        let value = tape.value(loss).item() as f64;
        let grads = tape.backward(loss)?;
        Ok(SampleGrads {
            loss: value,
            kernels: raw
                .iter()
                .zip(&self.model.layers)
                .map(|(&v, l)| grads.get_or_zeros(v, l.kernel.weights().len()))
                .collect(),
            biases: biases
                .iter()
                .zip(&self.model.layers)
                .map(|(&v, l)| grads.get_or_zeros(v, l.bias.len()))
                .collect(),
        })
    }

    fn noisy_batch(&self, clips: &[Vec<Tensor>], step: u64) -> Vec<Vec<Tensor>> {
        let spec = NoiseSpec {
            sigma: self.cfg.noise_sigma,
            seed: derive_seed(self.cfg.seed, step, TAG_NOISE),
            clip: false,
        };
        let t = self.cfg.frames as u64;
        clips
            .iter()
            .enumerate()
            .map(|(b, clip)| {
                clip.iter()
                    .enumerate()
                    .map(|(i, f)| add_noise(f, &spec, b as u64 * t + i as u64))
                    .collect()
            })
            .collect()
    }

    /// Mean PSNR of the denoised validation clips with the given kernels.
    pub fn validate(&self, sampler: &dyn ClipSampler, kernels: Vec<Kernel>) -> Result<f64> {
        let clips = sampler.clips(
            derive_seed(self.cfg.seed, u64::MAX, TAG_VAL),
            self.cfg.val_clips.max(1),
            self.cfg.frames,
            self.cfg.crop,
        )?;
        let noisy = self.noisy_batch(&clips, u64::MAX);
        let runner = Runner::from_parts(&self.model, kernels);
        let mut total = 0.0;
        let mut count = 0usize;
        for (clean, noisy) in clips.iter().zip(&noisy) {
            let mut state = crate::models::RecurrentState::new();
            for (c, x) in clean.iter().zip(noisy) {
                let y = runner.step(&mut state, x)?.y;
                total += psnr(&y, c, 1.0)?;
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// Runs one optimisation step and returns its record.
    pub fn step_once(&mut self, sampler: &dyn ClipSampler) -> Result<LossRecord> {
        let s = self.step;
        let clips = sampler.clips(
            derive_seed(self.cfg.seed, s, TAG_DATA),
            self.cfg.batch,
            self.cfg.frames,
            self.cfg.crop,
        )?;
        let noisy = self.noisy_batch(&clips, s);
        let normed = self.model.normalize_step()?;

        let samples: Vec<SampleGrads> = (0..clips.len())
            .into_par_iter()
            .map(|b| self.sample_loss(&normed, &clips[b], &noisy[b]))
            .collect::<Result<_>>()?;

        let scale = 1.0 / samples.len() as f32;
        let mut loss = 0.0;
        let mut kg: Vec<Vec<f32>> = samples[0]
            .kernels
            .iter()
            .map(|g| vec![0.0; g.len()])
            .collect();
        let mut bg: Vec<Vec<f32>> = samples[0]
            .biases
            .iter()
            .map(|g| vec![0.0; g.len()])
            .collect();
        for smp in &samples {
            loss += smp.loss;
            for (acc, g) in kg.iter_mut().zip(&smp.kernels) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
            for (acc, g) in bg.iter_mut().zip(&smp.biases) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
        loss /= samples.len() as f64;
        kg.iter_mut()
            .chain(bg.iter_mut())
            .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));

        let val_psnr = if self.cfg.val_every > 0 && s % self.cfg.val_every == 0 {
            let kernels = normed
                .iter()
                .zip(&self.model.layers)
                .map(|(n, l)| {
                    n.as_ref()
                        .map_or_else(|| l.kernel.clone(), Normalized::effective)
                })
                .collect();
            Some(self.validate(sampler, kernels)?)
        } else {
            None
        };

        if !loss.is_finite() {
            self.events.push(NonFiniteEvent {
                step: s,
                what: format!("loss = {loss}"),
            });
            if self.cfg.halt_on_non_finite {
                return Err(Error::NonFinite(format!("training loss at step {s}")));
            }
        }

        let mut grads: Vec<&[f32]> = Vec::new();
        for (k, b) in kg.iter().zip(&bg) {
            grads.push(k);
            grads.push(b);
        }
        let mut params: Vec<&mut [f32]> = Vec::new();
        for l in &mut self.model.layers {
            params.push(l.kernel.weights_mut());
            params.push(&mut l.bias);
        }
        match adam_step(&mut params, &grads, &mut self.adam, &self.adam_cfg) {
            Ok(_) => {}
            Err(Error::NonFinite(msg)) => {
                self.events.push(NonFiniteEvent {
                    step: s,
                    what: format!("gradient: {msg}; update skipped"),
                });
                if self.cfg.halt_on_non_finite {
                    return Err(Error::NonFinite(format!("gradient at step {s}")));
                }
            }
            Err(e) => return Err(e),
        }

        self.model.frozen = None;
        self.step += 1;
        let rec = LossRecord {
            step: s,
            loss,
            val_psnr,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `cfg.steps` steps are done, calling `on_step` after each.
    pub fn run(
        &mut self,
        sampler: &dyn ClipSampler,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let rec = self.step_once(sampler)?;
            on_step(&rec);
        }
        Ok(())
    }

    /// Renders the loss curve as `step,loss,val_psnr` CSV.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss,val_psnr\n");
        for r in &self.history {
            let v = r.val_psnr.map(|p| format!("{p}")).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, v));
        }
        out
    }
}

/// Means of consecutive `window`-sized chunks of the loss curve.
pub fn windowed_means(history: &[LossRecord], window: usize) -> Vec<f64> {
    history
        .chunks(window.max(1))
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect()
}
