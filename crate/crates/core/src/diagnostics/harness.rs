//! Long-sequence stability test: run a processor over a noisy stream,
//! reset its state whenever PSNR falls below the failure level, and
//! report how many frames each run survived.

use serde::{Deserialize, Serialize};

use crate::dataio::noise::{add_noise, NoiseSpec};
use crate::diagnostics::metrics::{extended_f64, onset_deciles, psnr, Deciles};
use crate::error::{Error, Result};
use crate::models::{RecurrentState, Runner};
use crate::tensor::Tensor;

/// A stateful per-frame denoiser.
pub trait FrameProcessor {
    fn process(&mut self, x: &Tensor) -> Result<Tensor>;
    /// Zeroes the recurrent state.
    fn reset(&mut self);
}

pub struct ModelProcessor {
    pub runner: Runner,
    pub state: RecurrentState,
}

impl ModelProcessor {
    pub fn new(runner: Runner) -> Self {
        Self {
            runner,
            state: RecurrentState::new(),
        }
    }
}

impl FrameProcessor for ModelProcessor {
    fn process(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.runner.step(&mut self.state, x)?.y)
    }

    fn reset(&mut self) {
        self.state.reset();
    }
}

/// Returns its input.
pub struct IdentityProcessor;

impl FrameProcessor for IdentityProcessor {
    fn process(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn reset(&mut self) {}
}

/// Wraps a processor and overwrites its output with a constant at fixed
/// frame numbers (counted from 1 over the whole stream).
pub struct FailureInjector<P> {
    pub inner: P,
    pub fail_at: Vec<usize>,
    /// 2.0 rather than 1.0: an all-ones frame against mid-gray is still
    /// 6.02 dB, above the 0 dB failure level.
    pub value: f32,
    frame: usize,
}

impl<P: FrameProcessor> FailureInjector<P> {
    pub fn new(inner: P, fail_at: Vec<usize>) -> Self {
        Self {
            inner,
            fail_at,
            value: 2.0,
            frame: 0,
        }
    }
}

impl<P: FrameProcessor> FrameProcessor for FailureInjector<P> {
    fn process(&mut self, x: &Tensor) -> Result<Tensor> {
        self.frame += 1;
        let y = self.inner.process(x)?;
        if self.fail_at.contains(&self.frame) {
            Ok(Tensor::full(y.shape(), self.value))
        } else {
            Ok(y)
        }
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    /// A frame fails when its PSNR is below this (dB), or is NaN.
    pub psnr_fail: f64,
    pub max_frames: Option<usize>,
    /// Keep every `trace_every`-th PSNR value; 0 keeps none.
    pub trace_every: usize,
    pub peak: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            psnr_fail: 0.0,
            max_frames: None,
            trace_every: 1,
            peak: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub frame: usize,
    #[serde(with = "extended_f64")]
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Frames from each reset up to and including the failing frame.
    pub onsets: Vec<usize>,
    pub deciles: Deciles,
    pub frames: usize,
    pub trace: Vec<TracePoint>,
}

impl StabilityReport {
    pub fn unstable(&self) -> bool {
        !self.onsets.is_empty()
    }

    /// `frame,psnr` rows.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("frame,psnr\n");
        for p in &self.trace {
            s.push_str(&format!("{},{}\n", p.frame, p.psnr));
        }
        s
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            onsets: &'a [usize],
            #[serde(with = "extended_f64")]
            d1: f64,
            #[serde(with = "extended_f64")]
            d9: f64,
            decile_fallback: bool,
            frames: usize,
        }
        serde_json::to_string_pretty(&Summary {
            onsets: &self.onsets,
            d1: self.deciles.d1,
            d9: self.deciles.d9,
            decile_fallback: self.deciles.fallback,
            frames: self.frames,
        })
        .expect("plain data")
    }
}

/// Noisy frame `i` is clean frame `i` plus noise keyed by `(noise.seed, i)`.
pub fn stability_harness(
    proc_: &mut dyn FrameProcessor,
    clean: impl IntoIterator<Item = Result<Tensor>>,
    noise: &NoiseSpec,
    cfg: &HarnessConfig,
) -> Result<StabilityReport> {
    noise.validate()?;
    let mut onsets = Vec::new();
    let mut trace = Vec::new();
    let mut since_reset = 0usize;
    let mut frames = 0usize;
    proc_.reset();
    for (i, c) in clean.into_iter().enumerate() {
        if cfg.max_frames.is_some_and(|m| i >= m) {
            break;
        }
        let c = c?;
        let x = add_noise(&c, noise, i as u64);
        let y = proc_.process(&x)?;
        let p = psnr(&y, &c, cfg.peak)?;
        frames += 1;
        since_reset += 1;
        if cfg.trace_every > 0 && i % cfg.trace_every == 0 {
            trace.push(TracePoint { frame: i, psnr: p });
        }
        if !(p >= cfg.psnr_fail) {
            onsets.push(since_reset);
            since_reset = 0;
            proc_.reset();
        }
    }
    if frames < 2 {
        return Err(Error::config(format!(
            "stability harness needs at least 2 frames, stream gave {frames}"
        )));
    }
    Ok(StabilityReport {
        deciles: onset_deciles(&onsets),
        onsets,
        frames,
        trace,
    })
}
