//! Output-norm traces of freshly initialized models on random input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::metrics::extended_f64;
use crate::error::Result;
use crate::models::{ArchitectureSpec, Init, RecurrentModel, RecurrentState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInput {
    /// Fresh i.i.d. U[0, 1] frame every step.
    Uniform,
    Constant(f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub frames: usize,
    pub n: usize,
    pub init: Init,
    /// Rescale every layer to this σ1 after initialization.
    pub rescale_sigma: Option<f64>,
    pub input: ProbeInput,
    /// Growth at or below this is bounded.
    pub bounded_max: f64,
    /// Growth above this is divergent.
    pub divergent_min: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            frames: 50,
            n: 32,
            init: Init::Gaussian(0.1),
            rescale_sigma: None,
            input: ProbeInput::Uniform,
            bounded_max: 10.0,
            divergent_min: 1e3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthClass {
    Bounded,
    Intermediate,
    Divergent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrace {
    pub architecture: String,
    pub seed: u64,
    pub norms: Vec<f64>,
    /// `max_t ‖y_t‖ / ‖y_0‖`, ∞ once any output is non-finite.
    #[serde(with = "extended_f64")]
    pub growth: f64,
    pub class: GrowthClass,
}

/// The model a probe runs: `init`, then the optional σ1 rescale.
pub fn probe_model(
    spec: &ArchitectureSpec,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<RecurrentModel> {
    let mut m = RecurrentModel::build(spec.clone(), cfg.init, seed)?;
    if let Some(s) = cfg.rescale_sigma {
        m.rescale_layers(s, cfg.n)?;
    }
    Ok(m)
}

pub fn probe_frames(c: usize, cfg: &ProbeConfig, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9);
    (0..cfg.frames)
        .map(|_| match cfg.input {
            ProbeInput::Uniform => Tensor::from_fn(&[cfg.n, cfg.n, c], |_| rng.random::<f32>()),
            ProbeInput::Constant(v) => Tensor::full(&[cfg.n, cfg.n, c], v),
        })
        .collect()
}

pub fn classify(growth: f64, cfg: &ProbeConfig) -> GrowthClass {
    if growth <= cfg.bounded_max {
        GrowthClass::Bounded
    } else if growth > cfg.divergent_min || growth.is_nan() {
        GrowthClass::Divergent
    } else {
        GrowthClass::Intermediate
    }
}

/// Runs an already built model over the probe input for `seed`.
pub fn trace_model(model: &RecurrentModel, cfg: &ProbeConfig, seed: u64) -> Result<ProbeTrace> {
    let runner = model.runner(Default::default())?;
    let mut state = RecurrentState::new();
    let mut norms = Vec::with_capacity(cfg.frames);
    for x in probe_frames(model.spec.in_channels, cfg, seed) {
        norms.push(runner.step(&mut state, &x)?.y.l2_norm());
    }
    let y0 = norms.first().copied().unwrap_or(0.0);
    let mut growth = 0.0f64;
    for &v in &norms {
        if !v.is_finite() || !y0.is_finite() {
            growth = f64::INFINITY;
            break;
        }
        growth = growth.max(if y0 > 0.0 {
            v / y0
        } else if v > 0.0 {
            f64::INFINITY
        } else {
            1.0
        });
    }
    Ok(ProbeTrace {
        architecture: model.spec.name(),
        seed,
        class: classify(growth, cfg),
        norms,
        growth,
    })
}

/// One trace per (architecture, seed), in that order.
pub fn divergence_probe(
    specs: &[ArchitectureSpec],
    seeds: &[u64],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeTrace>> {
    let jobs: Vec<(&ArchitectureSpec, u64)> = specs
        .iter()
        .flat_map(|s| seeds.iter().map(move |&k| (s, k)))
        .collect();
    jobs.into_par_iter()
        .map(|(spec, seed)| trace_model(&probe_model(spec, cfg, seed)?, cfg, seed))
        .collect()
}

/// `architecture,seed,t,norm` rows.
pub fn traces_csv(traces: &[ProbeTrace]) -> String {
    let mut s = String::from("architecture,seed,t,norm\n");
    for tr in traces {
        for (t, v) in tr.norms.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", tr.architecture, tr.seed, t, v));
        }
    }
    s
}
