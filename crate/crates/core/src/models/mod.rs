//! Recurrent denoisers `h_t = φ(h_{t−1}, x_t)`, `y_t = ψ(h_t)`.
//!
//! DnCNN-style backbones are a stack of convolutions with ReLU between
//! them; the ResNet backbone is a head conv, residual blocks, and a tail
//! conv. Both predict the noise and output `y = x − f(x)`.
//!
//! Recurrence wiring (schematic reconstruction, indices configurable via
//! [`ArchitectureSpec::feature_tap`]):
//!
//! | recurrence      | DnCNN                                   | ResNet                          |
//! |-----------------|-----------------------------------------|---------------------------------|
//! | `frame`         | `y_{t−1}` joins the input               | same                            |
//! | `feature`       | output of conv `max(D/2−1, 1)` → conv 1 | middle block output → fusion    |
//! | `rlsp`          | output of conv `D−2` joins the input    | last block output → fusion      |
//! | `feature_shift` | conv 0 output of `t−1` → conv 1         | head output of `t−1` → fusion   |
//! | `none_multi`    | `x_{t−2}, x_{t−1}, x_t` as input        | same                            |

pub mod arch;
pub mod checkpoint;
pub mod train;
pub mod wiring;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use arch::{ArchitectureSpec, Backbone, LayerShape, PathFactor, Recurrence};
pub use wiring::{EvalOps, Feedback, Ops, State, TapeOps};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::normalization::{
    dampen_kernel_inputs, normalize, NormState, Normalized, NormalizerConfig, Scheme,
};
use crate::spectral::{
    fft_exact_spectrum, power_iteration_layer, spectral_norm_layer, PowerIterationState,
    COLD_START_MIN_ITERS, COLD_START_TOL,
};
use crate::tensor::{Kernel, Padding, Tensor};

/// Longest sequence [`RecurrentModel::unroll_tape`] will record.
pub const MAX_UNROLL: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `N(0, std²)` for every weight.
    Gaussian(f32),
    /// `N(0, 2/fan_in)`.
    He,
    /// `|N(0, std²)|` on every layer but the output one, which gets
    /// `−|N(0, std²)|`. Hidden ReLUs never cut the signal and the residual
    /// output `x − f` keeps the sign of `x`, so per-layer gains compose
    /// along every recurrent path, output feedback included.
    FoldedGaussian(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kernel: Kernel,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentModel {
    pub spec: ArchitectureSpec,
    pub layers: Vec<ConvLayer>,
    pub pad: Padding,
    pub norm: NormalizerConfig,
    /// Grid size the layer normalization is computed on.
    pub norm_n: usize,
    /// Whether the output conv is normalized too.
    pub normalize_output: bool,
    pub norm_states: Vec<Option<NormState>>,
    /// `α·K̃` fixed for inference.
    pub frozen: Option<Vec<Kernel>>,
}

/// Dampening of the recurrent input at inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampenRoute {
    Features,
    Kernel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub lambda: f64,
    pub route: DampenRoute,
    /// Remove the recurrent input entirely (the single-frame variant).
    pub drop_feedback: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            route: DampenRoute::Features,
            drop_feedback: false,
        }
    }
}

/// Recurrent state of a stream plus its frame counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecurrentState {
    pub inner: Option<State<Tensor>>,
    pub frames_seen: usize,
}

impl RecurrentState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zeroes every entry and the counter, keeping shapes.
    pub fn reset(&mut self) {
        if let Some(s) = &mut self.inner {
            for f in &mut s.frames {
                f.data_mut().fill(0.0);
            }
            if let Some(h) = &mut s.hidden {
                h.data_mut().fill(0.0);
            }
        }
        self.frames_seen = 0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub y: Tensor,
    /// `y` contains NaN or ±∞.
    pub diverged: bool,
}

impl RecurrentModel {
    pub fn build(spec: ArchitectureSpec, init: Init, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let output = spec.output_layer();
        for (li, shape) in spec.layers().into_iter().enumerate() {
            let len = shape.k * shape.k * shape.m_in * shape.m_out;
            let std = match init {
                Init::Gaussian(s) | Init::FoldedGaussian(s) => s,
                Init::He => (2.0 / (shape.k * shape.k * shape.m_in) as f32).sqrt(),
            };
            let dist = Normal::new(0.0f32, std)
                .map_err(|e| Error::config(format!("initialization std {std}: {e}")))?;
            let mut w: Vec<f32> = (0..len).map(|_| dist.sample(&mut rng)).collect();
            if let Init::FoldedGaussian(_) = init {
                let sign = if li == output { -1.0 } else { 1.0 };
                w.iter_mut().for_each(|v| *v = sign * v.abs());
            }
            layers.push(ConvLayer {
                kernel: Kernel::new(shape.k, shape.m_in, shape.m_out, w)?,
                bias: vec![0.0; shape.m_out],
                name: shape.name,
            });
        }
        let n = layers.len();
        Ok(Self {
            spec,
            layers,
            pad: Padding::Circular,
            norm: NormalizerConfig::default(),
            norm_n: 64,
            normalize_output: true,
            norm_states: vec![None; n],
            frozen: None,
        })
    }

    /// Attaches a normalizer; states are seeded per layer from `seed`.
    pub fn with_normalizer(mut self, cfg: NormalizerConfig, n: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        for l in &self.layers {
            cfg.validate_for(&l.kernel, n)?;
        }
        self.norm_states = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if self.is_normalized(i, cfg.scheme) {
                    NormState::for_scheme(cfg.scheme, &l.kernel, n, seed.wrapping_add(i as u64))
                } else {
                    None
                }
            })
            .collect();
        self.norm = cfg;
        self.norm_n = n;
        self.frozen = None;
        Ok(self)
    }

    fn is_normalized(&self, layer: usize, scheme: Scheme) -> bool {
        scheme != Scheme::None && (self.normalize_output || layer != self.spec.output_layer())
    }

    pub fn kernels(&self) -> Vec<Kernel> {
        self.layers.iter().map(|l| l.kernel.clone()).collect()
    }

    pub fn biases(&self) -> Vec<Vec<f32>> {
        self.layers.iter().map(|l| l.bias.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel.weights().len() + l.bias.len())
            .sum()
    }

    /// One normalization pass per layer (advancing the power iteration).
    /// Unnormalized layers yield `None`.
    pub fn normalize_step(&mut self) -> Result<Vec<Option<Normalized>>> {
        let cfg = self.norm.clone();
        let pad = self.pad;
        self.layers
            .iter()
            .zip(self.norm_states.iter_mut())
            .map(|(l, st)| match st {
                Some(st) => normalize(&l.kernel, &cfg, st, pad).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    /// Fixes `α·K̃` for inference from one more normalization pass.
    pub fn freeze(&mut self) -> Result<()> {
        if self.norm.scheme == Scheme::None {
            self.frozen = None;
            return Ok(());
        }
        let normed = self.normalize_step()?;
        self.frozen = Some(
            normed
                .into_iter()
                .zip(&self.layers)
                .map(|(n, l)| n.map_or_else(|| l.kernel.clone(), |n| n.effective()))
                .collect(),
        );
        Ok(())
    }

    /// Runs the layer power iterations to convergence before freezing.
    pub fn freeze_converged(&mut self) -> Result<()> {
        for (l, st) in self.layers.iter().zip(self.norm_states.iter_mut()) {
            if let Some(NormState::Layer(s)) = st {
                power_iteration_layer(
                    &l.kernel,
                    self.pad,
                    s,
                    COLD_START_MIN_ITERS,
                    Some(COLD_START_TOL),
                )?;
            }
            if let Some(NormState::Reshaped(u)) = st {
                crate::spectral::power_iteration_kernel2d(&l.kernel, u, 500)?;
            }
        }
        self.freeze()
    }

    /// Kernels used in forward passes: raw, or frozen `α·K̃`.
    pub fn inference_kernels(&self) -> Result<Vec<Kernel>> {
        match (&self.frozen, self.norm.scheme) {
            (Some(k), _) => Ok(k.clone()),
            (None, Scheme::None) => Ok(self.kernels()),
            (None, _) => Err(Error::config(
                "normalized model used for inference before freezing its kernels",
            )),
        }
    }

    pub fn runner(&self, opts: InferenceOptions) -> Result<Runner> {
        Runner::new(self, opts)
    }

    /// Single step with default inference options.
    pub fn step(&self, state: &mut RecurrentState, x: &Tensor) -> Result<StepOutput> {
        self.runner(InferenceOptions::default())?.step(state, x)
    }

    /// Runs a whole sequence from the zero state.
    pub fn run(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let runner = self.runner(InferenceOptions::default())?;
        let mut state = RecurrentState::new();
        xs.iter()
            .map(|x| Ok(runner.step(&mut state, x)?.y))
            .collect()
    }

    /// Records a zero-state unroll of `xs` with the given kernel and bias
    /// variables and returns the output variables.
    pub fn unroll_tape(
        &self,
        tape: &mut Tape,
        kernels: &[Var],
        biases: &[Var],
        xs: &[Var],
    ) -> Result<Vec<Var>> {
        if xs.len() > MAX_UNROLL {
            return Err(Error::Guardrail(format!(
                "unroll of {} frames exceeds {MAX_UNROLL}; use truncated runs",
                xs.len()
            )));
        }
        let Some(&first) = xs.first() else {
            return Ok(Vec::new());
        };
        let (h, w, _) = tape.value(first).hwc()?;
        let mut ops = TapeOps {
            tape,
            kernels,
            biases,
            pad: self.pad,
        };
        let mut state = State::zero(&self.spec, &mut ops, h, w);
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let (y, next) = wiring::forward(&self.spec, &mut ops, x, &state, Feedback::Concat)?;
            ys.push(y);
            state = next;
        }
        Ok(ys)
    }

    /// Registers the inference kernels and biases as tape constants.
    pub fn constant_params(&self, tape: &mut Tape) -> Result<(Vec<Var>, Vec<Var>)> {
        let kernels = self
            .inference_kernels()?
            .iter()
            .map(|k| tape.constant(k.to_tensor()))
            .collect();
        let biases = self
            .layers
            .iter()
            .map(|l| tape.constant(Tensor::new(vec![l.bias.len()], l.bias.clone()).expect("1-D")))
            .collect();
        Ok((kernels, biases))
    }

    /// Scales every kernel so its layer σ1 on an `n × n` grid is `target`.
    pub fn rescale_layers(&mut self, target: f64, n: usize) -> Result<()> {
        for l in &mut self.layers {
            let s = layer_sigma1(&l.kernel, n, self.pad)?;
            if s > 0.0 {
                l.kernel = l.kernel.scale((target / s) as f32);
            }
        }
        self.frozen = None;
        Ok(())
    }

    /// Zeroes the kernel slice that reads the recurrent state.
    pub fn zero_feedback(&mut self) -> Result<()> {
        if let Some((idx, start, count)) = self.spec.feedback_slice() {
            let k = &self.layers[idx].kernel;
            self.layers[idx].kernel = dampen_kernel_inputs(k, start, count, 0.0)?;
            if let Some(fr) = &mut self.frozen {
                fr[idx] = dampen_kernel_inputs(&fr[idx], start, count, 0.0)?;
            }
        }
        Ok(())
    }

    /// Product of per-layer σ1 along the recurrent path.
    pub fn lipschitz_upper_bound(&self, n: usize) -> Result<LipschitzBound> {
        let kernels = self.inference_kernels()?;
        let mut factors = Vec::new();
        let mut bound = 1.0f64;
        let mut residual = false;
        for f in self.spec.recurrent_path() {
            let value = match f {
                PathFactor::Layer(i) => layer_sigma1(&kernels[i], n, self.pad)?,
                PathFactor::Residual(a, b) => {
                    residual = true;
                    1.0 + layer_sigma1(&kernels[a], n, self.pad)?
                        * layer_sigma1(&kernels[b], n, self.pad)?
                }
            };
            bound *= value;
            factors.push((f, value));
        }
        let recurrent = !factors.is_empty();
        Ok(LipschitzBound {
            bound: if recurrent { bound } else { 0.0 },
            factors,
            residual_adjusted: residual,
            recurrent,
        })
    }
}

/// Layer σ1: exact spectrum for small problems, power iteration otherwise.
pub fn layer_sigma1(kernel: &Kernel, n: usize, pad: Padding) -> Result<f64> {
    let m = kernel.m_in().max(kernel.m_out());
    if pad == Padding::Circular && m <= 32 && n <= 32 {
        Ok(fft_exact_spectrum(kernel, n)?.sigma1())
    } else {
        spectral_norm_layer(kernel, n, pad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBound {
    /// `Π σ1` over the path; 0 for models without feedback.
    pub bound: f64,
    pub factors: Vec<(PathFactor, f64)>,
    /// Residual blocks were bounded by `1 + σa·σb`.
    pub residual_adjusted: bool,
    pub recurrent: bool,
}

/// Inference-ready kernels for one configuration of dampening.
#[derive(Clone, Debug)]
pub struct Runner {
    spec: ArchitectureSpec,
    kernels: Vec<Kernel>,
    biases: Vec<Vec<f32>>,
    pad: Padding,
    feedback: Feedback,
}

impl Runner {
    pub fn new(model: &RecurrentModel, opts: InferenceOptions) -> Result<Self> {
        if !(0.0..=1.0).contains(&opts.lambda) {
            return Err(Error::config(format!(
                "dampening.lambda must lie in [0, 1], got {}",
                opts.lambda
            )));
        }
        let mut kernels = model.inference_kernels()?;
        let slice = model.spec.feedback_slice();
        let feedback = match (slice, opts.drop_feedback) {
            (Some((idx, start, count)), true) => {
                kernels[idx] = kernels[idx].slice_inputs(0, start)?;
                debug_assert_eq!(start + count, model.layers[idx].kernel.m_in());
                Feedback::Dropped
            }
            (Some((idx, start, count)), false) if opts.lambda != 1.0 => match opts.route {
                DampenRoute::Features => Feedback::Scaled(opts.lambda as f32),
                DampenRoute::Kernel => {
                    kernels[idx] = dampen_kernel_inputs(&kernels[idx], start, count, opts.lambda)?;
                    Feedback::Concat
                }
            },
            _ => Feedback::Concat,
        };
        Ok(Self {
            spec: model.spec.clone(),
            kernels,
            biases: model.biases(),
            pad: model.pad,
            feedback,
        })
    }

    /// Uses the given kernels in place of the model's inference kernels.
    pub fn from_parts(model: &RecurrentModel, kernels: Vec<Kernel>) -> Self {
        Self {
            spec: model.spec.clone(),
            kernels,
            biases: model.biases(),
            pad: model.pad,
            feedback: Feedback::Concat,
        }
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn step(&self, state: &mut RecurrentState, x: &Tensor) -> Result<StepOutput> {
        let (h, w, c) = x.hwc()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "frame has {c} channels, model expects {}",
                self.spec.in_channels
            )));
        }
        let mut ops = EvalOps {
            kernels: &self.kernels,
            biases: &self.biases,
            pad: self.pad,
        };
        let current = match state.inner.take() {
            Some(s) if shape_matches(&s, h, w) => s,
            _ => State::zero(&self.spec, &mut ops, h, w),
        };
        let (y, next) = wiring::forward(&self.spec, &mut ops, x, &current, self.feedback)?;
        state.inner = Some(next);
        state.frames_seen += 1;
        let diverged = !y.is_finite();
        Ok(StepOutput { y, diverged })
    }
}

fn shape_matches(s: &State<Tensor>, h: usize, w: usize) -> bool {
    let ok = |t: &Tensor| t.shape()[0] == h && t.shape()[1] == w;
    s.frames.iter().all(ok) && s.hidden.as_ref().is_none_or(ok)
}

/// Power-iteration state on the layer grid, for tests and diagnostics.
pub fn cold_state(kernel: &Kernel, n: usize, seed: u64) -> PowerIterationState {
    PowerIterationState::random(n, n, kernel.m_out(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn frames(seed: u64, t: usize, n: usize, c: usize) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| Tensor::from_fn(&[n, n, c], |_| rng.random_range(0.0..1.0)))
            .collect()
    }

    fn small(b: Backbone, r: Recurrence) -> ArchitectureSpec {
        ArchitectureSpec::new(b, r)
            .with_channels(4)
            .with_in_channels(1)
    }

    #[test]
    fn same_seed_same_parameters() {
        let s = small(Backbone::Vdncnn, Recurrence::Feature);
        let a = RecurrentModel::build(s.clone(), Init::He, 3).unwrap();
        let b = RecurrentModel::build(s, Init::He, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_frame_ignores_state() {
        let m = RecurrentModel::build(
            small(Backbone::Vdncnn, Recurrence::NoneSingle),
            Init::Gaussian(0.1),
            1,
        )
        .unwrap();
        let xs = frames(2, 3, 6, 1);
        let mut st = RecurrentState::new();
        m.step(&mut st, &xs[0]).unwrap();
        let a = m.step(&mut st, &xs[2]).unwrap().y;
        let b = m.step(&mut RecurrentState::new(), &xs[2]).unwrap().y;
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_feedback_matches_single_frame() {
        for b in [Backbone::Vdncnn, Backbone::Vresnet, Backbone::TinyVdncnn] {
            let mut m =
                RecurrentModel::build(small(b, Recurrence::Feature), Init::Gaussian(0.1), 4)
                    .unwrap();
            m.zero_feedback().unwrap();
            let single = m
                .runner(InferenceOptions {
                    drop_feedback: true,
                    ..Default::default()
                })
                .unwrap();
            let xs = frames(5, 4, 6, 1);
            let mut s1 = RecurrentState::new();
            let mut s2 = RecurrentState::new();
            for x in &xs {
                let a = m.step(&mut s1, x).unwrap().y;
                let b = single.step(&mut s2, x).unwrap().y;
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn frame_recurrence_matches_manual_unroll() {
        let m = RecurrentModel::build(
            small(Backbone::TinyVdncnn, Recurrence::Frame),
            Init::Gaussian(0.1),
            6,
        )
        .unwrap();
        let xs = frames(7, 2, 6, 1);
        let ys = m.run(&xs).unwrap();
        // explicit composition: y1 = x1 − f([x1, 0]), y2 = x2 − f([x2, y1])
        let f = |inp: &Tensor| -> Tensor {
            let mut a = inp.clone();
            for (i, l) in m.layers.iter().enumerate() {
                let mut z = crate::conv::conv2d(&a, &l.kernel, Padding::Circular).unwrap();
                wiring::add_bias(&mut z, &l.bias);
                a = if i + 1 == m.layers.len() { z } else { z.relu() };
            }
            a
        };
        let zero = Tensor::zeros(&[6, 6, 1]);
        let y1 = xs[0]
            .sub(&f(&Tensor::concat_channels(&[&xs[0], &zero]).unwrap()))
            .unwrap();
        let y2 = xs[1]
            .sub(&f(&Tensor::concat_channels(&[&xs[1], &y1]).unwrap()))
            .unwrap();
        assert_eq!(ys[0], y1);
        assert_eq!(ys[1], y2);
    }

    #[test]
    fn unroll_equals_iterated_step() {
        for b in [Backbone::Vdncnn, Backbone::Vresnet, Backbone::TinyVdncnn] {
            for r in Recurrence::ALL {
                let m = RecurrentModel::build(small(b, r), Init::Gaussian(0.1), 8).unwrap();
                let xs = frames(9, 4, 6, 1);
                let stepped = m.run(&xs).unwrap();
                let mut tape = Tape::new();
                let (k, bi) = m.constant_params(&mut tape).unwrap();
                let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
                let ys = m.unroll_tape(&mut tape, &k, &bi, &xv).unwrap();
                for (y, s) in ys.iter().zip(&stepped) {
                    assert_eq!(tape.value(*y), s, "{b:?} {r:?}");
                }
            }
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let m = RecurrentModel::build(
            small(Backbone::TinyVdncnn, Recurrence::Rlsp),
            Init::Gaussian(0.1),
            1,
        )
        .unwrap();
        let xs = frames(3, 5, 6, 1);
        let mut st = RecurrentState::new();
        let a: Vec<Tensor> = xs.iter().map(|x| m.step(&mut st, x).unwrap().y).collect();
        st.reset();
        assert_eq!(st.frames_seen, 0);
        let b: Vec<Tensor> = xs.iter().map(|x| m.step(&mut st, x).unwrap().y).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn unroll_guardrail() {
        let m = RecurrentModel::build(small(Backbone::TinyVdncnn, Recurrence::Frame), Init::He, 0)
            .unwrap();
        let mut tape = Tape::new();
        let (k, b) = m.constant_params(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(&[4, 4, 1]));
        let xs = vec![x; MAX_UNROLL + 1];
        assert!(matches!(
            m.unroll_tape(&mut tape, &k, &b, &xs),
            Err(Error::Guardrail(_))
        ));
    }

    #[test]
    fn lipschitz_bound_of_scaled_chain() {
        let mut m = RecurrentModel::build(
            small(Backbone::Vdncnn, Recurrence::Rlsp).with_depth(4),
            Init::Gaussian(0.1),
            2,
        )
        .unwrap();
        m.rescale_layers(0.5, 8).unwrap();
        let lb = m.lipschitz_upper_bound(8).unwrap();
        assert_eq!(lb.factors.len(), 3);
        assert!((lb.bound - 0.125).abs() < 1e-5);
        assert!(!lb.residual_adjusted);
        let r = RecurrentModel::build(small(Backbone::Vresnet, Recurrence::Feature), Init::He, 2)
            .unwrap();
        assert!(r.lipschitz_upper_bound(8).unwrap().residual_adjusted);
    }

    #[test]
    fn normalized_models_must_be_frozen() {
        let m = RecurrentModel::build(
            small(Backbone::TinyVdncnn, Recurrence::Feature),
            Init::He,
            0,
        )
        .unwrap()
        .with_normalizer(NormalizerConfig::srnl(0.5, 1.0), 8, 1)
        .unwrap();
        assert!(m.inference_kernels().is_err());
        let mut m = m;
        m.freeze_converged().unwrap();
        for k in m.inference_kernels().unwrap() {
            let s = fft_exact_spectrum(&k, 8).unwrap().sigma1();
            assert!((s - 0.5).abs() < 5e-3 * 0.5, "{s}");
        }
    }
}
