//! Spectral and stable-rank normalization of convolution kernels, plus
//! feature dampening.
//!
//! Two schemes share one pipeline (power iteration, divide by the estimated
//! σ1, optionally pull the spectrum towards its top direction):
//!
//! * `Srnl` treats the kernel as the layer operator on an `n × n` grid. σ1
//!   comes from conv/adjoint power iteration and the top direction is the
//!   kernel-space gradient of `uᵀ(K * v)`.
//! * `Srn` treats the kernel as the `m_out × k·k·m_in` matrix obtained by
//!   reshaping, so its σ1 is a matrix norm, not the layer norm.
//!
//! The layer gradient `G = ∇_K uᵀ(K * v)` is not a unit-norm kernel, so
//! `K̃ − G` is not orthogonal to `G`. We split along the projection
//! `P = G·⟨K̃, G⟩/‖G‖²` instead, which keeps `⟨P, K̃ − P⟩ = 0` and lets the
//! Frobenius target `β·min(m_in, m_out)` be met exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::{conv2d_kernel_grad_raw, ConvGeom};
use crate::error::{Error, Result};
use crate::spectral::{power_iteration_kernel2d, power_iteration_layer, PowerIterationState};
use crate::tensor::{Kernel, Padding, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    None,
    Srn,
    Srnl,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scheme::None),
            "srn" => Ok(Scheme::Srn),
            "srnl" => Ok(Scheme::Srnl),
            other => Err(Error::config(format!(
                "unknown normalization scheme `{other}` (expected none, srn or srnl)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerConfig {
    pub scheme: Scheme,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub power_iters: usize,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::None,
            alpha: 1.0,
            beta: 1.0,
            epsilon: DEFAULT_EPSILON,
            power_iters: 1,
        }
    }
}

impl NormalizerConfig {
    pub fn srnl(alpha: f64, beta: f64) -> Self {
        Self {
            scheme: Scheme::Srnl,
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn srn(alpha: f64, beta: f64) -> Self {
        Self {
            scheme: Scheme::Srn,
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "norm.alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!(
                "norm.beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("norm.epsilon must be > 0"));
        }
        if self.power_iters == 0 {
            return Err(Error::config("norm.power_iters must be at least 1"));
        }
        Ok(())
    }

    /// Checks `βm > 1/n²` (layer) or `βm > 1` (reshaped) for a kernel.
    pub fn validate_for(&self, kernel: &Kernel, n: usize) -> Result<()> {
        self.validate()?;
        let m = kernel.m_in().min(kernel.m_out()) as f64;
        let floor = match self.scheme {
            Scheme::None => return Ok(()),
            Scheme::Srnl => 1.0 / (n * n) as f64,
            Scheme::Srn => 1.0,
        };
        if self.beta < 1.0 && self.beta * m <= floor {
            return Err(Error::config(format!(
                "norm.beta = {} leaves β·m = {} at or below {floor}",
                self.beta,
                self.beta * m
            )));
        }
        Ok(())
    }
}

/// Power-iteration state owned by one normalized kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum NormState {
    Layer(PowerIterationState),
    Reshaped(Vec<f32>),
}

impl NormState {
    pub fn for_scheme(scheme: Scheme, kernel: &Kernel, n: usize, seed: u64) -> Option<Self> {
        match scheme {
            Scheme::None => None,
            Scheme::Srnl => Some(NormState::Layer(PowerIterationState::random(
                n,
                n,
                kernel.m_out(),
                seed,
            ))),
            Scheme::Srn => {
                let s = PowerIterationState::random(1, 1, kernel.m_out(), seed);
                Some(NormState::Reshaped(s.u.into_data()))
            }
        }
    }

    pub fn u(&self) -> &[f32] {
        match self {
            NormState::Layer(s) => s.u.data(),
            NormState::Reshaped(u) => u,
        }
    }
}

/// One normalization pass: everything needed to rebuild `α·K̃` from the raw
/// kernel, either numerically or on a tape with `u`, `v` frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    /// `K̃` before the `α` scale.
    pub kernel: Kernel,
    pub alpha: f64,
    /// `⟨direction, K⟩`, the σ1 estimate of the raw kernel.
    pub sigma: f64,
    pub epsilon: f64,
    /// Gradient of σ with respect to the kernel.
    pub direction: Vec<f32>,
    /// `γ` when the stable-rank branch fired.
    pub gamma: Option<f64>,
    /// Projected rank-one part `P` used by the stable-rank branch.
    pub rank_one: Option<Vec<f32>>,
    /// `‖K̃ − P‖ = 0`: the kernel is already rank one for this purpose.
    pub rank_one_skip: bool,
    pub degenerate: bool,
}

impl Normalized {
    /// `α·K̃`, the kernel actually used in forward passes.
    pub fn effective(&self) -> Kernel {
        self.kernel.scale(self.alpha as f32)
    }

    /// Rebuilds `α·K̃` on the tape from the raw kernel variable. Only the
    /// σ denominator carries gradient; `u`, `v`, `γ`, and `P` are constants.
    pub fn apply(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let mut k = tape.spectral_normalize(raw, &self.direction, self.epsilon)?;
        if let (Some(g), Some(p)) = (self.gamma, &self.rank_one) {
            let offset: Vec<f32> = p.iter().map(|&v| ((1.0 - g) * v as f64) as f32).collect();
            k = tape.affine(k, g as f32, &offset)?;
        }
        Ok(tape.scale(k, self.alpha as f32))
    }
}

/// `S` with `⟨S, K′⟩ = uᵀ(K′ * v)` for every kernel `K′`.
pub fn rank_one_kernel(u: &Tensor, v: &Tensor, k: usize, pad: Padding) -> Result<Kernel> {
    let (h, w, m_out) = u.hwc()?;
    let (hv, wv, m_in) = v.hwc()?;
    if (h, w) != (hv, wv) {
        return Err(Error::shape(format!(
            "rank-one kernel: u is {:?}, v is {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let zero = Kernel::zeros(k, m_in, m_out);
    let geom = ConvGeom::new(h, w, &zero, pad)?;
    let uu: Vec<f64> = u.data().iter().map(|&x| x as f64).collect();
    let vv: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let mut g = vec![0.0f64; k * k * m_in * m_out];
    conv2d_kernel_grad_raw(&geom, &vv, &uu, &mut g);
    Kernel::from_f64(k, m_in, m_out, &g)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn sq(a: &[f32]) -> f64 {
    dot(a, a)
}

/// Divide by σ, then optionally apply the stable-rank pull.
fn finish(
    raw: &Kernel,
    cfg: &NormalizerConfig,
    direction: Vec<f32>,
    target_sq: f64,
    project: bool,
    degenerate: bool,
) -> Result<Normalized> {
    let sigma = dot(&direction, raw.weights());
    let denom = sigma + cfg.epsilon;
    let tilde: Vec<f64> = raw.weights().iter().map(|&x| x as f64 / denom).collect();
    let mut out = Normalized {
        kernel: Kernel::from_f64(raw.k(), raw.m_in(), raw.m_out(), &tilde)?,
        alpha: cfg.alpha,
        sigma,
        epsilon: cfg.epsilon,
        direction,
        gamma: None,
        rank_one: None,
        rank_one_skip: false,
        degenerate,
    };
    if cfg.beta >= 1.0 || degenerate {
        return Ok(out);
    }
    let d = &out.direction;
    let dd = sq(d);
    if dd == 0.0 {
        out.rank_one_skip = true;
        return Ok(out);
    }
    let c = if project {
        tilde
            .iter()
            .zip(d)
            .map(|(&t, &x)| t * x as f64)
            .sum::<f64>()
            / dd
    } else {
        1.0
    };
    let p: Vec<f64> = d.iter().map(|&x| c * x as f64).collect();
    let rest_sq: f64 = tilde.iter().zip(&p).map(|(t, p)| (t - p).powi(2)).sum();
    let p_sq: f64 = p.iter().map(|x| x * x).sum();
    if rest_sq == 0.0 {
        out.rank_one_skip = true;
        return Ok(out);
    }
    let budget = target_sq - p_sq;
    if budget <= 0.0 {
        return Err(Error::config(format!(
            "stable-rank target β = {} is below the rank-one part of this kernel",
            cfg.beta
        )));
    }
    let gamma = budget.sqrt() / rest_sq.sqrt();
    if gamma < 1.0 {
        let mixed: Vec<f64> = tilde
            .iter()
            .zip(&p)
            .map(|(&t, &p)| p + gamma * (t - p))
            .collect();
        out.kernel = Kernel::from_f64(raw.k(), raw.m_in(), raw.m_out(), &mixed)?;
        out.gamma = Some(gamma);
        out.rank_one = Some(p.iter().map(|&x| x as f32).collect());
    }
    Ok(out)
}

/// Layer-level stable rank normalization.
///
/// The grid size comes from the state's `u`. With `β = 1` this is plain
/// spectral normalization of the layer operator.
pub fn srnl_normalize(
    raw: &Kernel,
    cfg: &NormalizerConfig,
    state: &mut PowerIterationState,
    pad: Padding,
) -> Result<Normalized> {
    let (n, _, _) = state.u.hwc()?;
    cfg.validate_for(raw, n)?;
    let est = power_iteration_layer(raw, pad, state, cfg.power_iters, None)?;
    let grad = rank_one_kernel(&state.u, &est.v, raw.k(), pad)?;
    let m = raw.m_in().min(raw.m_out()) as f64;
    finish(
        raw,
        cfg,
        grad.into_weights(),
        cfg.beta * m,
        true,
        est.degenerate,
    )
}

/// Stable rank normalization of the reshaped `m_out × k·k·m_in` matrix.
pub fn srn_normalize(raw: &Kernel, cfg: &NormalizerConfig, u: &mut Vec<f32>) -> Result<Normalized> {
    cfg.validate_for(raw, 1)?;
    let (_, v, degenerate) = power_iteration_kernel2d(raw, u, cfg.power_iters)?;
    let m_out = raw.m_out();
    // ∂(uᵀ Mᵀ v)/∂M[r, o] = v[r]·u[o]; the flat weight index is r·m_out + o.
    let direction: Vec<f32> = v
        .iter()
        .flat_map(|&vr| u.iter().map(move |&uo| vr * uo))
        .collect();
    debug_assert_eq!(direction.len(), raw.weights().len());
    let m = m_out.min(raw.k() * raw.k() * raw.m_in()) as f64;
    finish(raw, cfg, direction, cfg.beta * m, false, degenerate)
}

/// Dispatches on the configured scheme; `None` for `Scheme::None`.
pub fn normalize(
    raw: &Kernel,
    cfg: &NormalizerConfig,
    state: &mut NormState,
    pad: Padding,
) -> Result<Normalized> {
    match (cfg.scheme, state) {
        (Scheme::Srnl, NormState::Layer(s)) => srnl_normalize(raw, cfg, s, pad),
        (Scheme::Srn, NormState::Reshaped(u)) => srn_normalize(raw, cfg, u),
        (scheme, _) => Err(Error::config(format!(
            "normalization state does not match scheme {scheme:?}"
        ))),
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "dampening.lambda must lie in [0, 1], got {lambda}"
        )))
    }
}

pub fn dampen_features(h: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    Ok(h.scale(lambda as f32))
}

pub fn dampen_kernel(kernel: &Kernel, lambda: f64) -> Result<Kernel> {
    check_lambda(lambda)?;
    Ok(kernel.scale(lambda as f32))
}

/// Scales only the input channels `start..start + count`, the slice that
/// reads the recurrent features of a concatenated input.
pub fn dampen_kernel_inputs(
    kernel: &Kernel,
    start: usize,
    count: usize,
    lambda: f64,
) -> Result<Kernel> {
    check_lambda(lambda)?;
    if start + count > kernel.m_in() {
        return Err(Error::shape(format!(
            "input slice {start}..{} of a kernel with {} inputs",
            start + count,
            kernel.m_in()
        )));
    }
    let mut out = kernel.clone();
    let l = lambda as f32;
    for dy in 0..kernel.k() {
        for dx in 0..kernel.k() {
            for i in start..start + count {
                for o in 0..kernel.m_out() {
                    *out.at_mut(dy, dx, i, o) *= l;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use crate::spectral::{fft_exact_spectrum, materialized_spectrum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(rng: &mut ChaCha8Rng, k: usize, mi: usize, mo: usize) -> Kernel {
        Kernel::new(
            k,
            mi,
            mo,
            (0..k * k * mi * mo)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn converge(raw: &Kernel, cfg: &NormalizerConfig, n: usize, seed: u64) -> Normalized {
        let mut st = PowerIterationState::random(n, n, raw.m_out(), seed);
        power_iteration_layer(raw, Padding::Circular, &mut st, 500, Some(1e-12)).unwrap();
        srnl_normalize(raw, cfg, &mut st, Padding::Circular).unwrap()
    }

    #[test]
    fn rank_one_of_centred_deltas_is_identity_delta() {
        let mut u = Tensor::zeros(&[5, 5, 1]);
        u.data_mut()[12] = 1.0;
        let s = rank_one_kernel(&u, &u, 3, Padding::Circular).unwrap();
        assert_eq!(s, Kernel::identity(3, 1));
    }

    #[test]
    fn rank_one_matches_tape_and_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::from_fn(&[6, 6, 3], |_| rng.random_range(-1.0..1.0));
        let v = Tensor::from_fn(&[6, 6, 2], |_| rng.random_range(-1.0..1.0));
        let s = rank_one_kernel(&u, &v, 3, Padding::Circular).unwrap();

        let mut tape = Tape::new();
        let kv = tape.param(Kernel::zeros(3, 2, 3).to_tensor());
        let vv = tape.constant(v.clone());
        let y = tape.conv2d(vv, kv, Padding::Circular).unwrap();
        let loss = tape.inner_const(y, u.data()).unwrap();
        let g = tape.backward(loss).unwrap();
        for (a, b) in g.get(kv).unwrap().iter().zip(s.weights()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
        for _ in 0..20 {
            let probe = random_kernel(&mut rng, 3, 2, 3);
            let lhs = s.dot(&probe);
            let rhs = u.dot(&conv2d(&v, &probe, Padding::Circular).unwrap());
            assert!((lhs - rhs).abs() < 1e-5 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn beta_one_sets_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for alpha in [0.5, 1.0, 2.0] {
            let raw = random_kernel(&mut rng, 3, 2, 2);
            let out = converge(&raw, &NormalizerConfig::srnl(alpha, 1.0), 8, 1);
            let s1 = fft_exact_spectrum(&out.effective(), 8).unwrap().sigma1();
            assert!((s1 - alpha).abs() < 5e-3 * alpha, "{s1} vs {alpha}");
            assert!(out.gamma.is_none());
        }
    }

    #[test]
    fn stable_rank_branch_meets_frobenius_target() {
        // delta-dominated kernels have flat spectra, so γ < 1 fires
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut hits = 0;
        for _ in 0..10 {
            let mut raw = random_kernel(&mut rng, 3, 2, 2).scale(0.05);
            for c in 0..2 {
                *raw.at_mut(1, 1, c, c) += 1.0;
            }
            let out = converge(&raw, &NormalizerConfig::srnl(1.0, 0.5), 8, 2);
            let Some(gamma) = out.gamma else { continue };
            hits += 1;
            assert!(gamma < 1.0);
            let spec = materialized_spectrum(&out.kernel, 8, Padding::Circular).unwrap();
            let f2 = spec.frobenius.powi(2);
            assert!((f2 - 64.0).abs() < 1e-2 * 64.0, "{f2}");
            assert!((spec.sigma1() - 1.0).abs() < 5e-2, "{}", spec.sigma1());
            let p = out.rank_one.as_ref().unwrap();
            let tilde = raw.scale((1.0 / (out.sigma + out.epsilon)) as f32);
            let s2: Vec<f32> = tilde.weights().iter().zip(p).map(|(a, b)| a - b).collect();
            let orth = dot(p, &s2).abs();
            assert!(orth <= 1e-5 * sq(p).sqrt() * sq(&s2).sqrt());
        }
        assert!(hits >= 8, "γ < 1 only on {hits} draws");
    }

    #[test]
    fn srn_sets_reshaped_norm_and_coincides_for_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random_kernel(&mut rng, 3, 2, 2);
        let mut u = vec![0.6, 0.8];
        let mut cfg = NormalizerConfig::srn(1.0, 1.0);
        cfg.power_iters = 200;
        let out = srn_normalize(&raw, &cfg, &mut u).unwrap();
        let mat = nalgebra::DMatrix::from_row_slice(18, 2, &out.kernel.weights_f64());
        assert!((crate::spectral::dense_singular_values(&mat)[0] - 1.0).abs() < 1e-6);

        let scalar = Kernel::new(1, 1, 1, vec![0.7]).unwrap();
        let a = srn_normalize(&scalar, &NormalizerConfig::srn(1.0, 1.0), &mut vec![1.0]).unwrap();
        let b = converge(&scalar, &NormalizerConfig::srnl(1.0, 1.0), 4, 0);
        assert!((a.kernel.weights()[0] - b.kernel.weights()[0]).abs() < 1e-6);
    }

    #[test]
    fn tape_rebuild_matches_numeric_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut raw = random_kernel(&mut rng, 3, 2, 2).scale(0.2);
        for c in 0..2 {
            *raw.at_mut(1, 1, c, c) += 1.0;
        }
        let out = converge(&raw, &NormalizerConfig::srnl(0.7, 0.5), 8, 3);
        assert!(out.gamma.is_some());
        let mut tape = Tape::new();
        let kv = tape.param(raw.to_tensor());
        let eff = out.apply(&mut tape, kv).unwrap();
        for (a, b) in tape.value(eff).data().iter().zip(out.effective().weights()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn config_checks() {
        let k = Kernel::identity(3, 1);
        assert!(NormalizerConfig::srnl(1.0, 0.0).validate().is_err());
        assert!(NormalizerConfig::srnl(-1.0, 1.0).validate().is_err());
        assert!(NormalizerConfig::srn(1.0, 0.5)
            .validate_for(&Kernel::identity(3, 2), 8)
            .is_err());
        assert!(NormalizerConfig::srnl(1.0, 0.5).validate_for(&k, 8).is_ok());
        assert!(dampen_features(&Tensor::zeros(&[2]), 1.5).is_err());
    }

    #[test]
    fn dampening_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = random_kernel(&mut rng, 3, 3, 2);
        let y = Tensor::from_fn(&[6, 6, 3], |_| rng.random_range(0.0..1.0));
        let lambda = 0.55;
        let a = conv2d(&y, &dampen_kernel(&k, lambda).unwrap(), Padding::Circular).unwrap();
        let b = conv2d(&dampen_features(&y, lambda).unwrap(), &k, Padding::Circular).unwrap();
        for (x, z) in a.data().iter().zip(b.data()) {
            assert!((x - z).abs() <= 1e-6 * (1.0 + z.abs()));
        }
        assert_eq!(dampen_kernel(&k, 1.0).unwrap(), k);
        let sliced = dampen_kernel_inputs(&k, 1, 2, 0.0).unwrap();
        assert_eq!(
            sliced.slice_inputs(0, 1).unwrap(),
            k.slice_inputs(0, 1).unwrap()
        );
        assert!(sliced
            .slice_inputs(1, 2)
            .unwrap()
            .weights()
            .iter()
            .all(|&w| w == 0.0));
    }
}
