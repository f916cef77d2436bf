//! Singular values of convolutional layers.
//!
//! A same-size convolution on an `n × n` grid is a linear map
//! `W ∈ R^{n²m_out × n²m_in}`. Three routes to its spectrum live here:
//! power iteration through conv/adjoint pairs (never forms `W`), the exact
//! spectrum from per-frequency transfer matrices (circular padding only),
//! and brute-force materialization of `W` as a test oracle.

use nalgebra::{Complex, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_adjoint_raw, conv2d_raw, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Kernel, Padding, Tensor};

/// Largest `n²·m` for which [`materialize_operator`] will build a dense matrix.
pub const MATERIALIZE_LIMIT: usize = 4096;

pub const COLD_START_MIN_ITERS: usize = 200;
pub const COLD_START_MAX_ITERS: usize = 20_000;
pub const COLD_START_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    PowerIteration,
    FftExact,
    Materialized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    /// Descending singular values; a single entry for power iteration.
    pub sigma: Vec<f64>,
    pub frobenius: f64,
    pub n: usize,
    pub source: SpectrumSource,
}

impl LayerSpectrum {
    pub fn sigma1(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    pub fn stable_rank(&self) -> Result<f64> {
        stable_rank(self)
    }
}

/// Warm-startable left singular vector estimate for a conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIterationState {
    /// Unit-norm feature map `[h, w, m_out]`.
    pub u: Tensor,
    pub iterations: usize,
    pub sigma: f64,
}

impl PowerIterationState {
    /// Gaussian start, normalised to unit length.
    pub fn random(h: usize, w: usize, m_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<f64> = (0..h * w * m_out)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalize(&mut u);
        Self {
            u: Tensor::new(vec![h, w, m_out], to_f32(&u)).expect("shape matches data"),
            iterations: 0,
            sigma: 0.0,
        }
    }

    pub fn from_u(u: Tensor) -> Result<Self> {
        u.hwc()?;
        Ok(Self {
            u,
            iterations: 0,
            sigma: 0.0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerEstimate {
    /// `uᵀ(K * v)` for the final unit vectors.
    pub sigma: f64,
    /// Right singular vector estimate `[h, w, m_in]`.
    pub v: Tensor,
    pub iterations: usize,
    /// `Kᵀu` or `Kv` vanished; `sigma` is reported as 0.
    pub degenerate: bool,
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Alternates `v ← Kᵀu/‖·‖`, `u ← Kv/‖·‖` in double precision.
///
/// Runs `iters` rounds, or when `rel_tol` is given, at least `iters` rounds
/// and then until the estimate changes by less than `rel_tol` (capped at
/// [`COLD_START_MAX_ITERS`]). The state keeps `u` for the next call.
pub fn power_iteration_layer(
    kernel: &Kernel,
    pad: Padding,
    state: &mut PowerIterationState,
    iters: usize,
    rel_tol: Option<f64>,
) -> Result<PowerEstimate> {
    let (h, w, c) = state.u.hwc()?;
    if c != kernel.m_out() {
        return Err(Error::shape(format!(
            "power iteration state has {c} channels, kernel outputs {}",
            kernel.m_out()
        )));
    }
    let geom = ConvGeom::new(h, w, kernel, pad)?;
    let kw = kernel.weights_f64();
    let mut u: Vec<f64> = state.u.data().iter().map(|&v| v as f64).collect();
    let mut v = vec![0.0f64; geom.input_len()];
    let mut sigma = 0.0f64;
    let mut done = 0usize;
    let mut degenerate = false;
    let cap = if rel_tol.is_some() {
        COLD_START_MAX_ITERS.max(iters)
    } else {
        iters
    };
    while done < cap {
        v.iter_mut().for_each(|x| *x = 0.0);
        conv2d_adjoint_raw(&geom, &u, &kw, &mut v);
        if normalize(&mut v) == 0.0 {
            degenerate = true;
            break;
        }
        let mut ku = vec![0.0f64; geom.output_len()];
        conv2d_raw(&geom, &v, &kw, &mut ku);
        let next = normalize(&mut ku);
        done += 1;
        if next == 0.0 {
            degenerate = true;
            break;
        }
        u = ku;
        let change = (next - sigma).abs() / next;
        sigma = next;
        if let Some(tol) = rel_tol {
            if done >= iters && change < tol {
                break;
            }
        }
    }
    if degenerate {
        sigma = 0.0;
    }
    state.u = Tensor::new(vec![h, w, kernel.m_out()], to_f32(&u))?;
    state.iterations += done;
    state.sigma = sigma;
    Ok(PowerEstimate {
        sigma,
        v: Tensor::new(vec![h, w, kernel.m_in()], to_f32(&v))?,
        iterations: done,
        degenerate,
    })
}

/// Cold-start layer spectral norm on an `n × n` grid.
pub fn spectral_norm_layer(kernel: &Kernel, n: usize, pad: Padding) -> Result<f64> {
    let mut state = PowerIterationState::random(n, n, kernel.m_out(), 0x5eed);
    let est = power_iteration_layer(
        kernel,
        pad,
        &mut state,
        COLD_START_MIN_ITERS,
        Some(COLD_START_TOL),
    )?;
    Ok(est.sigma)
}

/// Power iteration on `Reshape(K, [k·k·m_in, m_out])ᵀ`.
///
/// `u` has length `m_out`. Returns `(σ, v)` with `v` of length `k·k·m_in`.
pub fn power_iteration_kernel2d(
    kernel: &Kernel,
    u: &mut Vec<f32>,
    iters: usize,
) -> Result<(f64, Vec<f32>, bool)> {
    let (rows, cols) = (kernel.k() * kernel.k() * kernel.m_in(), kernel.m_out());
    if u.len() != cols {
        return Err(Error::shape(format!(
            "reshaped power iteration: u has {} entries, expected {cols}",
            u.len()
        )));
    }
    let m = kernel.weights_f64();
    let mut uu: Vec<f64> = u.iter().map(|&x| x as f64).collect();
    let mut v = vec![0.0f64; rows];
    let mut sigma = 0.0;
    let mut degenerate = false;
    for _ in 0..iters {
        // v = M u  (the transpose of K̃ = Mᵀ applied to u)
        for (r, vr) in v.iter_mut().enumerate() {
            *vr = (0..cols).map(|o| m[r * cols + o] * uu[o]).sum();
        }
        if normalize(&mut v) == 0.0 {
            degenerate = true;
            break;
        }
        let mut next: Vec<f64> = (0..cols)
            .map(|o| (0..rows).map(|r| m[r * cols + o] * v[r]).sum())
            .collect();
        sigma = normalize(&mut next);
        if sigma == 0.0 {
            degenerate = true;
            break;
        }
        uu = next;
    }
    if degenerate {
        sigma = 0.0;
    }
    *u = to_f32(&uu);
    Ok((sigma, to_f32(&v), degenerate))
}

/// Per-frequency transfer matrices `T(a,b)[o,i] = Σ K[dy,dx,i,o]·e^{-2πi(a·dy+b·dx)/n}`.
fn transfer_matrix(kernel: &Kernel, n: usize, a: usize, b: usize) -> DMatrix<Complex<f64>> {
    let (k, mi, mo) = (kernel.k(), kernel.m_in(), kernel.m_out());
    let mut t = DMatrix::<Complex<f64>>::zeros(mo, mi);
    let tau = std::f64::consts::TAU;
    for dy in 0..k {
        for dx in 0..k {
            let phase = -tau * (((a * dy + b * dx) % n) as f64) / n as f64;
            let z = Complex::new(phase.cos(), phase.sin());
            for i in 0..mi {
                for o in 0..mo {
                    t[(o, i)] += z * kernel.at(dy, dx, i, o) as f64;
                }
            }
        }
    }
    t
}

/// All singular values of the circular layer operator, via the DFT.
pub fn fft_exact_spectrum(kernel: &Kernel, n: usize) -> Result<LayerSpectrum> {
    if n < kernel.k() {
        return Err(Error::shape(format!(
            "image size {n} smaller than kernel size {}",
            kernel.k()
        )));
    }
    let mut sigma: Vec<f64> = (0..n * n)
        .into_par_iter()
        .flat_map_iter(|f| {
            let t = transfer_matrix(kernel, n, f / n, f % n);
            t.singular_values().iter().copied().collect::<Vec<_>>()
        })
        .collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    let frobenius = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
    Ok(LayerSpectrum {
        sigma,
        frobenius,
        n,
        source: SpectrumSource::FftExact,
    })
}

/// Dense `[n²·m_out, n²·m_in]` matrix of the layer; column `j` is the
/// convolution of the `j`-th basis feature map.
pub fn materialize_operator(kernel: &Kernel, n: usize, pad: Padding) -> Result<DMatrix<f64>> {
    let size = n * n * kernel.m_in().max(kernel.m_out());
    if size > MATERIALIZE_LIMIT {
        return Err(Error::Guardrail(format!(
            "materializing a {size}-dimensional operator (limit {MATERIALIZE_LIMIT})"
        )));
    }
    let geom = ConvGeom::new(n, n, kernel, pad)?;
    let kw = kernel.weights_f64();
    let (rows, cols) = (geom.output_len(), geom.input_len());
    let mut mat = DMatrix::<f64>::zeros(rows, cols);
    let mut basis = vec![0.0f64; cols];
    let mut out = vec![0.0f64; rows];
    for j in 0..cols {
        basis[j] = 1.0;
        out.iter_mut().for_each(|x| *x = 0.0);
        conv2d_raw(&geom, &basis, &kw, &mut out);
        mat.set_column(j, &nalgebra::DVector::from_column_slice(&out));
        basis[j] = 0.0;
    }
    Ok(mat)
}

/// Descending singular values of a dense matrix.
pub fn dense_singular_values(mat: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = mat.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Spectrum of the materialized operator.
pub fn materialized_spectrum(kernel: &Kernel, n: usize, pad: Padding) -> Result<LayerSpectrum> {
    let mat = materialize_operator(kernel, n, pad)?;
    Ok(LayerSpectrum {
        sigma: dense_singular_values(&mat),
        frobenius: mat.norm(),
        n,
        source: SpectrumSource::Materialized,
    })
}

/// `‖W‖_F² / σ1²`.
pub fn stable_rank(spectrum: &LayerSpectrum) -> Result<f64> {
    let s1 = spectrum.sigma1();
    if s1 <= 0.0 {
        return Err(Error::Undefined("stable rank of a zero operator".into()));
    }
    Ok(spectrum.frobenius.powi(2) / (s1 * s1))
}

/// Frobenius norm of the circular layer operator: `n·‖K‖_F`.
pub fn layer_frobenius(kernel: &Kernel, n: usize) -> f64 {
    n as f64 * kernel.frobenius()
}

/// Stable rank of the layer without materialization.
pub fn stable_rank_layer(kernel: &Kernel, n: usize, sigma1: f64) -> Result<f64> {
    if sigma1 <= 0.0 {
        return Err(Error::Undefined("stable rank with σ1 = 0".into()));
    }
    Ok(layer_frobenius(kernel, n).powi(2) / (sigma1 * sigma1))
}

/// Pointwise mean of sorted spectra. Rank indices past the end of a shorter
/// spectrum average over the layers that have them.
pub fn mean_spectrum(spectra: &[LayerSpectrum]) -> Vec<f64> {
    let len = spectra.iter().map(|s| s.sigma.len()).max().unwrap_or(0);
    (0..len)
        .map(|r| {
            let (sum, count) = spectra
                .iter()
                .filter_map(|s| s.sigma.get(r))
                .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
            sum / count as f64
        })
        .collect()
}
