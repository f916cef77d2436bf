//! Double-precision reference backend for the shared wiring, used as the
//! finite-difference oracle by the integration suites.

#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvstab::conv::{conv2d_raw, ConvGeom};
use rvstab::models::wiring::{self, Feedback, Ops, State};
use rvstab::models::{ArchitectureSpec, RecurrentModel};
use rvstab::{Kernel, Padding, Result, Tensor};

#[derive(Clone, Debug)]
pub struct Map {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w, c) = t.hwc().unwrap();
        Self {
            h,
            w,
            c,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Flat f64 parameters: `(k, m_in, m_out, weights)` and biases per layer.
#[derive(Clone, Debug)]
pub struct Params {
    pub kernels: Vec<(usize, usize, usize, Vec<f64>)>,
    pub biases: Vec<Vec<f64>>,
}

impl Params {
    pub fn of(model: &RecurrentModel) -> Self {
        Self {
            kernels: model
                .layers
                .iter()
                .map(|l| {
                    (
                        l.kernel.k(),
                        l.kernel.m_in(),
                        l.kernel.m_out(),
                        l.kernel.weights_f64(),
                    )
                })
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| l.bias.iter().map(|&b| b as f64).collect())
                .collect(),
        }
    }
}

pub struct OracleOps<'a> {
    pub params: &'a Params,
    pub pad: Padding,
}

impl Ops for OracleOps<'_> {
    type V = Map;

    fn conv(&mut self, layer: usize, x: &Map) -> Result<Map> {
        let (k, m_in, m_out, ref w) = self.params.kernels[layer];
        assert_eq!(x.c, m_in, "oracle conv channel mismatch");
        let geom = ConvGeom {
            h: x.h,
            w: x.w,
            k,
            m_in,
            m_out,
            pad: self.pad,
        };
        let mut out = vec![0.0f64; geom.output_len()];
        conv2d_raw(&geom, &x.data, w, &mut out);
        for px in out.chunks_mut(m_out) {
            for (v, b) in px.iter_mut().zip(&self.params.biases[layer]) {
                *v += b;
            }
        }
        Ok(Map {
            h: x.h,
            w: x.w,
            c: m_out,
            data: out,
        })
    }

    fn relu(&mut self, x: &Map) -> Map {
        Map {
            data: x.data.iter().map(|v| v.max(0.0)).collect(),
            ..x.clone()
        }
    }

    fn add(&mut self, a: &Map, b: &Map) -> Result<Map> {
        Ok(Map {
            data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
            ..a.clone()
        })
    }

    fn sub(&mut self, a: &Map, b: &Map) -> Result<Map> {
        Ok(Map {
            data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
            ..a.clone()
        })
    }

    fn scale(&mut self, x: &Map, c: f32) -> Map {
        Map {
            data: x.data.iter().map(|v| v * c as f64).collect(),
            ..x.clone()
        }
    }

    fn concat(&mut self, parts: &[&Map]) -> Result<Map> {
        let c: usize = parts.iter().map(|p| p.c).sum();
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(h * w * c);
        for px in 0..h * w {
            for p in parts {
                data.extend_from_slice(&p.data[px * p.c..(px + 1) * p.c]);
            }
        }
        Ok(Map { h, w, c, data })
    }

    fn zeros(&mut self, h: usize, w: usize, c: usize) -> Map {
        Map {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }
}

/// Zero-state unroll in f64.
pub fn unroll(spec: &ArchitectureSpec, params: &Params, pad: Padding, xs: &[Map]) -> Vec<Map> {
    let mut ops = OracleOps { params, pad };
    let mut state = State::zero(spec, &mut ops, xs[0].h, xs[0].w);
    let mut ys = Vec::new();
    for x in xs {
        let (y, next) = wiring::forward(spec, &mut ops, x, &state, Feedback::Concat).unwrap();
        ys.push(y);
        state = next;
    }
    ys
}

/// `Σ_t mean((y_t − target_t)²)`.
pub fn unroll_loss(
    spec: &ArchitectureSpec,
    params: &Params,
    pad: Padding,
    xs: &[Map],
    targets: &[Map],
) -> f64 {
    unroll(spec, params, pad, xs)
        .iter()
        .zip(targets)
        .map(|(y, t)| {
            y.data
                .iter()
                .zip(&t.data)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / y.data.len() as f64
        })
        .sum()
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn random_kernel(k: usize, m_in: usize, m_out: usize, rng: &mut ChaCha8Rng) -> Kernel {
    let len = k * k * m_in * m_out;
    Kernel::new(
        k,
        m_in,
        m_out,
        (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_diff(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let hi = f(&probe);
            probe[i] = orig - step;
            let lo = f(&probe);
            probe[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, or `‖a‖` when `b` vanishes.
pub fn rel_err(a: &[f32], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(&x, y)| (x as f64 - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}
