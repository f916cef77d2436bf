//! Dense row-major `f32` tensors, feature maps and convolution kernels.
//!
//! Feature maps are stored channel-last as `[height, width, channels]`.
//! Kernels are stored as `[k, k, m_in, m_out]`, so the flat weight buffer
//! doubles as the `[k*k*m_in, m_out]` reshaped matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// A rank-3 `[height, width, channels]` tensor.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn feature_map(height: usize, width: usize, channels: usize) -> Self {
        Self::zeros(&[height, width, channels])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(height, width, channels)` of a rank-3 feature map.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!(
                "expected a [h, w, c] feature map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_non_finite(&self) -> usize {
        self.data.iter().filter(|v| !v.is_finite()).count()
    }

    /// Value of the single element of a scalar-like tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f32 {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Concatenates feature maps of equal spatial size along channels.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (h, w, _) = first.hwc()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (ph, pw, pc) = p.hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat spatial mismatch {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        Ok(Tensor {
            shape: vec![h, w, total],
            data,
        })
    }

    /// Channels `[start, start + count)` of a feature map.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let (h, w, c) = self.hwc()?;
        if start + count > c {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of {c}",
                start + count
            )));
        }
        let mut data = Vec::with_capacity(h * w * count);
        for px in 0..h * w {
            data.extend_from_slice(&self.data[px * c + start..px * c + start + count]);
        }
        Ok(Tensor {
            shape: vec![h, w, count],
            data,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Circular,
    Zero,
}

/// Convolution weights of shape `[k, k, m_in, m_out]` with odd `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    k: usize,
    m_in: usize,
    m_out: usize,
    weights: Vec<f32>,
}

impl Kernel {
    pub fn new(k: usize, m_in: usize, m_out: usize, weights: Vec<f32>) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::shape(format!("kernel size must be odd, got {k}")));
        }
        if m_in == 0 || m_out == 0 {
            return Err(Error::shape("kernel with zero channels"));
        }
        if weights.len() != k * k * m_in * m_out {
            return Err(Error::shape(format!(
                "kernel [{k},{k},{m_in},{m_out}] needs {} weights, got {}",
                k * k * m_in * m_out,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("kernel weights".into()));
        }
        Ok(Self {
            k,
            m_in,
            m_out,
            weights,
        })
    }

    pub fn zeros(k: usize, m_in: usize, m_out: usize) -> Self {
        Self::new(k, m_in, m_out, vec![0.0; k * k * m_in * m_out]).expect("valid zero kernel")
    }

    /// Centered delta mapping channel `i` to channel `i`.
    pub fn identity(k: usize, m: usize) -> Self {
        let mut kern = Self::zeros(k, m, m);
        let c = k / 2;
        for i in 0..m {
            *kern.at_mut(c, c, i, i) = 1.0;
        }
        kern
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape()[..] {
            [k, k2, m_in, m_out] if k == k2 => Self::new(k, m_in, m_out, t.data().to_vec()),
            _ => Err(Error::shape(format!(
                "expected a [k, k, m_in, m_out] kernel tensor, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.k, self.k, self.m_in, self.m_out],
            self.weights.clone(),
        )
        .expect("consistent kernel")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m_in(&self) -> usize {
        self.m_in
    }

    pub fn m_out(&self) -> usize {
        self.m_out
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<f32> {
        self.weights
    }

    pub fn index(&self, dy: usize, dx: usize, i: usize, o: usize) -> usize {
        ((dy * self.k + dx) * self.m_in + i) * self.m_out + o
    }

    pub fn at(&self, dy: usize, dx: usize, i: usize, o: usize) -> f32 {
        self.weights[self.index(dy, dx, i, o)]
    }

    pub fn at_mut(&mut self, dy: usize, dx: usize, i: usize, o: usize) -> &mut f32 {
        let idx = self.index(dy, dx, i, o);
        &mut self.weights[idx]
    }

    pub fn frobenius(&self) -> f64 {
        self.weights
            .iter()
            .map(|&w| (w as f64) * (w as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&self, c: f32) -> Kernel {
        Kernel {
            weights: self.weights.iter().map(|&w| w * c).collect(),
            ..self.clone()
        }
    }

    pub fn dot(&self, other: &Kernel) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn weights_f64(&self) -> Vec<f64> {
        self.weights.iter().map(|&w| w as f64).collect()
    }

    /// Builds a kernel from `f64` weights, rounding to `f32`.
    pub fn from_f64(k: usize, m_in: usize, m_out: usize, weights: &[f64]) -> Result<Self> {
        Self::new(k, m_in, m_out, weights.iter().map(|&w| w as f32).collect())
    }

    /// Input channels `[start, start + count)` of the kernel.
    pub fn slice_inputs(&self, start: usize, count: usize) -> Result<Kernel> {
        if start + count > self.m_in {
            return Err(Error::shape(format!(
                "input-channel slice {start}..{} out of {}",
                start + count,
                self.m_in
            )));
        }
        let mut out = Kernel::zeros(self.k, count, self.m_out);
        for dy in 0..self.k {
            for dx in 0..self.k {
                for i in 0..count {
                    for o in 0..self.m_out {
                        *out.at_mut(dy, dx, i, o) = self.at(dy, dx, start + i, o);
                    }
                }
            }
        }
        Ok(out)
    }
}
