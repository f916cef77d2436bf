//! Tape-based reverse-mode differentiation over the handful of ops the
//! recurrent models need.
//!
//! A [`Tape`] records values eagerly; [`Tape::backward`] replays the tape in
//! reverse once and returns a [`Gradients`] table. Replaying a consumed tape
//! is an error.

use crate::conv::{conv2d_adjoint_raw, conv2d_kernel_grad_raw, conv2d_raw, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Kernel, Padding, Tensor};

/// Gradient entries smaller than this are zeroed during the reverse pass.
/// Long contracting unrolls otherwise drive them (and the products formed
/// from them) into the subnormal range, where f32 arithmetic is orders of
/// magnitude slower.
pub const GRAD_FLUSH: f32 = 1e-30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Conv2dAdjoint {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    ConcatChannels(Vec<(Var, usize)>),
    SumSquares(Var),
    Mse(Var, Var),
    L2Norm(Var),
    CenterPixelAbs {
        input: Var,
        index: usize,
    },
    SumScalars(Vec<Var>),
    InnerConst {
        input: Var,
        weights: Vec<f32>,
    },
    /// `x / (⟨d, x⟩ + eps)` with `d` held constant.
    SpectralNormalize {
        input: Var,
        direction: Vec<f32>,
        denom: f64,
    },
    /// `gain · x + offset` with constant offset.
    Affine {
        input: Var,
        gain: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf whose gradient is tracked (parameters, optimised inputs).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn kernel_dims(&self, kernel: Var) -> Result<(usize, usize, usize)> {
        match self.value(kernel).shape()[..] {
            [k, k2, m_in, m_out] if k == k2 && k % 2 == 1 => Ok((k, m_in, m_out)),
            ref s => Err(Error::shape(format!("not a kernel tensor: {s:?}"))),
        }
    }

    fn geom(&self, input: Var, kernel: Var, pad: Padding, adjoint: bool) -> Result<ConvGeom> {
        let (k, m_in, m_out) = self.kernel_dims(kernel)?;
        let (h, w, c) = self.value(input).hwc()?;
        let expected = if adjoint { m_out } else { m_in };
        if c != expected {
            return Err(Error::shape(format!(
                "conv input has {c} channels, kernel expects {expected}"
            )));
        }
        let geom = ConvGeom {
            h,
            w,
            k,
            m_in,
            m_out,
            pad,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: Padding) -> Result<Var> {
        let geom = self.geom(input, kernel, pad, false)?;
        let mut out = vec![0.0f32; geom.output_len()];
        conv2d_raw(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            &mut out,
        );
        let value = Tensor::new(vec![geom.h, geom.w, geom.m_out], out)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            needs,
        ))
    }

    pub fn conv2d_adjoint(&mut self, input: Var, kernel: Var, pad: Padding) -> Result<Var> {
        let geom = self.geom(input, kernel, pad, true)?;
        let mut out = vec![0.0f32; geom.input_len()];
        conv2d_adjoint_raw(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            &mut out,
        );
        let value = Tensor::new(vec![geom.h, geom.w, geom.m_in], out)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            value,
            Op::Conv2dAdjoint {
                input,
                kernel,
                geom,
            },
            needs,
        ))
    }

    /// Adds a per-channel bias to a feature map.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, _, c) = self.value(input).hwc()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::shape(format!(
                "bias of length {} for {c} channels",
                b.len()
            )));
        }
        let mut out = self.value(input).clone();
        let bd = b.data().to_vec();
        for px in out.data_mut().chunks_mut(c) {
            for (v, &bv) in px.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(out, Op::BiasAdd { input, bias }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = self.value(x).scale(c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        let mut spec = Vec::with_capacity(parts.len());
        for &p in parts {
            spec.push((p, self.value(p).hwc()?.2));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatChannels(spec), needs))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_squares() as f32);
        let needs = self.needs(x);
        self.push(value, Op::SumSquares(x), needs)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(format!(
                "mse of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = ta.len().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar((s / n) as f32), Op::Mse(a, b), needs))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).l2_norm() as f32);
        let needs = self.needs(x);
        self.push(value, Op::L2Norm(x), needs)
    }

    /// `|y[⌊h/2⌋, ⌊w/2⌋, 0]|`.
    pub fn center_pixel_abs(&mut self, x: Var) -> Result<Var> {
        let index = center_index(self.value(x))?;
        let value = Tensor::scalar(self.value(x).data()[index].abs());
        let needs = self.needs(x);
        Ok(self.push(value, Op::CenterPixelAbs { input: x, index }, needs))
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut s = 0.0f64;
        for &x in xs {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(Error::shape("sum_scalars expects scalars"));
            }
            s += t.item() as f64;
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor::scalar(s as f32), Op::SumScalars(xs.to_vec()), needs))
    }

    /// `⟨weights, x⟩` against a constant.
    pub fn inner_const(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != weights.len() {
            return Err(Error::shape("inner product length mismatch"));
        }
        let s: f64 = t
            .data()
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::InnerConst {
                input: x,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    /// `x / (⟨direction, x⟩ + eps)`; the direction carries no gradient.
    pub fn spectral_normalize(&mut self, x: Var, direction: &[f32], eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.len() != direction.len() {
            return Err(Error::shape("normalization direction length mismatch"));
        }
        let sigma: f64 = t
            .data()
            .iter()
            .zip(direction)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let denom = sigma + eps;
        let value = t.map(|v| (v as f64 / denom) as f32);
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::SpectralNormalize {
                input: x,
                direction: direction.to_vec(),
                denom,
            },
            needs,
        ))
    }

    /// `gain · x + offset` with a constant offset.
    pub fn affine(&mut self, x: Var, gain: f32, offset: &[f32]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != offset.len() {
            return Err(Error::shape("affine offset length mismatch"));
        }
        let mut value = t.clone();
        for (v, &o) in value.data_mut().iter_mut().zip(offset) {
            *v = gain * *v + o;
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::Affine { input: x, gain }, needs))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward called twice on the same recording".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape("backward needs a scalar loss".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            for v in g.iter_mut().filter(|v| v.abs() < GRAD_FLUSH) {
                *v = 0.0;
            }
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                } => {
                    if self.needs(*input) {
                        let acc = slot(&mut grads, *input, geom.input_len());
                        conv2d_adjoint_raw(geom, &g, self.value(*kernel).data(), acc);
                    }
                    if self.needs(*kernel) {
                        let n = self.value(*kernel).len();
                        let acc = slot(&mut grads, *kernel, n);
                        conv2d_kernel_grad_raw(geom, self.value(*input).data(), &g, acc);
                    }
                }
                Op::Conv2dAdjoint {
                    input,
                    kernel,
                    geom,
                } => {
                    // y = Kᵀ * u  ⇒  ∂u = K * g,  ∂K[., i, o] = Σ g[i] u[o]
                    if self.needs(*input) {
                        let acc = slot(&mut grads, *input, geom.output_len());
                        conv2d_raw(geom, &g, self.value(*kernel).data(), acc);
                    }
                    if self.needs(*kernel) {
                        let n = self.value(*kernel).len();
                        let acc = slot(&mut grads, *kernel, n);
                        conv2d_kernel_grad_raw(geom, &g, self.value(*input).data(), acc);
                    }
                }
                Op::BiasAdd { input, bias } => {
                    let c = self.value(*bias).len();
                    if self.needs(*bias) {
                        let acc = slot(&mut grads, *bias, c);
                        for px in g.chunks(c) {
                            for (a, &v) in acc.iter_mut().zip(px) {
                                *a += v;
                            }
                        }
                    }
                    if self.needs(*input) {
                        accumulate(&mut grads, *input, &g);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let masked: Vec<f32> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &masked);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.needs(*b) {
                        let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *b, &neg);
                    }
                }
                Op::Scale(x, c) => {
                    let scaled: Vec<f32> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, &scaled);
                }
                Op::ConcatChannels(parts) => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let pixels = g.len() / total;
                    let mut offset = 0;
                    for &(p, c) in parts {
                        if self.needs(p) {
                            let acc = slot(&mut grads, p, pixels * c);
                            for px in 0..pixels {
                                let src = &g[px * total + offset..px * total + offset + c];
                                for (a, &v) in acc[px * c..(px + 1) * c].iter_mut().zip(src) {
                                    *a += v;
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::SumSquares(x) => {
                    let s = 2.0 * g[0];
                    let d: Vec<f32> = self.value(*x).data().iter().map(|&v| s * v).collect();
                    accumulate(&mut grads, *x, &d);
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    let s = 2.0 * g[0] / ta.len().max(1) as f32;
                    let d: Vec<f32> = ta.iter().zip(tb).map(|(&x, &y)| s * (x - y)).collect();
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &d);
                    }
                    if self.needs(*b) {
                        let neg: Vec<f32> = d.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *b, &neg);
                    }
                }
                Op::L2Norm(x) => {
                    let norm = node.value.item();
                    let t = self.value(*x).data();
                    let d: Vec<f32> = if norm > 0.0 {
                        t.iter().map(|&v| g[0] * v / norm).collect()
                    } else {
                        vec![0.0; t.len()]
                    };
                    accumulate(&mut grads, *x, &d);
                }
                Op::CenterPixelAbs { input, index } => {
                    let v = self.value(*input).data()[*index];
                    let n = self.value(*input).len();
                    let sign = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    let acc = slot(&mut grads, *input, n);
                    acc[*index] += g[0] * sign;
                }
                Op::SumScalars(xs) => {
                    for &x in xs {
                        if self.needs(x) {
                            accumulate(&mut grads, x, &g);
                        }
                    }
                }
                Op::InnerConst { input, weights } => {
                    let d: Vec<f32> = weights.iter().map(|w| w * g[0]).collect();
                    accumulate(&mut grads, *input, &d);
                }
                Op::SpectralNormalize {
                    input,
                    direction,
                    denom,
                } => {
                    // y = x / (⟨d,x⟩+ε)  ⇒  ∂x = g/D − d·⟨g,x⟩/D²
                    let x = self.value(*input).data();
                    let gx: f64 = g.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let c = gx / (denom * denom);
                    let d: Vec<f32> = g
                        .iter()
                        .zip(direction)
                        .map(|(&gv, &dv)| (gv as f64 / denom - dv as f64 * c) as f32)
                        .collect();
                    accumulate(&mut grads, *input, &d);
                }
                Op::Affine { input, gain } => {
                    let d: Vec<f32> = g.iter().map(|v| v * gain).collect();
                    accumulate(&mut grads, *input, &d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn center_index(t: &Tensor) -> Result<usize> {
    let (h, w, c) = t.hwc()?;
    Ok(((h / 2) * w + w / 2) * c)
}

/// Gradients of leaves produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled to `len` when unreached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f32> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f32]>::to_vec)
    }

    pub fn kernel(&self, v: Var, like: &Kernel) -> Result<Kernel> {
        Kernel::new(
            like.k(),
            like.m_in(),
            like.m_out(),
            self.get_or_zeros(v, like.weights().len()),
        )
    }
}

/// Elementwise ReLU.
pub fn relu(t: &Tensor) -> Tensor {
    t.relu()
}

/// Mean squared error.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "mse of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

pub fn l2_norm(t: &Tensor) -> f64 {
    t.l2_norm()
}

/// Absolute value of channel 0 at the spatial centre `(⌊h/2⌋, ⌊w/2⌋)`.
pub fn l1_center_pixel(y: &Tensor) -> Result<f64> {
    Ok(y.data()[center_index(y)?].abs() as f64)
}
