//! One frame of every architecture, written once against an abstract
//! backend so the tape (training, adversarial search) and the plain
//! evaluator (inference) cannot drift apart.

use crate::autodiff::{Tape, Var};
use crate::conv::conv2d_unchecked;
use crate::error::{Error, Result};
use crate::models::arch::{ArchitectureSpec, Recurrence};
use crate::tensor::{Kernel, Padding, Tensor};

pub trait Ops {
    type V: Clone;

    /// Convolution with layer `layer`'s kernel, plus its bias.
    fn conv(&mut self, layer: usize, x: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, c: f32) -> Self::V;
    fn concat(&mut self, parts: &[&Self::V]) -> Result<Self::V>;
    fn zeros(&mut self, h: usize, w: usize, c: usize) -> Self::V;
}

/// How the state enters the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Feedback {
    Concat,
    /// Concatenate `λ·h` (feature-side dampening).
    Scaled(f32),
    /// Skip the concatenation; the consuming kernel must have the state
    /// slice removed.
    Dropped,
}

/// Recurrent state for one stream, generic over the backend value type.
#[derive(Clone, Debug, PartialEq)]
pub struct State<V> {
    /// Previous inputs for the multi-frame variant, oldest first.
    pub frames: Vec<V>,
    /// Fed-back features, previous output frame, or shifted features.
    pub hidden: Option<V>,
}

impl<V: Clone> State<V> {
    pub fn zero<O: Ops<V = V>>(spec: &ArchitectureSpec, ops: &mut O, h: usize, w: usize) -> Self {
        let c = spec.in_channels;
        let frames = if spec.recurrence == Recurrence::NoneMulti {
            vec![ops.zeros(h, w, c), ops.zeros(h, w, c)]
        } else {
            Vec::new()
        };
        let sc = spec.state_channels();
        let hidden =
            (sc > 0 && spec.recurrence != Recurrence::NoneMulti).then(|| ops.zeros(h, w, sc));
        Self { frames, hidden }
    }
}

fn feed<O: Ops>(ops: &mut O, base: &O::V, hidden: &O::V, fb: Feedback) -> Result<O::V> {
    match fb {
        Feedback::Concat => ops.concat(&[base, hidden]),
        Feedback::Scaled(l) => {
            let h = ops.scale(hidden, l);
            ops.concat(&[base, &h])
        }
        Feedback::Dropped => Ok(base.clone()),
    }
}

/// `y_t` and the next state from `x_t` and the current state.
///
/// Feedback handling applies only to true recurrences; the delayed inputs
/// of `none_multi` and `feature_shift` are always concatenated.
pub fn forward<O: Ops>(
    spec: &ArchitectureSpec,
    ops: &mut O,
    x: &O::V,
    state: &State<O::V>,
    fb: Feedback,
) -> Result<(O::V, State<O::V>)> {
    let r = spec.recurrence;
    let fb_rec = if r.is_recurrent() {
        fb
    } else {
        Feedback::Concat
    };
    let hidden = || {
        state
            .hidden
            .as_ref()
            .ok_or_else(|| Error::shape("recurrent state not initialised"))
    };
    let input0 = match r {
        Recurrence::NoneMulti => {
            if state.frames.len() != 2 {
                return Err(Error::shape("multi-frame state needs two previous frames"));
            }
            ops.concat(&[&state.frames[0], &state.frames[1], x])?
        }
        Recurrence::Frame => feed(ops, x, hidden()?, fb_rec)?,
        Recurrence::Rlsp if !spec.is_resnet() => feed(ops, x, hidden()?, fb_rec)?,
        _ => x.clone(),
    };
    let mut next_hidden = None;
    let tap = spec.tap();

    let f = if spec.is_resnet() {
        let head = ops.conv(0, &input0)?;
        let mut a = ops.relu(&head);
        let mut layer = 1;
        if spec.has_fusion() {
            if r == Recurrence::FeatureShift {
                next_hidden = Some(a.clone());
            }
            let mixed = feed(ops, &a, hidden()?, fb_rec)?;
            a = ops.conv(1, &mixed)?;
            layer = 2;
        }
        for b in 0..spec.depth {
            let za = ops.conv(layer, &a)?;
            let ra = ops.relu(&za);
            let zb = ops.conv(layer + 1, &ra)?;
            a = ops.add(&a, &zb)?;
            layer += 2;
            if Some(b) == tap && matches!(r, Recurrence::Feature | Recurrence::Rlsp) {
                next_hidden = Some(a.clone());
            }
        }
        ops.conv(layer, &a)?
    } else {
        let inject = spec.inject_conv();
        let mut a = input0;
        let mut out = None;
        for i in 0..spec.depth {
            if Some(i) == inject && i > 0 {
                a = feed(ops, &a, hidden()?, fb_rec)?;
            }
            let z = ops.conv(i, &a)?;
            if i + 1 == spec.depth {
                out = Some(z);
            } else {
                a = ops.relu(&z);
                if Some(i) == tap {
                    next_hidden = Some(a.clone());
                }
            }
        }
        out.expect("depth ≥ 1")
    };

    let y = ops.sub(x, &f)?;
    let next = match r {
        Recurrence::NoneSingle => State {
            frames: Vec::new(),
            hidden: None,
        },
        Recurrence::NoneMulti => State {
            frames: vec![state.frames[1].clone(), x.clone()],
            hidden: None,
        },
        Recurrence::Frame => State {
            frames: Vec::new(),
            hidden: Some(y.clone()),
        },
        _ => State {
            frames: Vec::new(),
            hidden: Some(next_hidden.ok_or_else(|| Error::shape("feature tap not reached"))?),
        },
    };
    Ok((y, next))
}

/// Plain evaluation with fixed kernels.
pub struct EvalOps<'a> {
    pub kernels: &'a [Kernel],
    pub biases: &'a [Vec<f32>],
    pub pad: Padding,
}

pub(crate) fn add_bias(t: &mut Tensor, bias: &[f32]) {
    let c = bias.len();
    for px in t.data_mut().chunks_mut(c) {
        for (v, &b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

impl Ops for EvalOps<'_> {
    type V = Tensor;

    fn conv(&mut self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d_unchecked(x, &self.kernels[layer], self.pad)?;
        add_bias(&mut y, &self.biases[layer]);
        Ok(y)
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        x.relu()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }

    fn scale(&mut self, x: &Tensor, c: f32) -> Tensor {
        x.scale(c)
    }

    fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        Tensor::concat_channels(parts)
    }

    fn zeros(&mut self, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::zeros(&[h, w, c])
    }
}

/// Records onto a tape; kernels and biases are tape variables.
pub struct TapeOps<'a> {
    pub tape: &'a mut Tape,
    pub kernels: &'a [Var],
    pub biases: &'a [Var],
    pub pad: Padding,
}

impl Ops for TapeOps<'_> {
    type V = Var;

    fn conv(&mut self, layer: usize, x: &Var) -> Result<Var> {
        let y = self.tape.conv2d(*x, self.kernels[layer], self.pad)?;
        self.tape.bias_add(y, self.biases[layer])
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.tape.relu(*x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.sub(*a, *b)
    }

    fn scale(&mut self, x: &Var, c: f32) -> Var {
        self.tape.scale(*x, c)
    }

    fn concat(&mut self, parts: &[&Var]) -> Result<Var> {
        let p: Vec<Var> = parts.iter().map(|v| **v).collect();
        self.tape.concat_channels(&p)
    }

    fn zeros(&mut self, h: usize, w: usize, c: usize) -> Var {
        self.tape.constant(Tensor::zeros(&[h, w, c]))
    }
}
