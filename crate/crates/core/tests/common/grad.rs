//! Gradient and adjoint checks shared by the test suites and the
//! acceptance runner. Each returns `(case, relative error)` pairs.

use rand::Rng;
use rvstab::autodiff::Tape;
use rvstab::conv::{conv2d, conv2d_adjoint, conv2d_raw, ConvGeom};
use rvstab::models::wiring::Ops;
use rvstab::models::{ArchitectureSpec, Backbone, Init, Recurrence, RecurrentModel};
use rvstab::{Padding, Tensor};

use super::{
    central_diff, random_kernel, random_tensor, rel_err, rng, unroll_loss, Map, OracleOps, Params,
};

const STEP: f64 = 1e-5;

fn conv_f64(x: &[f64], w: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; geom.output_len()];
    conv2d_raw(geom, x, w, &mut out);
    out
}

/// `(case, relative error)` for the kernel and input gradients of one conv.
pub fn conv_errors() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let mut r = rng(11);
    for (k, m_in, m_out, n, pad) in [
        (3, 2, 3, 6, Padding::Circular),
        (1, 3, 2, 5, Padding::Circular),
        (5, 1, 2, 7, Padding::Zero),
        (3, 2, 2, 6, Padding::Zero),
    ] {
        let x = random_tensor(&[n, n, m_in], &mut r, 1.0);
        let kern = random_kernel(k, m_in, m_out, &mut r);
        let target = random_tensor(&[n, n, m_out], &mut r, 1.0);

        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let kv = tape.param(kern.to_tensor());
        let tv = tape.constant(target.clone());
        let y = tape.conv2d(xv, kv, pad).unwrap();
        let loss = tape.mse(y, tv).unwrap();
        let g = tape.backward(loss).unwrap();

        let geom = ConvGeom::new(n, n, &kern, pad).unwrap();
        let t64: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
        let mse = |out: Vec<f64>| {
            out.iter()
                .zip(&t64)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / out.len() as f64
        };
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let w64 = kern.weights_f64();

        let fd_k = central_diff(&w64, STEP, |w| mse(conv_f64(&x64, w, &geom)));
        let fd_x = central_diff(&x64, STEP, |xp| mse(conv_f64(xp, &w64, &geom)));
        let ek = rel_err(g.get(kv).unwrap(), &fd_k);
        let ex = rel_err(g.get(xv).unwrap(), &fd_x);
        errs.push((format!("conv kernel k={k} {m_in}->{m_out} {pad:?}"), ek));
        errs.push((format!("conv input k={k} {m_in}->{m_out} {pad:?}"), ex));
    }
    errs
}

/// Kernel and bias gradients of a conv-ReLU-conv-ReLU-conv stack.
pub fn stack_errors() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let mut r = rng(12);
    let n = 6;
    let shapes = [(3, 2, 4), (3, 4, 4), (3, 4, 1)];
    let kernels: Vec<_> = shapes
        .iter()
        .map(|&(k, a, b)| random_kernel(k, a, b, &mut r).scale(0.5))
        .collect();
    let biases: Vec<Vec<f32>> = shapes
        .iter()
        .map(|&(_, _, b)| (0..b).map(|_| r.random_range(-0.1f32..0.1)).collect())
        .collect();
    let x = random_tensor(&[n, n, 2], &mut r, 1.0);
    let target = random_tensor(&[n, n, 1], &mut r, 1.0);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv: Vec<_> = kernels.iter().map(|k| tape.param(k.to_tensor())).collect();
    let bv: Vec<_> = biases
        .iter()
        .map(|b| tape.param(Tensor::new(vec![b.len()], b.clone()).unwrap()))
        .collect();
    let mut a = xv;
    for i in 0..3 {
        let z = tape.conv2d(a, kv[i], Padding::Circular).unwrap();
        let z = tape.bias_add(z, bv[i]).unwrap();
        a = if i < 2 { tape.relu(z) } else { z };
    }
    let tv = tape.constant(target.clone());
    let loss = tape.mse(a, tv).unwrap();
    let g = tape.backward(loss).unwrap();

    let params = Params {
        kernels: shapes
            .iter()
            .zip(&kernels)
            .map(|(&(k, a, b), kern)| (k, a, b, kern.weights_f64()))
            .collect(),
        biases: biases
            .iter()
            .map(|b| b.iter().map(|&v| v as f64).collect())
            .collect(),
    };
    let xm = Map::from_tensor(&x);
    let tm = Map::from_tensor(&target);
    let forward = |p: &Params| {
        let mut ops = OracleOps {
            params: p,
            pad: Padding::Circular,
        };
        let mut a = xm.clone();
        for i in 0..3 {
            let z = ops.conv(i, &a).unwrap();
            a = if i < 2 { ops.relu(&z) } else { z };
        }
        a.data
            .iter()
            .zip(&tm.data)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            / a.data.len() as f64
    };
    for layer in 0..3 {
        let w = params.kernels[layer].3.clone();
        let fd = central_diff(&w, STEP, |wp| {
            let mut p = params.clone();
            p.kernels[layer].3 = wp.to_vec();
            forward(&p)
        });
        errs.push((
            format!("stack layer {layer} kernel"),
            rel_err(g.get(kv[layer]).unwrap(), &fd),
        ));
        let b = params.biases[layer].clone();
        let fd = central_diff(&b, STEP, |bp| {
            let mut p = params.clone();
            p.biases[layer] = bp.to_vec();
            forward(&p)
        });
        errs.push((
            format!("stack layer {layer} bias"),
            rel_err(g.get(bv[layer]).unwrap(), &fd),
        ));
    }
    errs
}

/// BPTT through a three-frame unroll, for every recurrence and backbone.
pub fn unroll_errors() -> Vec<(String, f64)> {
    let mut errs = Vec::new();
    let n = 6;
    let t = 3;
    for backbone in [Backbone::TinyVdncnn, Backbone::Vdncnn, Backbone::Vresnet] {
        for rec in Recurrence::ALL {
            let mut spec = ArchitectureSpec::new(backbone, rec)
                .with_channels(3)
                .with_in_channels(1);
            spec.depth = match backbone {
                Backbone::Vresnet => 2,
                _ => 3,
            };
            let mut model = RecurrentModel::build(spec.clone(), Init::He, 5).unwrap();
            let mut r = rng(13);
            for l in &mut model.layers {
                l.bias
                    .iter_mut()
                    .for_each(|b| *b = r.random_range(-0.1..0.1));
            }
            let xs: Vec<Tensor> = (0..t)
                .map(|_| random_tensor(&[n, n, 1], &mut r, 1.0))
                .collect();
            let targets: Vec<Tensor> = (0..t)
                .map(|_| random_tensor(&[n, n, 1], &mut r, 1.0))
                .collect();

            let mut tape = Tape::new();
            let kv: Vec<_> = model
                .layers
                .iter()
                .map(|l| tape.param(l.kernel.to_tensor()))
                .collect();
            let bv: Vec<_> = model
                .layers
                .iter()
                .map(|l| tape.param(Tensor::new(vec![l.bias.len()], l.bias.clone()).unwrap()))
                .collect();
            let xv: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let ys = model.unroll_tape(&mut tape, &kv, &bv, &xv).unwrap();
            let losses: Vec<_> = ys
                .iter()
                .zip(&targets)
                .map(|(&y, tg)| {
                    let tv = tape.constant(tg.clone());
                    tape.mse(y, tv).unwrap()
                })
                .collect();
            let loss = tape.sum_scalars(&losses).unwrap();
            let g = tape.backward(loss).unwrap();

            let params = Params::of(&model);
            let xm: Vec<Map> = xs.iter().map(Map::from_tensor).collect();
            let tm: Vec<Map> = targets.iter().map(Map::from_tensor).collect();
            let f64_loss = unroll_loss(&spec, &params, Padding::Circular, &xm, &tm);
            let tape_loss = tape.value(loss).item() as f64;
            errs.push((
                format!("unroll {} loss", spec.name()),
                (f64_loss - tape_loss).abs() / f64_loss.max(1.0),
            ));
            for layer in 0..params.kernels.len() {
                let w = params.kernels[layer].3.clone();
                let fd = central_diff(&w, STEP, |wp| {
                    let mut p = params.clone();
                    p.kernels[layer].3 = wp.to_vec();
                    unroll_loss(&spec, &p, Padding::Circular, &xm, &tm)
                });
                let got = g.get_or_zeros(kv[layer], w.len());
                errs.push((
                    format!("unroll {} layer {layer}", spec.name()),
                    rel_err(&got, &fd),
                ));
            }
        }
    }
    errs
}

/// Relative adjoint defect `|⟨Kx, y⟩ − ⟨x, Kᵀy⟩|` of `count` random probes.
pub fn adjoint_errors(count: usize) -> Vec<(String, f64)> {
    let mut r = rng(14);
    let mut errs = Vec::new();
    for probe in 0..count {
        let k = [1, 3, 5][r.random_range(0..3)];
        let m_in = r.random_range(1..=4);
        let m_out = r.random_range(1..=4);
        let n = r.random_range(k.max(4)..=12);
        let pad = if probe % 2 == 0 {
            Padding::Circular
        } else {
            Padding::Zero
        };
        let kern = random_kernel(k, m_in, m_out, &mut r);
        let x = random_tensor(&[n, n, m_in], &mut r, 1.0);
        let y = random_tensor(&[n, n, m_out], &mut r, 1.0);
        let kx = conv2d(&x, &kern, pad).unwrap();
        let kty = conv2d_adjoint(&y, &kern, pad).unwrap();
        let (lhs, rhs) = (kx.dot(&y), x.dot(&kty));
        // Scaled by the Cauchy–Schwarz bound so near-orthogonal draws do not
        // turn rounding into a large relative error.
        let rel = (lhs - rhs).abs() / (kx.l2_norm() * y.l2_norm()).max(x.l2_norm() * kty.l2_norm());
        errs.push((
            format!("adjoint probe {probe} k={k} {m_in}->{m_out} n={n} {pad:?}"),
            rel,
        ));
    }
    errs
}
