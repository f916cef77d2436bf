//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset: `cargo test --test acceptance -- 4 7`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rvstab::dataio::{
    load_sequence, MotionConfig, NoiseSpec, SequenceSource, SyntheticClips, SyntheticStream,
};
use rvstab::diagnostics::probe::probe_model;
use rvstab::diagnostics::{divergence_probe, FrameProcessor, StabilityReport};
use rvstab::diagnostics::{
    stability_harness, strf_search, FailureInjector, GrowthClass, HarnessConfig, IdentityProcessor,
    ModelProcessor, ProbeConfig, StrfConfig, Verdict,
};
use rvstab::models::train::{windowed_means, TrainConfig, Trainer};
use rvstab::models::wiring::State;
use rvstab::models::{
    ArchitectureSpec, Backbone, DampenRoute, InferenceOptions, Init, Recurrence, RecurrentModel,
    RecurrentState,
};
use rvstab::normalization::{srn_normalize, srnl_normalize, NormState, NormalizerConfig, Scheme};
use rvstab::spectral::{
    fft_exact_spectrum, materialized_spectrum, power_iteration_layer, PowerIterationState,
};
use rvstab::{Kernel, Padding, Tensor};

use common::{grad, random_kernel, random_tensor, rng};

type Outcome = Result<String, String>;

fn judge(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn layer_sigma(k: &Kernel, n: usize) -> Result<f64, String> {
    Ok(fft_exact_spectrum(k, n).map_err(err)?.sigma1())
}

/// 1. Power iteration, FFT and dense SVD agree on σ1; FFT and SVD agree on
/// the whole spectrum.
fn spectral_triangle() -> Outcome {
    let mut r = rng(101);
    let (mut worst_s1, mut worst_spec) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let k = [1, 3, 5][r.random_range(0..3)];
        let n = [6, 8, 12][r.random_range(0..3)];
        let kern = random_kernel(k, r.random_range(1..=3), r.random_range(1..=3), &mut r);
        let fft = fft_exact_spectrum(&kern, n).map_err(err)?;
        let dense = materialized_spectrum(&kern, n, Padding::Circular).map_err(err)?;
        let mut st = PowerIterationState::random(n, n, kern.m_out(), 1000 + i);
        let pi = power_iteration_layer(&kern, Padding::Circular, &mut st, 200, Some(1e-12))
            .map_err(err)?;
        let s = [pi.sigma, fft.sigma1(), dense.sigma1()];
        for a in s {
            for b in s {
                worst_s1 = worst_s1.max((a - b).abs() / b.abs().max(1e-12));
            }
        }
        if fft.sigma.len() != dense.sigma.len() {
            return Err(format!(
                "kernel {i}: spectrum lengths {} vs {}",
                fft.sigma.len(),
                dense.sigma.len()
            ));
        }
        for (a, b) in fft.sigma.iter().zip(&dense.sigma) {
            worst_spec = worst_spec.max((a - b).abs());
        }
    }
    judge(
        worst_s1 <= 1e-3 && worst_spec <= 1e-6,
        format!("50 kernels: max σ1 rel. disagreement {worst_s1:.1e} (≤ 1e-3), max spectrum gap {worst_spec:.1e} (≤ 1e-6)"),
    )
}

/// 2. Adjoint probes and finite-difference gradient suites.
fn adjoint_and_gradients() -> Outcome {
    let adj = grad::adjoint_errors(200);
    let worst_adj = adj.iter().map(|e| e.1).fold(0.0, f64::max);
    let mut fd = grad::conv_errors();
    fd.extend(grad::stack_errors());
    fd.extend(grad::unroll_errors());
    let (worst_case, worst_fd) = fd
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    judge(
        adj.len() == 200 && worst_adj <= 1e-5 && worst_fd <= 1e-3,
        format!(
            "200 adjoint probes max defect {worst_adj:.1e} (≤ 1e-5); {} gradient checks, worst {worst_fd:.1e} at {worst_case} (≤ 1e-3)",
            fd.len()
        ),
    )
}

fn converged(mut cfg: NormalizerConfig) -> NormalizerConfig {
    cfg.power_iters = 1000;
    cfg
}

/// Near-orthogonal channel mixing at the centre tap plus noise: a flat
/// spectrum, so stable-rank targets below 1 actually bind.
fn high_rank_kernel(m: usize, r: &mut ChaCha8Rng) -> Kernel {
    let mut k = random_kernel(3, m, m, r).scale(0.05);
    for i in 0..m {
        *k.at_mut(1, 1, i, i) += 1.0;
    }
    k
}

/// 3. SRNL sets σ1 and the stable rank; SRN does not set the layer σ1.
fn srnl_postconditions() -> Outcome {
    let n = 8;
    let mut r = rng(303);
    let mut worst_sigma = 0.0f64;
    for alpha in [0.5, 1.0, 1.5, 2.0] {
        for i in 0..10 {
            let kern = random_kernel(
                [1, 3, 5][i % 3],
                r.random_range(1..=4),
                r.random_range(1..=4),
                &mut r,
            );
            let mut st = PowerIterationState::random(n, n, kern.m_out(), i as u64);
            let out = srnl_normalize(
                &kern,
                &converged(NormalizerConfig::srnl(alpha, 1.0)),
                &mut st,
                Padding::Circular,
            )
            .map_err(err)?;
            worst_sigma = worst_sigma.max((layer_sigma(&out.effective(), n)? - alpha).abs());
        }
    }

    let (mut fired, mut worst_frob, mut worst_orth) = (0usize, 0.0f64, 0.0f64);
    for beta in [0.5, 0.25] {
        for i in 0..20 {
            let m = 2 + i % 3;
            let kern = if i % 2 == 0 {
                high_rank_kernel(m, &mut r)
            } else {
                random_kernel(3, m, m, &mut r)
            };
            let mut st = PowerIterationState::random(n, n, m, 50 + i as u64);
            let out = srnl_normalize(
                &kern,
                &converged(NormalizerConfig::srnl(1.0, beta)),
                &mut st,
                Padding::Circular,
            )
            .map_err(err)?;
            let (Some(g), Some(p)) = (out.gamma, &out.rank_one) else {
                continue;
            };
            if g >= 1.0 {
                continue;
            }
            fired += 1;
            let w = out.kernel.weights_f64();
            let op_frob = (n * n) as f64 * w.iter().map(|v| v * v).sum::<f64>();
            let target = beta * m as f64 * (n * n) as f64;
            worst_frob = worst_frob.max((op_frob - target).abs() / target);
            let s2: Vec<f64> = w.iter().zip(p).map(|(a, &b)| a - b as f64).collect();
            let dot: f64 = s2.iter().zip(p).map(|(a, &b)| a * b as f64).sum();
            let norms = s2.iter().map(|v| v * v).sum::<f64>().sqrt()
                * p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            worst_orth = worst_orth.max(dot.abs() / norms.max(1e-300));
        }
    }

    let mut off = 0;
    for i in 0..100u64 {
        let kern = random_kernel(3, r.random_range(2..=4), r.random_range(2..=4), &mut r);
        let cfg = converged(NormalizerConfig::srn(1.0, 1.0));
        let Some(NormState::Reshaped(mut u)) = NormState::for_scheme(Scheme::Srn, &kern, n, i)
        else {
            return Err("SRN state".into());
        };
        let out = srn_normalize(&kern, &cfg, &mut u).map_err(err)?;
        if (layer_sigma(&out.effective(), n)? - 1.0).abs() > 0.05 {
            off += 1;
        }
    }
    judge(
        worst_sigma <= 5e-3 && fired >= 10 && worst_frob <= 1e-2 && worst_orth <= 1e-5 && off >= 90,
        format!(
            "β=1 max |σ1−α| {worst_sigma:.1e} (≤ 5e-3); {fired} γ<1 cases, max Frobenius rel. err {worst_frob:.1e} (≤ 1e-2), max |cos⟨S1,S2⟩| {worst_orth:.1e} (≤ 1e-5); SRN off target on {off}/100 (≥ 90)"
        ),
    )
}

fn contracted_model(seed: u64, n: usize) -> Result<RecurrentModel, String> {
    let spec = ArchitectureSpec::new(Backbone::Vdncnn, Recurrence::Rlsp)
        .with_channels(8)
        .with_in_channels(1);
    let mut m = RecurrentModel::build(spec, Init::He, seed)
        .and_then(|m| m.with_normalizer(NormalizerConfig::srnl(0.5, 1.0), n, seed))
        .map_err(err)?;
    m.freeze_converged().map_err(err)?;
    Ok(m)
}

fn quick_strf(seed: u64) -> StrfConfig {
    StrfConfig {
        tau: 40,
        n: 16,
        iters: 100,
        restarts: 3,
        seed,
        ..StrfConfig::default()
    }
}

fn synthetic_harness(
    proc_: &mut dyn FrameProcessor,
    crop: usize,
    frames: usize,
    seed: u64,
) -> Result<StabilityReport, String> {
    let stream = SyntheticStream::new(crop, 1, seed).with_length(frames);
    let clean = load_sequence(&SequenceSource::Synthetic(stream)).map_err(err)?;
    stability_harness(
        proc_,
        clean,
        &NoiseSpec::from_255(30.0, seed ^ 0x5eed),
        &HarnessConfig::default(),
    )
    .map_err(err)
}

/// 4. An SRNL α=0.5 chain contracts its state, gets a bounded STRF and
/// never fails on a long stream.
fn hard_constraint() -> Outcome {
    let n = 16;
    let alpha: f64 = 0.5;
    let model = contracted_model(0, n)?;
    let l = model.spec.recurrent_path().len();
    let bound = model.lipschitz_upper_bound(n).map_err(err)?.bound;
    let cap = alpha.powi(l as i32);
    let runner = model.runner(InferenceOptions::default()).map_err(err)?;
    let mut r = rng(404);
    let mut worst = 0.0f64;
    let c = model.spec.state_channels();
    for _ in 0..1000 {
        let x = Tensor::from_fn(&[n, n, 1], |_| r.random::<f32>());
        let scale = 10f32.powf(r.random_range(-2.0..2.0));
        let h1 = Tensor::from_fn(&[n, n, c], |_| r.random::<f32>() * scale);
        let eps = scale * 10f32.powf(r.random_range(-3.0..0.0));
        let noise = Normal::new(0.0f32, eps).map_err(err)?;
        let h2 = Tensor::from_fn(&[n, n, c], |i| h1.data()[i] + noise.sample(&mut r));
        let next = |h: &Tensor| -> Result<Tensor, String> {
            let mut st = RecurrentState {
                inner: Some(State {
                    frames: Vec::new(),
                    hidden: Some(h.clone()),
                }),
                frames_seen: 1,
            };
            runner.step(&mut st, &x).map_err(err)?;
            st.inner
                .and_then(|s| s.hidden)
                .ok_or_else(|| "no hidden state".to_string())
        };
        let (a, b) = (next(&h1)?, next(&h2)?);
        let ratio = a.sub(&b).map_err(err)?.l2_norm() / h1.sub(&h2).map_err(err)?.l2_norm();
        worst = worst.max(ratio);
    }

    let mut verdicts = Vec::new();
    for seed in 0..5 {
        let m = contracted_model(seed, n)?;
        let rep = strf_search(&m, &quick_strf(seed)).map_err(err)?;
        verdicts.push((rep.verdict, rep.temporal_extent));
    }
    let bounded = verdicts.iter().filter(|v| v.0 == Verdict::Bounded).count();

    let mut proc_ = ModelProcessor::new(runner);
    let rep = synthetic_harness(&mut proc_, n, 10_000, 7)?;
    judge(
        worst <= cap && bounded == 5 && rep.onsets.is_empty() && rep.frames == 10_000,
        format!(
            "l={l}, Πσ1 {bound:.3e}; 1000 probes max ratio {worst:.3e} (≤ α^l = {cap:.3e}); STRF bounded {bounded}/5 (extents {:?}); {} onsets over {} frames",
            verdicts.iter().map(|v| v.1).collect::<Vec<_>>(),
            rep.onsets.len(),
            rep.frames
        ),
    )
}

const FEEDFORWARD: [Recurrence; 3] = [
    Recurrence::NoneSingle,
    Recurrence::NoneMulti,
    Recurrence::FeatureShift,
];
const RECURRENT: [Recurrence; 3] = [Recurrence::Frame, Recurrence::Feature, Recurrence::Rlsp];

fn probe_spec(r: Recurrence) -> ArchitectureSpec {
    ArchitectureSpec::new(Backbone::Vdncnn, r)
        .with_channels(8)
        .with_in_channels(1)
}

fn probe_cfg(init: Init, rescale: Option<f64>) -> ProbeConfig {
    ProbeConfig {
        frames: 50,
        n: 32,
        init,
        rescale_sigma: rescale,
        ..ProbeConfig::default()
    }
}

const UNSTABLE_INIT: Init = Init::FoldedGaussian(0.1);

/// 5. Feedforward variants stay bounded, σ1=1.5 recurrences diverge,
/// σ1=0.8 recurrences stay bounded.
fn divergence_dichotomy() -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    let count = |specs: &[Recurrence],
                 cfg: &ProbeConfig,
                 want: GrowthClass|
     -> Result<Vec<(Recurrence, usize)>, String> {
        specs
            .iter()
            .map(|&r| {
                let traces = divergence_probe(&[probe_spec(r)], &seeds, cfg).map_err(err)?;
                Ok((r, traces.iter().filter(|t| t.class == want).count()))
            })
            .collect()
    };
    for (r, k) in count(
        &FEEDFORWARD,
        &probe_cfg(Init::Gaussian(0.1), None),
        GrowthClass::Bounded,
    )? {
        ok &= k == 20;
        parts.push(format!("{} bounded {k}/20", r.name()));
    }
    for (r, k) in count(
        &RECURRENT,
        &probe_cfg(UNSTABLE_INIT, Some(1.5)),
        GrowthClass::Divergent,
    )? {
        ok &= k >= 16;
        parts.push(format!("{}@1.5 divergent {k}/20", r.name()));
    }
    for (r, k) in count(
        &RECURRENT,
        &probe_cfg(UNSTABLE_INIT, Some(0.8)),
        GrowthClass::Bounded,
    )? {
        ok &= k == 20;
        parts.push(format!("{}@0.8 bounded {k}/20", r.name()));
    }
    judge(ok, parts.join(", "))
}

/// 6. STRF and the harness agree on every constructed pair.
fn diagnostic_consistency() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in RECURRENT {
        for sigma in [0.8, 1.5] {
            let cfg = probe_cfg(UNSTABLE_INIT, Some(sigma));
            let m = probe_model(&probe_spec(r), &cfg, 0).map_err(err)?;
            let strf = strf_search(&m, &quick_strf(1)).map_err(err)?;
            let mut proc_ =
                ModelProcessor::new(m.runner(InferenceOptions::default()).map_err(err)?);
            let rep = synthetic_harness(&mut proc_, 16, 500, 3)?;
            let agree = (strf.verdict == Verdict::Unbounded) == rep.unstable();
            ok &= agree;
            parts.push(format!(
                "{}@{sigma}: {:?}/{} onsets{}",
                r.name(),
                strf.verdict,
                rep.onsets.len(),
                if agree { "" } else { " DISAGREE" }
            ));
        }
    }
    judge(ok, parts.join(", "))
}

/// 7. Kernel-side and feature-side dampening agree; λ=0 is the
/// single-frame variant.
fn dampening_equivalence() -> Outcome {
    let mut r = rng(707);
    let (mut worst, mut exact) = (0.0f64, true);
    let combos = [
        (Backbone::Vdncnn, 4),
        (Backbone::Vresnet, 2),
        (Backbone::TinyVdncnn, 3),
    ];
    for i in 0..20 {
        let (backbone, depth) = combos[i % 3];
        let rec = RECURRENT[(i / 3) % 3];
        let c_in = if i % 2 == 0 { 1 } else { 3 };
        let spec = ArchitectureSpec::new(backbone, rec)
            .with_channels(4)
            .with_in_channels(c_in)
            .with_depth(depth);
        let mut m = RecurrentModel::build(spec, Init::He, i as u64).map_err(err)?;
        for l in &mut m.layers {
            l.bias
                .iter_mut()
                .for_each(|b| *b = r.random_range(-0.1..0.1));
        }
        let xs: Vec<Tensor> = (0..6)
            .map(|_| random_tensor(&[12, 12, c_in], &mut r, 1.0))
            .collect();
        let run = |opts: InferenceOptions| -> Result<Vec<Tensor>, String> {
            let runner = m.runner(opts).map_err(err)?;
            let mut st = RecurrentState::new();
            xs.iter()
                .map(|x| runner.step(&mut st, x).map(|o| o.y).map_err(err))
                .collect()
        };
        let single = run(InferenceOptions {
            drop_feedback: true,
            ..InferenceOptions::default()
        })?;
        // Shared non-zero state from three undampened frames, then one
        // dampened forward pass per route.
        let warm = m.runner(InferenceOptions::default()).map_err(err)?;
        let mut shared = RecurrentState::new();
        for x in &xs[..3] {
            warm.step(&mut shared, x).map_err(err)?;
        }
        for lambda in [0.0, 0.25, 0.55, 1.0] {
            let by = |route| InferenceOptions {
                lambda,
                route,
                drop_feedback: false,
            };
            let once = |route| -> Result<Tensor, String> {
                let mut st = shared.clone();
                let runner = m.runner(by(route)).map_err(err)?;
                runner.step(&mut st, &xs[3]).map(|o| o.y).map_err(err)
            };
            let (a, b) = (once(DampenRoute::Features)?, once(DampenRoute::Kernel)?);
            let scale = a.data().iter().fold(1.0f32, |s, v| s.max(v.abs())) as f64;
            let d = a
                .data()
                .iter()
                .zip(b.data())
                .fold(0.0f64, |s, (p, q)| s.max((p - q).abs() as f64));
            worst = worst.max(d / scale);
            if lambda == 0.0 {
                exact &= run(by(DampenRoute::Features))? == single
                    && run(by(DampenRoute::Kernel))? == single;
            }
        }
    }
    judge(
        worst <= 1e-6 && exact,
        format!("20 models × 4 λ: max one-step kernel/feature gap {worst:.1e} (≤ 1e-6); λ=0 bit-equal to single-frame over 6 frames: {exact}"),
    )
}

/// 8. Desk-scale long-sequence training protocol.
fn desk_training() -> Outcome {
    let spec = ArchitectureSpec::new(Backbone::TinyVdncnn, Recurrence::Feature).with_in_channels(1);
    let model = RecurrentModel::build(spec, Init::He, 1).map_err(err)?;
    let cfg = TrainConfig {
        steps: 2000,
        lr: 1e-4,
        batch: DESK_BATCH,
        frames: 7,
        crop: 32,
        noise_sigma: 20.0 / 255.0,
        seed: 1,
        val_every: 0,
        ..TrainConfig::default()
    };
    let sampler = SyntheticClips::new(16, 96, 1, MotionConfig::default(), 7);
    let start = Instant::now();
    let mut t = Trainer::new(model, cfg).map_err(err)?;
    t.run(&sampler, |_| {}).map_err(err)?;
    let elapsed = start.elapsed();
    let w = windowed_means(&t.history, 100);
    let rises: Vec<String> = w
        .windows(2)
        .enumerate()
        .filter(|(_, p)| !(p[1] < p[0]))
        .map(|(i, p)| format!("{} ({:.4e} after {:.4e})", i + 1, p[1], p[0]))
        .collect();
    judge(
        rises.is_empty() && elapsed < Duration::from_secs(20 * 60) && w.iter().all(|v| v.is_finite()),
        format!(
            "batch {DESK_BATCH}, {:.0} s; 100-step means {:.3e} → {:.3e}, non-decreasing windows [{}]; {} non-finite events",
            elapsed.as_secs_f64(),
            w.first().copied().unwrap_or(f64::NAN),
            w.last().copied().unwrap_or(f64::NAN),
            rises.join(", "),
            t.events.len()
        ),
    )
}

const DESK_BATCH: usize = 8;

/// 9. The injected-failure example, run twice.
fn harness_bookkeeping() -> Outcome {
    let once = || {
        let gray = (0..300).map(|_| Ok(Tensor::full(&[16, 16, 1], 0.5)));
        let mut p = FailureInjector::new(IdentityProcessor, vec![100, 250]);
        stability_harness(
            &mut p,
            gray,
            &NoiseSpec::from_255(30.0, 9),
            &HarnessConfig::default(),
        )
        .map_err(err)
    };
    let (a, b) = (once()?, once()?);
    let same = a == b
        && a.summary_json() == b.summary_json()
        && a.trace
            .iter()
            .zip(&b.trace)
            .all(|(p, q)| p.psnr.to_bits() == q.psnr.to_bits());
    judge(
        a.onsets == [100, 150]
            && a.deciles.d1 == 100.0
            && a.deciles.d9 == 150.0
            && a.deciles.fallback
            && same,
        format!(
            "onsets {:?}, d1 {} d9 {} (min/max fallback {}), repeat bit-identical: {same}",
            a.onsets, a.deciles.d1, a.deciles.d9, a.deciles.fallback
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, u64, fn() -> Outcome); 9] = [
        (1, "spectral oracle triangle", 60, spectral_triangle),
        (2, "adjoint and gradient suites", 120, adjoint_and_gradients),
        (3, "SRNL postconditions", 120, srnl_postconditions),
        (4, "hard-constraint contraction", 600, hard_constraint),
        (5, "divergence dichotomy", 300, divergence_dichotomy),
        (6, "diagnostic consistency", 600, diagnostic_consistency),
        (7, "dampening equivalence", 60, dampening_equivalence),
        (8, "desk-scale long-sequence training", 1200, desk_training),
        (9, "harness bookkeeping", 60, harness_bookkeeping),
    ];
    // Numbers pick criteria, other words filter by name like libtest does,
    // and flags are ignored apart from `--list`.
    let args: Vec<String> = std::env::args().skip(1).collect();
    let words: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected = |id: u32, name: &str| {
        words.is_empty()
            || words
                .iter()
                .any(|w| w.parse() == Ok(id) || name.contains(w.as_str()))
    };
    if args.iter().any(|a| a == "--list") {
        for (id, name, ..) in criteria {
            if selected(id, name) {
                println!("{id} {name}: test");
            }
        }
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        if !selected(id, name) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) if secs <= limit as f64 => (true, d),
            Ok(d) => (false, format!("{d}; over the {limit} s budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} [{id}] {name} ({secs:.1} s): {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
