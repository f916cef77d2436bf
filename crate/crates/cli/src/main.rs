mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rvstab::dataio::{
    collect_frames, load_sequence, save_sequence_archive, write_pnm, NoiseSpec, SequenceClips,
    SequenceSource, StillKind, SyntheticClips, SyntheticStream,
};
use rvstab::diagnostics::strf::frame_strip;
use rvstab::diagnostics::{
    divergence_probe, probe::traces_csv, stability_harness, strf_search, FailureInjector,
    FrameProcessor, HarnessConfig, ModelProcessor, ProbeConfig, Verdict,
};
use rvstab::models::checkpoint::Checkpoint;
use rvstab::models::train::{ClipSampler, Trainer};
use rvstab::models::{layer_sigma1, InferenceOptions, Recurrence, RecurrentModel};
use rvstab::normalization::Scheme;
use rvstab::spectral::{fft_exact_spectrum, spectral_norm_layer};
use rvstab::Padding;

use config::{tag, DataKind, RunConfig};

/// Exit code for an unstable or failing verdict.
const UNSTABLE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "rvstab",
    version,
    about = "Stability laboratory for recurrent video denoisers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Override one key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on synthetic or stored sequences.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Shorthand for `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Clip length in frames, shorthand for `train.frames`.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Adversarial receptive-field search; exits 2 on an unbounded verdict.
    Strf {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to probe; a fresh model from the config otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Long-sequence failure harness; exits 2 when any frame fails.
    Stability {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Frame numbers (from 1) whose output is replaced by a failure.
        #[arg(long, value_delimiter = ',')]
        inject_failures: Vec<usize>,
        /// Shorthand for `harness.frames`.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Per-layer σ1, stable rank and the recurrent Lipschitz bound.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Output-norm growth of every recurrence variant at initialization.
    Probe {
        #[command(flatten)]
        common: Common,
    },
    /// Checks each normalized layer's σ1 against α; exits 2 outside `--tol`.
    Normcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5e-3)]
        tol: f64,
    },
    /// Writes a synthetic moving-crop sequence as PNM files or an archive.
    Gendata {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value = "pnm")]
        format: String,
        #[arg(long, default_value = "blobs")]
        still: String,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.preset {
        cfg.preset(p)?;
    }
    if let Some(path) = &common.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn prepare(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn fresh_model(cfg: &RunConfig) -> Result<RecurrentModel> {
    let mut m = RecurrentModel::build(cfg.arch.clone(), cfg.init, cfg.component_seed(tag::INIT))?;
    m.pad = cfg.padding;
    if cfg.norm.scheme != Scheme::None {
        m = m.with_normalizer(
            cfg.norm.clone(),
            cfg.norm_grid(),
            cfg.component_seed(tag::NORM),
        )?;
    }
    m.normalize_output = cfg.norm_output;
    Ok(m)
}

/// The model an analysis command runs: loaded or fresh, frozen on a copy so
/// the checkpoint on disk is never touched.
fn inference_model(cfg: &RunConfig, path: Option<&Path>) -> Result<RecurrentModel> {
    let mut m = match path {
        Some(p) => {
            Checkpoint::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .model
        }
        None => fresh_model(cfg)?,
    };
    if m.norm.scheme != Scheme::None && m.frozen.is_none() {
        m.freeze_converged()?;
    }
    Ok(m)
}

fn source(cfg: &RunConfig, length: Option<usize>) -> Result<SequenceSource> {
    Ok(match cfg.data.kind {
        DataKind::Synthetic => {
            let mut s = SyntheticStream::new(
                cfg.train.crop,
                cfg.arch.in_channels,
                cfg.component_seed(tag::STREAM),
            );
            s.still_size = cfg.data.still_size;
            s.motion = cfg.data.motion;
            if let Some(l) = length {
                s = s.with_length(l);
            }
            SequenceSource::Synthetic(s)
        }
        DataKind::Directory => {
            SequenceSource::Directory(cfg.data.path.clone().context("data.path")?)
        }
        DataKind::Archive => SequenceSource::Archive(cfg.data.path.clone().context("data.path")?),
    })
}

fn sampler(cfg: &RunConfig) -> Result<Box<dyn ClipSampler>> {
    Ok(match cfg.data.kind {
        DataKind::Synthetic => Box::new(SyntheticClips::new(
            cfg.data.stills,
            cfg.data.still_size,
            cfg.arch.in_channels,
            cfg.data.motion,
            cfg.component_seed(tag::DATA),
        )),
        _ => Box::new(SequenceClips {
            frames: collect_frames(&source(cfg, None)?, None)?,
        }),
    })
}

fn train(mut cfg: RunConfig, resume: Option<&Path>) -> Result<u8> {
    let trainer_from = |cfg: &mut RunConfig| -> Result<Trainer> {
        match resume {
            Some(p) => {
                let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
                cfg.arch = ck.model.spec.clone();
                if let Some((meta, _)) = &ck.train {
                    let steps = cfg.train.steps;
                    cfg.train = meta.config.clone();
                    cfg.train.steps = steps;
                }
                Ok(ck.into_trainer(cfg.train.steps)?)
            }
            None => {
                let mut tc = cfg.train.clone();
                tc.seed = cfg.component_seed(tag::TRAIN);
                Ok(Trainer::new(fresh_model(cfg)?, tc)?)
            }
        }
    };
    let mut trainer = trainer_from(&mut cfg)?;
    prepare(&cfg)?;
    let sampler = sampler(&cfg)?;
    let every = cfg.checkpoint_every;
    let report = (cfg.train.steps / 20).max(1);
    while trainer.step < trainer.cfg.steps {
        let rec = trainer.step_once(sampler.as_ref())?;
        if rec.step % report == 0 || rec.val_psnr.is_some() {
            let v = rec
                .val_psnr
                .map(|p| format!(" val_psnr {p:.2} dB"))
                .unwrap_or_default();
            eprintln!("step {:>6} loss {:.6e}{v}", rec.step, rec.loss);
        }
        let done = trainer.step;
        if every > 0 && done % every == 0 && done < trainer.cfg.steps {
            Checkpoint::from_trainer(&trainer)
                .save(&cfg.out.join(format!("checkpoint-{done:06}.rvpt")))?;
        }
    }
    Checkpoint::from_trainer(&trainer).save(&cfg.out.join("model.rvpt"))?;
    fs::write(cfg.out.join("loss.csv"), trainer.loss_csv())?;
    if !trainer.events.is_empty() {
        eprintln!(
            "{} non-finite events recorded in the checkpoint metadata",
            trainer.events.len()
        );
    }
    println!(
        "trained {} steps, model at {}",
        trainer.step,
        cfg.out.join("model.rvpt").display()
    );
    Ok(0)
}

fn strf(mut cfg: RunConfig, model: Option<&Path>) -> Result<u8> {
    cfg.strf.seed = cfg.component_seed(tag::STRF);
    prepare(&cfg)?;
    let m = inference_model(&cfg, model)?;
    let rep = strf_search(&m, &cfg.strf)?;
    fs::write(
        cfg.out.join("strf.json"),
        serde_json::to_string_pretty(&rep)?,
    )?;
    let mut influence = String::from("t,influence\n");
    for (i, e) in rep.influence.iter().enumerate() {
        influence.push_str(&format!("{},{e}\n", i as i64 - cfg.strf.tau as i64));
    }
    fs::write(cfg.out.join("influence.csv"), influence)?;
    let mut losses = String::from("iteration,loss\n");
    for (i, l) in rep.loss_trace.iter().enumerate() {
        losses.push_str(&format!("{i},{l}\n"));
    }
    fs::write(cfg.out.join("strf_loss.csv"), losses)?;
    let every = (rep.x.len() / 9).max(1);
    if m.spec.in_channels == 1 || m.spec.in_channels == 3 {
        write_pnm(
            &cfg.out.join("strf_inputs.pnm"),
            &frame_strip(&rep.x, every)?,
        )?;
    }
    println!(
        "{}: verdict {:?}, temporal extent {}, growth {:.3e}, best restart {}",
        m.spec.name(),
        rep.verdict,
        rep.temporal_extent,
        rep.growth,
        rep.best_restart
    );
    if rep.dead_gradient {
        eprintln!("warning: gradient with respect to the input was zero at initialization");
    }
    Ok(if rep.verdict == Verdict::Unbounded {
        UNSTABLE
    } else {
        0
    })
}

fn stability(cfg: RunConfig, model: Option<&Path>) -> Result<u8> {
    prepare(&cfg)?;
    let m = inference_model(&cfg, model)?;
    let runner = m.runner(InferenceOptions {
        lambda: cfg.lambda,
        route: cfg.route,
        drop_feedback: false,
    })?;
    let inner = ModelProcessor::new(runner);
    let mut proc_: Box<dyn FrameProcessor> = if cfg.harness.inject.is_empty() {
        Box::new(inner)
    } else {
        Box::new(FailureInjector::new(inner, cfg.harness.inject.clone()))
    };
    let noise = NoiseSpec::from_255(
        cfg.harness.noise_sigma,
        cfg.component_seed(tag::HARNESS_NOISE),
    );
    let hcfg = HarnessConfig {
        psnr_fail: cfg.harness.psnr_fail,
        max_frames: Some(cfg.harness.frames),
        trace_every: cfg.harness.trace_every,
        peak: 1.0,
    };
    let frames = load_sequence(&source(&cfg, Some(cfg.harness.frames))?)?;
    let rep = stability_harness(proc_.as_mut(), frames, &noise, &hcfg)?;
    fs::write(cfg.out.join("psnr.csv"), rep.trace_csv())?;
    fs::write(cfg.out.join("summary.json"), rep.summary_json())?;
    println!(
        "{} frames, {} failures, onset d1 {} d9 {}{}",
        rep.frames,
        rep.onsets.len(),
        rep.deciles.d1,
        rep.deciles.d9,
        if rep.deciles.fallback {
            " (min/max: fewer than 10 onsets)"
        } else {
            ""
        }
    );
    Ok(if rep.unstable() { UNSTABLE } else { 0 })
}

fn spectrum(cfg: RunConfig, model: Option<&Path>) -> Result<u8> {
    prepare(&cfg)?;
    let m = inference_model(&cfg, model)?;
    let n = cfg.spectrum_n;
    let kernels = m.inference_kernels()?;
    let mut csv = String::from("layer,index,sigma\n");
    let mut rows = Vec::new();
    println!(
        "{:<10} {:>12} {:>12} {:>12}",
        "layer", "sigma1", "sigma1_pi", "stable_rank"
    );
    for (l, k) in m.layers.iter().zip(&kernels) {
        let pi = spectral_norm_layer(k, n, m.pad)?;
        let (s1, sr) = if m.pad == Padding::Circular {
            let sp = fft_exact_spectrum(k, n)?;
            for (i, s) in sp.sigma.iter().enumerate() {
                csv.push_str(&format!("{},{i},{s}\n", l.name));
            }
            (sp.sigma1(), sp.stable_rank()?)
        } else {
            (pi, rvstab::spectral::stable_rank_layer(k, n, pi)?)
        };
        println!("{:<10} {:>12.6} {:>12.6} {:>12.4}", l.name, s1, pi, sr);
        rows.push(serde_json::json!({ "layer": l.name, "sigma1": s1, "sigma1_power": pi, "stable_rank": sr }));
    }
    let bound = m.lipschitz_upper_bound(n)?;
    if bound.recurrent {
        println!(
            "recurrent Lipschitz bound {:.6}{}",
            bound.bound,
            if bound.residual_adjusted {
                " (residual-adjusted)"
            } else {
                ""
            }
        );
    } else {
        println!("no recurrent path");
    }
    fs::write(cfg.out.join("spectra.csv"), csv)?;
    fs::write(
        cfg.out.join("spectrum.json"),
        serde_json::to_string_pretty(
            &serde_json::json!({ "n": n, "layers": rows, "lipschitz": bound }),
        )?,
    )?;
    Ok(0)
}

fn probe(cfg: RunConfig) -> Result<u8> {
    prepare(&cfg)?;
    let pcfg = ProbeConfig {
        frames: cfg.probe.frames,
        n: cfg.probe.n,
        init: cfg.probe.init,
        rescale_sigma: cfg.probe.rescale,
        ..ProbeConfig::default()
    };
    let base = cfg.component_seed(tag::PROBE);
    let seeds: Vec<u64> = (0..cfg.probe.seeds as u64)
        .map(|i| base.wrapping_add(i))
        .collect();
    let specs: Vec<_> = Recurrence::ALL
        .iter()
        .map(|&r| {
            let mut s = cfg.arch.clone();
            s.recurrence = r;
            s
        })
        .collect();
    let traces = divergence_probe(&specs, &seeds, &pcfg)?;
    fs::write(cfg.out.join("probe.csv"), traces_csv(&traces))?;
    fs::write(
        cfg.out.join("probe.json"),
        serde_json::to_string_pretty(&traces)?,
    )?;
    for tr in &traces {
        println!(
            "{:<28} seed {:>20} growth {:>12.4e} {:?}",
            tr.architecture, tr.seed, tr.growth, tr.class
        );
    }
    Ok(0)
}

fn normcheck(cfg: RunConfig, model: &Path, tol: f64) -> Result<u8> {
    prepare(&cfg)?;
    let m = inference_model(&cfg, Some(model))?;
    if m.norm.scheme == Scheme::None {
        bail!("{} carries no normalization to check", model.display());
    }
    let kernels = m.inference_kernels()?;
    let alpha = m.norm.alpha;
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for ((l, k), st) in m.layers.iter().zip(&kernels).zip(&m.norm_states) {
        if st.is_none() {
            continue;
        }
        let s1 = layer_sigma1(k, m.norm_n, m.pad)?;
        worst = worst.max((s1 - alpha).abs());
        println!("{:<10} sigma1 {:.6} (alpha {alpha})", l.name, s1);
        rows.push(serde_json::json!({ "layer": l.name, "sigma1": s1 }));
    }
    fs::write(
        cfg.out.join("normcheck.json"),
        serde_json::to_string_pretty(
            &serde_json::json!({ "alpha": alpha, "n": m.norm_n, "layers": rows, "max_deviation": worst }),
        )?,
    )?;
    println!("max |sigma1 - alpha| = {worst:.3e} (tol {tol:.1e})");
    Ok(if worst <= tol { 0 } else { UNSTABLE })
}

fn gendata(cfg: RunConfig, frames: usize, format: &str, still: &str) -> Result<u8> {
    prepare(&cfg)?;
    let kind: StillKind = still.parse()?;
    let mut s = SyntheticStream::new(
        cfg.train.crop,
        cfg.arch.in_channels,
        cfg.component_seed(tag::STREAM),
    )
    .with_length(frames);
    s.still = kind;
    s.still_size = cfg.data.still_size;
    s.motion = cfg.data.motion;
    let seq = collect_frames(&SequenceSource::Synthetic(s), Some(frames))?;
    match format {
        "pnm" => {
            let ext = if cfg.arch.in_channels == 1 {
                "pgm"
            } else {
                "ppm"
            };
            for (i, f) in seq.iter().enumerate() {
                write_pnm(&cfg.out.join(format!("frame_{i:06}.{ext}")), f)?;
            }
        }
        "archive" => save_sequence_archive(&cfg.out.join("sequence.rvpt"), &seq)?,
        other => bail!("unknown format `{other}` (pnm, archive)"),
    }
    println!("wrote {} frames to {}", seq.len(), cfg.out.display());
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Train {
            common,
            resume,
            steps,
            frames,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = frames {
                cfg.train.frames = t;
            }
            if let Some(f) = steps {
                cfg.train.steps = f;
            }
            train(cfg, resume.as_deref())
        }
        Cmd::Strf { common, model } => strf(resolve(&common)?, model.as_deref()),
        Cmd::Stability {
            common,
            model,
            inject_failures,
            frames,
        } => {
            let mut cfg = resolve(&common)?;
            if !inject_failures.is_empty() {
                cfg.harness.inject = inject_failures;
            }
            if let Some(f) = frames {
                cfg.harness.frames = f;
            }
            stability(cfg, model.as_deref())
        }
        Cmd::Spectrum { common, model } => spectrum(resolve(&common)?, model.as_deref()),
        Cmd::Probe { common } => probe(resolve(&common)?),
        Cmd::Normcheck { common, model, tol } => normcheck(resolve(&common)?, &model, tol),
        Cmd::Gendata {
            common,
            frames,
            format,
            still,
        } => gendata(resolve(&common)?, frames, &format, &still),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
