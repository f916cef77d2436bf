//! Line-oriented run configuration: `section.key = value`, `#` comments.
//!
//! Every run writes the fully resolved file next to its outputs, and that
//! file alone reproduces the run.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rvstab::dataio::MotionConfig;
use rvstab::diagnostics::StrfConfig;
use rvstab::models::train::{derive_seed, TrainConfig};
use rvstab::models::{ArchitectureSpec, Backbone, DampenRoute, Init, Recurrence};
use rvstab::normalization::{NormalizerConfig, Scheme};
use rvstab::Padding;

/// Stream tags for [`RunConfig::component_seed`].
pub mod tag {
    pub const INIT: u64 = 10;
    pub const TRAIN: u64 = 11;
    pub const STRF: u64 = 12;
    pub const HARNESS_NOISE: u64 = 13;
    pub const STREAM: u64 = 14;
    pub const PROBE: u64 = 15;
    pub const NORM: u64 = 16;
    pub const DATA: u64 = 17;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Directory,
    Archive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    /// Procedural stills in the synthetic pool.
    pub stills: usize,
    pub still_size: usize,
    pub motion: MotionConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessSection {
    pub frames: usize,
    /// On the 0–255 scale.
    pub noise_sigma: f32,
    pub psnr_fail: f64,
    pub trace_every: usize,
    /// Frame numbers at which the failure injector fires; empty disables it.
    pub inject: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSection {
    pub frames: usize,
    pub n: usize,
    pub seeds: usize,
    pub init: Init,
    pub rescale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchitectureSpec,
    pub init: Init,
    pub padding: Padding,
    pub norm: NormalizerConfig,
    /// Grid for the layer normalization; defaults to the training crop.
    pub norm_n: Option<usize>,
    pub norm_output: bool,
    pub lambda: f64,
    pub route: DampenRoute,
    pub train: TrainConfig,
    /// Write a resumable checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub strf: StrfConfig,
    pub harness: HarnessSection,
    pub probe: ProbeSection,
    pub spectrum_n: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchitectureSpec::new(Backbone::TinyVdncnn, Recurrence::Feature)
                .with_in_channels(1),
            init: Init::He,
            padding: Padding::Circular,
            norm: NormalizerConfig::default(),
            norm_n: None,
            norm_output: true,
            lambda: 1.0,
            route: DampenRoute::Features,
            train: TrainConfig::default(),
            checkpoint_every: 0,
            data: DataConfig {
                kind: DataKind::Synthetic,
                path: None,
                stills: 16,
                still_size: 96,
                motion: MotionConfig::default(),
            },
            strf: StrfConfig::default(),
            harness: HarnessSection {
                frames: 1000,
                noise_sigma: 30.0,
                psnr_fail: 0.0,
                trace_every: 1,
                inject: Vec::new(),
            },
            probe: ProbeSection {
                frames: 50,
                n: 32,
                seeds: 5,
                init: Init::Gaussian(0.1),
                rescale: None,
            },
            spectrum_n: 32,
            seed: 0,
            out: PathBuf::from("out"),
            threads: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "arch.backbone",
    "arch.recurrence",
    "arch.channels",
    "arch.depth",
    "arch.kernel_size",
    "arch.in_channels",
    "arch.feature_tap",
    "arch.init",
    "arch.padding",
    "norm.scheme",
    "norm.alpha",
    "norm.beta",
    "norm.epsilon",
    "norm.power_iters",
    "norm.n",
    "norm.output",
    "dampening.lambda",
    "dampening.route",
    "train.steps",
    "train.lr",
    "train.batch",
    "train.frames",
    "train.crop",
    "train.noise_sigma",
    "train.val_every",
    "train.val_clips",
    "train.halt_on_non_finite",
    "train.clip_norm",
    "train.checkpoint_every",
    "data.source",
    "data.path",
    "data.stills",
    "data.still_size",
    "motion.v_max",
    "motion.accel_std",
    "strf.loss",
    "strf.tau",
    "strf.n",
    "strf.iters",
    "strf.lr",
    "strf.restarts",
    "strf.theta_infl",
    "strf.theta_div",
    "harness.frames",
    "harness.noise_sigma",
    "harness.psnr_fail",
    "harness.trace_every",
    "harness.inject",
    "probe.frames",
    "probe.n",
    "probe.seeds",
    "probe.init",
    "probe.rescale",
    "spectrum.n",
    "run.seed",
    "run.out",
    "run.threads",
];

fn num<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| anyhow!("cannot parse `{v}`: {e}"))
}

fn flag(v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("expected true or false, got `{v}`"),
    }
}

fn optional<T: FromStr>(v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if matches!(v, "none" | "auto") {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref()
        .map_or_else(|| none.to_string(), |x| x.to_string())
}

pub fn parse_init(v: &str) -> Result<Init> {
    match v.split_once(':') {
        None if v == "he" => Ok(Init::He),
        Some(("gaussian", s)) => Ok(Init::Gaussian(num(s)?)),
        Some(("folded", s)) => Ok(Init::FoldedGaussian(num(s)?)),
        _ => bail!("expected he, gaussian:<std> or folded:<std>, got `{v}`"),
    }
}

pub fn show_init(i: Init) -> String {
    match i {
        Init::He => "he".into(),
        Init::Gaussian(s) => format!("gaussian:{s}"),
        Init::FoldedGaussian(s) => format!("folded:{s}"),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "arch.backbone" => self.arch.backbone = Backbone::from_str(v)?,
            "arch.recurrence" => self.arch.recurrence = Recurrence::from_str(v)?,
            "arch.channels" => self.arch.channels = num(v)?,
            "arch.depth" => self.arch.depth = num(v)?,
            "arch.kernel_size" => self.arch.kernel_size = num(v)?,
            "arch.in_channels" => self.arch.in_channels = num(v)?,
            "arch.feature_tap" => self.arch.feature_tap = optional(v)?,
            "arch.init" => self.init = parse_init(v)?,
            "arch.padding" => {
                self.padding = match v {
                    "circular" => Padding::Circular,
                    "zero" => Padding::Zero,
                    _ => bail!("expected circular or zero, got `{v}`"),
                }
            }
            "norm.scheme" => self.norm.scheme = Scheme::from_str(v)?,
            "norm.alpha" => self.norm.alpha = num(v)?,
            "norm.beta" => self.norm.beta = num(v)?,
            "norm.epsilon" => self.norm.epsilon = num(v)?,
            "norm.power_iters" => self.norm.power_iters = num(v)?,
            "norm.n" => self.norm_n = optional(v)?,
            "norm.output" => self.norm_output = flag(v)?,
            "dampening.lambda" => self.lambda = num(v)?,
            "dampening.route" => {
                self.route = match v {
                    "features" => DampenRoute::Features,
                    "kernel" => DampenRoute::Kernel,
                    _ => bail!("expected features or kernel, got `{v}`"),
                }
            }
            "train.steps" => self.train.steps = num(v)?,
            "train.lr" => self.train.lr = num(v)?,
            "train.batch" => self.train.batch = num(v)?,
            "train.frames" => self.train.frames = num(v)?,
            "train.crop" => self.train.crop = num(v)?,
            "train.noise_sigma" => self.train.noise_sigma = num::<f32>(v)? / 255.0,
            "train.val_every" => self.train.val_every = num(v)?,
            "train.val_clips" => self.train.val_clips = num(v)?,
            "train.halt_on_non_finite" => self.train.halt_on_non_finite = flag(v)?,
            "train.clip_norm" => self.train.clip_norm = optional(v)?,
            "train.checkpoint_every" => self.checkpoint_every = num(v)?,
            "data.source" => {
                self.data.kind = match v {
                    "synthetic" => DataKind::Synthetic,
                    "directory" => DataKind::Directory,
                    "archive" => DataKind::Archive,
                    _ => bail!("expected synthetic, directory or archive, got `{v}`"),
                }
            }
            "data.path" => self.data.path = (v != "none").then(|| PathBuf::from(v)),
            "data.stills" => self.data.stills = num(v)?,
            "data.still_size" => self.data.still_size = num(v)?,
            "motion.v_max" => self.data.motion.v_max = num(v)?,
            "motion.accel_std" => self.data.motion.accel_std = num(v)?,
            "strf.loss" => self.strf.loss = v.parse()?,
            "strf.tau" => self.strf.tau = num(v)?,
            "strf.n" => self.strf.n = num(v)?,
            "strf.iters" => self.strf.iters = num(v)?,
            "strf.lr" => self.strf.lr = num(v)?,
            "strf.restarts" => self.strf.restarts = num(v)?,
            "strf.theta_infl" => self.strf.theta_infl = num(v)?,
            "strf.theta_div" => self.strf.theta_div = num(v)?,
            "harness.frames" => self.harness.frames = num(v)?,
            "harness.noise_sigma" => self.harness.noise_sigma = num(v)?,
            "harness.psnr_fail" => self.harness.psnr_fail = num(v)?,
            "harness.trace_every" => self.harness.trace_every = num(v)?,
            "harness.inject" => {
                self.harness.inject = if v == "none" || v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| num(s.trim())).collect::<Result<_>>()?
                }
            }
            "probe.frames" => self.probe.frames = num(v)?,
            "probe.n" => self.probe.n = num(v)?,
            "probe.seeds" => self.probe.seeds = num(v)?,
            "probe.init" => self.probe.init = parse_init(v)?,
            "probe.rescale" => self.probe.rescale = optional(v)?,
            "spectrum.n" => self.spectrum_n = num(v)?,
            "run.seed" => self.seed = num(v)?,
            "run.out" => self.out = PathBuf::from(v),
            "run.threads" => self.threads = num(v)?,
            _ => bail!("unknown key"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "arch.backbone" => self.arch.backbone.name().into(),
            "arch.recurrence" => self.arch.recurrence.name().into(),
            "arch.channels" => self.arch.channels.to_string(),
            "arch.depth" => self.arch.depth.to_string(),
            "arch.kernel_size" => self.arch.kernel_size.to_string(),
            "arch.in_channels" => self.arch.in_channels.to_string(),
            "arch.feature_tap" => show_opt(&self.arch.feature_tap, "auto"),
            "arch.init" => show_init(self.init),
            "arch.padding" => match self.padding {
                Padding::Circular => "circular".into(),
                Padding::Zero => "zero".into(),
            },
            "norm.scheme" => match self.norm.scheme {
                Scheme::None => "none".into(),
                Scheme::Srn => "srn".into(),
                Scheme::Srnl => "srnl".into(),
            },
            "norm.alpha" => self.norm.alpha.to_string(),
            "norm.beta" => self.norm.beta.to_string(),
            "norm.epsilon" => self.norm.epsilon.to_string(),
            "norm.power_iters" => self.norm.power_iters.to_string(),
            "norm.n" => show_opt(&self.norm_n, "auto"),
            "norm.output" => self.norm_output.to_string(),
            "dampening.lambda" => self.lambda.to_string(),
            "dampening.route" => match self.route {
                DampenRoute::Features => "features".into(),
                DampenRoute::Kernel => "kernel".into(),
            },
            "train.steps" => self.train.steps.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.frames" => self.train.frames.to_string(),
            "train.crop" => self.train.crop.to_string(),
            "train.noise_sigma" => (self.train.noise_sigma * 255.0).to_string(),
            "train.val_every" => self.train.val_every.to_string(),
            "train.val_clips" => self.train.val_clips.to_string(),
            "train.halt_on_non_finite" => self.train.halt_on_non_finite.to_string(),
            "train.clip_norm" => show_opt(&self.train.clip_norm, "none"),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "data.source" => match self.data.kind {
                DataKind::Synthetic => "synthetic".into(),
                DataKind::Directory => "directory".into(),
                DataKind::Archive => "archive".into(),
            },
            "data.path" => self
                .data
                .path
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
            "data.stills" => self.data.stills.to_string(),
            "data.still_size" => self.data.still_size.to_string(),
            "motion.v_max" => self.data.motion.v_max.to_string(),
            "motion.accel_std" => self.data.motion.accel_std.to_string(),
            "strf.loss" => match self.strf.loss {
                rvstab::diagnostics::StrfLoss::NormY0 => "norm_y0".into(),
                rvstab::diagnostics::StrfLoss::CenterPixel => "center_pixel".into(),
            },
            "strf.tau" => self.strf.tau.to_string(),
            "strf.n" => self.strf.n.to_string(),
            "strf.iters" => self.strf.iters.to_string(),
            "strf.lr" => self.strf.lr.to_string(),
            "strf.restarts" => self.strf.restarts.to_string(),
            "strf.theta_infl" => self.strf.theta_infl.to_string(),
            "strf.theta_div" => self.strf.theta_div.to_string(),
            "harness.frames" => self.harness.frames.to_string(),
            "harness.noise_sigma" => self.harness.noise_sigma.to_string(),
            "harness.psnr_fail" => self.harness.psnr_fail.to_string(),
            "harness.trace_every" => self.harness.trace_every.to_string(),
            "harness.inject" => {
                if self.harness.inject.is_empty() {
                    "none".into()
                } else {
                    let v: Vec<String> =
                        self.harness.inject.iter().map(|f| f.to_string()).collect();
                    v.join(",")
                }
            }
            "probe.frames" => self.probe.frames.to_string(),
            "probe.n" => self.probe.n.to_string(),
            "probe.seeds" => self.probe.seeds.to_string(),
            "probe.init" => show_init(self.probe.init),
            "probe.rescale" => show_opt(&self.probe.rescale, "none"),
            "spectrum.n" => self.spectrum_n.to_string(),
            "run.seed" => self.seed.to_string(),
            "run.out" => self.out.display().to_string(),
            "run.threads" => self.threads.to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        }
    }

    /// Applies `section.key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `section.key = value`", no + 1))?;
            let key = key.trim();
            self.set(key, value)
                .with_context(|| format!("{origin}:{}: `{key}`", no + 1))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got `{kv}`"))?;
        self.set(k.trim(), v)
            .with_context(|| format!("--set `{}`", k.trim()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        out
    }

    /// Seed of one component, derived from the single run seed.
    pub fn component_seed(&self, tag: u64) -> u64 {
        derive_seed(self.seed, 0, tag)
    }

    pub fn norm_grid(&self) -> usize {
        self.norm_n.unwrap_or(self.train.crop)
    }

    /// Cross-field checks; each error names the key at fault.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate().context("arch.*")?;
        self.norm.validate().context("norm.*")?;
        self.train.validate().context("train.*")?;
        self.strf.validate().context("strf.*")?;
        if !(0.0..=1.0).contains(&self.lambda) {
            bail!("dampening.lambda: must lie in [0, 1], got {}", self.lambda);
        }
        if matches!(self.data.kind, DataKind::Directory | DataKind::Archive)
            && self.data.path.is_none()
        {
            bail!("data.path: required when data.source is directory or archive");
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                bail!("data.path: `{}` does not exist", p.display());
            }
        }
        if self.data.kind == DataKind::Synthetic && self.data.still_size < self.train.crop {
            bail!("data.still_size: must be at least the crop size");
        }
        Ok(())
    }

    /// Desk-scale long-sequence training: one internal conv, gray 32×32
    /// crops, σ = 20.
    pub fn preset(&mut self, name: &str) -> Result<()> {
        match name {
            "appendix-c" => {
                for (k, v) in [
                    ("arch.backbone", "tiny_vdncnn"),
                    ("arch.recurrence", "feature"),
                    ("arch.channels", "16"),
                    ("arch.depth", "3"),
                    ("arch.in_channels", "1"),
                    ("train.crop", "32"),
                    ("train.noise_sigma", "20"),
                    ("train.frames", "7"),
                    ("train.steps", "2000"),
                    ("train.lr", "1e-4"),
                    ("train.batch", "8"),
                    ("data.source", "synthetic"),
                    ("harness.noise_sigma", "20"),
                    ("strf.n", "32"),
                ] {
                    self.set(k, v)?;
                }
                Ok(())
            }
            _ => bail!("unknown preset `{name}` (appendix-c)"),
        }
    }
}
