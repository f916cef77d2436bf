//! Long sequences made from single stills by moving a crop window along a
//! random-walk path. Only global translation is modelled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionConfig {
    /// Speed bound in pixels per frame.
    pub v_max: f64,
    /// Std of the per-frame velocity increment, per axis.
    pub accel_std: f64,
    /// `(vy, vx)` at frame 0.
    pub initial_velocity: [f64; 2],
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            v_max: 2.0,
            accel_std: 0.25,
            initial_velocity: [0.0, 0.0],
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max >= 0.0 && self.accel_std >= 0.0) {
            return Err(Error::config(
                "motion.v_max and motion.accel_std must be ≥ 0",
            ));
        }
        Ok(())
    }
}

/// Bilinear crop with its top-left corner at fractional `(py, px)`.
pub fn bilinear_crop(still: &Tensor, py: f64, px: f64, crop: usize) -> Result<Tensor> {
    let (h, w, c) = still.hwc()?;
    if crop > h
        || crop > w
        || py < 0.0
        || px < 0.0
        || py > (h - crop) as f64
        || px > (w - crop) as f64
    {
        return Err(Error::shape(format!(
            "crop {crop} at ({py}, {px}) leaves the {h}×{w} still"
        )));
    }
    let (y0, x0) = (py.floor() as usize, px.floor() as usize);
    let (fy, fx) = ((py - y0 as f64) as f32, (px - x0 as f64) as f32);
    let d = still.data();
    let at = |y: usize, x: usize, ch: usize| d[(y.min(h - 1) * w + x.min(w - 1)) * c + ch];
    let mut out = Tensor::zeros(&[crop, crop, c]);
    let o = out.data_mut();
    for i in 0..crop {
        for j in 0..crop {
            let (y, x) = (y0 + i, x0 + j);
            for ch in 0..c {
                let v = if fy == 0.0 && fx == 0.0 {
                    at(y, x, ch)
                } else {
                    let top = at(y, x, ch) * (1.0 - fx) + at(y, x + 1, ch) * fx;
                    let bot = at(y + 1, x, ch) * (1.0 - fx) + at(y + 1, x + 1, ch) * fx;
                    top * (1.0 - fy) + bot * fy
                };
                o[(i * crop + j) * c + ch] = v;
            }
        }
    }
    Ok(out)
}

fn reflect(p: &mut f64, v: &mut f64, hi: f64) {
    if hi <= 0.0 {
        *p = 0.0;
        return;
    }
    while *p < 0.0 || *p > hi {
        if *p < 0.0 {
            *p = -*p;
        } else {
            *p = 2.0 * hi - *p;
        }
        *v = -*v;
    }
}

/// Endless, restartable frame stream over one still.
#[derive(Clone, Debug)]
pub struct MotionStream {
    still: Tensor,
    crop: usize,
    cfg: MotionConfig,
    rng: ChaCha8Rng,
    pos: [f64; 2],
    vel: [f64; 2],
    limits: [f64; 2],
}

impl MotionStream {
    /// Starts with the window centred on the still.
    pub fn new(still: Tensor, crop: usize, cfg: MotionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (h, w, _) = still.hwc()?;
        if crop == 0 || crop > h || crop > w {
            return Err(Error::shape(format!(
                "still {h}×{w} is smaller than the {crop}×{crop} crop"
            )));
        }
        let limits = [(h - crop) as f64, (w - crop) as f64];
        Ok(Self {
            still,
            crop,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pos: [(limits[0] / 2.0).floor(), (limits[1] / 2.0).floor()],
            vel: cfg.initial_velocity,
            cfg,
            limits,
        })
    }

    /// Moves the window's top-left corner, reflecting into range.
    pub fn starting_at(mut self, py: f64, px: f64) -> Self {
        self.pos = [py, px];
        for a in 0..2 {
            reflect(&mut self.pos[a], &mut self.vel[a], self.limits[a]);
        }
        self
    }

    pub fn limits(&self) -> [f64; 2] {
        self.limits
    }

    fn advance(&mut self) {
        if self.cfg.accel_std > 0.0 {
            for a in 0..2 {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                self.vel[a] += self.cfg.accel_std * z;
            }
        }
        let speed = self.vel[0].hypot(self.vel[1]);
        if speed > self.cfg.v_max {
            let s = if speed > 0.0 {
                self.cfg.v_max / speed
            } else {
                0.0
            };
            self.vel = [self.vel[0] * s, self.vel[1] * s];
        }
        for a in 0..2 {
            self.pos[a] += self.vel[a];
            reflect(&mut self.pos[a], &mut self.vel[a], self.limits[a]);
        }
    }
}

impl Iterator for MotionStream {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        let f = bilinear_crop(&self.still, self.pos[0], self.pos[1], self.crop)
            .expect("position kept inside by reflection");
        self.advance();
        Some(f)
    }
}

pub fn synth_motion_sequence(
    still: &Tensor,
    crop: usize,
    length: usize,
    cfg: MotionConfig,
    seed: u64,
) -> Result<Vec<Tensor>> {
    Ok(MotionStream::new(still.clone(), crop, cfg, seed)?
        .take(length)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StillKind {
    /// Overlapping soft Gaussian blobs.
    Blobs,
    /// Sum of oriented sinusoids with periods of 12 to 48 px.
    Waves,
    /// Flat rectangles with hard edges.
    Mosaic,
}

impl std::str::FromStr for StillKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "waves" => Ok(Self::Waves),
            "mosaic" => Ok(Self::Mosaic),
            _ => Err(Error::config(format!(
                "unknown still kind `{s}` (blobs, waves, mosaic)"
            ))),
        }
    }
}

/// Deterministic synthetic test image in [0, 1].
pub fn procedural_still(kind: StillKind, h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes = Vec::with_capacity(c);
    for _ in 0..c {
        let mut p = vec![0.0f64; h * w];
        match kind {
            StillKind::Blobs => {
                for _ in 0..24 {
                    let (cy, cx) = (
                        rng.random::<f64>() * h as f64,
                        rng.random::<f64>() * w as f64,
                    );
                    let r = 3.0 + rng.random::<f64>() * (h.min(w) as f64 / 4.0);
                    let a = rng.random::<f64>() * 2.0 - 1.0;
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            p[y * w + x] += a * (-d2 / (2.0 * r * r)).exp();
                        }
                    }
                }
            }
            StillKind::Waves => {
                for _ in 0..6 {
                    let theta = rng.random::<f64>() * std::f64::consts::PI;
                    let period = 12.0 + rng.random::<f64>() * 36.0;
                    let phase = rng.random::<f64>() * std::f64::consts::TAU;
                    let (ky, kx) = (theta.sin() / period, theta.cos() / period);
                    for y in 0..h {
                        for x in 0..w {
                            p[y * w + x] +=
                                (std::f64::consts::TAU * (ky * y as f64 + kx * x as f64) + phase)
                                    .sin();
                        }
                    }
                }
            }
            StillKind::Mosaic => {
                let base = rng.random::<f64>();
                p.iter_mut().for_each(|v| *v = base);
                for _ in 0..16 {
                    let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                    let (dh, dw) = (
                        rng.random_range(1..=h / 2 + 1),
                        rng.random_range(1..=w / 2 + 1),
                    );
                    let v = rng.random::<f64>();
                    for y in y0..(y0 + dh).min(h) {
                        for x in x0..(x0 + dw).min(w) {
                            p[y * w + x] = v;
                        }
                    }
                }
            }
        }
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        planes.push(
            p.into_iter()
                .map(|v| ((v - lo) / span) as f32)
                .collect::<Vec<_>>(),
        );
    }
    Tensor::from_fn(&[h, w, c], |i| planes[i % c][i / c])
}

/// Pearson correlation of two equally shaped frames.
pub fn frame_correlation(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let ma = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}
