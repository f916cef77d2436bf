//! Aligned spatio-temporal crops and the training clip samplers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::motion::{procedural_still, MotionConfig, MotionStream, StillKind};
use crate::error::{Error, Result};
use crate::models::train::ClipSampler;
use crate::tensor::Tensor;

fn crop_frame(f: &Tensor, y0: usize, x0: usize, n: usize) -> Tensor {
    let (_, w, c) = f.hwc().expect("frames are [h, w, c]");
    let d = f.data();
    let mut out = Vec::with_capacity(n * n * c);
    for y in y0..y0 + n {
        out.extend_from_slice(&d[(y * w + x0) * c..(y * w + x0 + n) * c]);
    }
    Tensor::new(vec![n, n, c], out).expect("sized above")
}

/// `count` clips of `t` consecutive frames, each cropped to `n × n` at the
/// same place in every frame.
pub fn sample_crops(
    seq: &[Tensor],
    n: usize,
    t: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    let first = seq.first().ok_or_else(|| Error::shape("empty sequence"))?;
    let (h, w, _) = first.hwc()?;
    if n == 0 || t == 0 || n > h || n > w {
        return Err(Error::shape(format!(
            "cannot crop {n}×{n} from {h}×{w} frames"
        )));
    }
    if t > seq.len() {
        return Err(Error::shape(format!(
            "clip length {t} exceeds the {}-frame sequence",
            seq.len()
        )));
    }
    if seq.iter().any(|f| f.shape() != first.shape()) {
        return Err(Error::shape("sequence frames differ in shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let s = rng.random_range(0..=seq.len() - t);
            let y0 = rng.random_range(0..=h - n);
            let x0 = rng.random_range(0..=w - n);
            seq[s..s + t]
                .iter()
                .map(|f| crop_frame(f, y0, x0, n))
                .collect()
        })
        .collect())
}

/// Clips drawn from one in-memory sequence.
pub struct SequenceClips {
    pub frames: Vec<Tensor>,
}

impl ClipSampler for SequenceClips {
    fn clips(
        &self,
        seed: u64,
        count: usize,
        frames: usize,
        crop: usize,
    ) -> Result<Vec<Vec<Tensor>>> {
        sample_crops(&self.frames, crop, frames, count, seed)
    }
}

/// Moving-window clips over a pool of procedural stills.
pub struct SyntheticClips {
    pub stills: Vec<Tensor>,
    pub motion: MotionConfig,
}

impl SyntheticClips {
    /// `count` stills of `size × size`, cycling through every still kind.
    pub fn new(
        count: usize,
        size: usize,
        channels: usize,
        motion: MotionConfig,
        seed: u64,
    ) -> Self {
        let kinds = [StillKind::Blobs, StillKind::Waves, StillKind::Mosaic];
        let stills = (0..count)
            .map(|i| {
                procedural_still(
                    kinds[i % 3],
                    size,
                    size,
                    channels,
                    seed.wrapping_add(i as u64),
                )
            })
            .collect();
        Self { stills, motion }
    }
}

impl ClipSampler for SyntheticClips {
    fn clips(
        &self,
        seed: u64,
        count: usize,
        frames: usize,
        crop: usize,
    ) -> Result<Vec<Vec<Tensor>>> {
        if self.stills.is_empty() {
            return Err(Error::config("no stills to sample clips from"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let still = &self.stills[rng.random_range(0..self.stills.len())];
                let mut motion = self.motion;
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let speed = rng.random::<f64>() * motion.v_max;
                motion.initial_velocity = [speed * angle.sin(), speed * angle.cos()];
                let stream = MotionStream::new(still.clone(), crop, motion, rng.random())?;
                let [ly, lx] = stream.limits();
                let (py, px) = (rng.random::<f64>() * ly, rng.random::<f64>() * lx);
                Ok(stream
                    .starting_at(py.floor(), px.floor())
                    .take(frames)
                    .collect())
            })
            .collect()
    }
}
