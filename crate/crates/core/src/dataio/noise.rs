//! Additive white Gaussian noise, keyed per frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation on the [0, 1] scale.
    pub sigma: f32,
    pub seed: u64,
    /// Clamp noisy values to [0, 1]. Off by default since it biases the noise.
    pub clip: bool,
}

impl NoiseSpec {
    pub fn new(sigma: f32, seed: u64) -> Self {
        Self {
            sigma,
            seed,
            clip: false,
        }
    }

    /// Config files give σ on the 0–255 scale.
    pub fn from_255(sigma255: f32, seed: u64) -> Self {
        Self::new(sigma255 / 255.0, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::config(format!(
                "noise sigma must be finite and ≥ 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// The noise field for one frame. Frame `index` selects an independent
/// ChaCha stream, so frames can be drawn in any order.
pub fn noise_field(shape: &[usize], spec: &NoiseSpec, index: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.sigma;
    Tensor::from_fn(shape, |_| {
        let z: f32 = StandardNormal.sample(&mut rng);
        s * z
    })
}

pub fn add_noise(frame: &Tensor, spec: &NoiseSpec, index: u64) -> Tensor {
    if spec.sigma == 0.0 {
        return frame.clone();
    }
    let noise = noise_field(frame.shape(), spec, index);
    let noisy = frame.add(&noise).expect("same shape by construction");
    if spec.clip {
        noisy.clamp(0.0, 1.0)
    } else {
        noisy
    }
}
