//! Input-side stochastic transforms: RGB noise curriculum, uniform
//! dequantization, and latent jitter.

use std::f64::consts::PI;

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DEFAULT_SIGMA0: f64 = 64.0;
pub const DEFAULT_JITTER_STD: f64 = 0.3;

/// Cosine decay from `sigma0` at t = 0 to `sigma_end` at t = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    pub sigma_end: f64,
}

impl NoiseSchedule {
    pub fn new(sigma0: f64, sigma_end: f64) -> Result<Self> {
        if !(sigma0 >= 0.0 && sigma_end >= 0.0 && sigma_end <= sigma0) {
            return Err(Error::OutOfRange(format!(
                "noise schedule needs 0 ≤ σ_end ≤ σ0, got σ0={sigma0}, σ_end={sigma_end}"
            )));
        }
        Ok(Self { sigma0, sigma_end })
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        noise_sigma(t, self.sigma0, self.sigma_end)
    }

    /// σ after `step` completed steps out of `total`.
    pub fn sigma_at_step(&self, step: u64, total: u64) -> Result<f64> {
        let t = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
        self.sigma(t)
    }
}

pub fn noise_sigma(t: f64, sigma0: f64, sigma_end: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("training progress {t} outside [0, 1]")));
    }
    Ok(sigma_end + (sigma0 - sigma_end) * (1.0 + (t * PI).cos()) / 2.0)
}

/// Add `σ·N(0,1)` per entry, floor, and clamp to [0, 255].
pub fn apply_rgb_noise(image: &[u8], sigma: f64, rng: &mut StreamRng) -> Vec<u8> {
    if sigma == 0.0 {
        return image.to_vec();
    }
    image
        .iter()
        .map(|&v| {
            let eps: f64 = StandardNormal.sample(rng);
            (v as f64 + sigma * eps).floor().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// `v + u` with `u ~ U[0, 1)` per entry.
pub fn dequantize(image: &[u8], rng: &mut StreamRng) -> Vec<f64> {
    image.iter().map(|&v| v as f64 + rng.gen::<f64>()).collect()
}

/// `z + std·N(0,1)`; the noise is a constant so gradients pass straight through.
pub fn latent_jitter(z: &Tensor, std: f64, rng: &mut StreamRng) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(z.clone());
    }
    let noise: Vec<f64> = (0..z.elem_count())
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            e * std
        })
        .collect();
    let noise = Tensor::from_vec(noise, z.shape(), z.device())?.to_dtype(z.dtype())?;
    Ok((z + noise)?)
}
