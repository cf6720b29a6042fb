//! Langevin equilibration of latents to the decoder-tilted posterior.

use super::{Result, TrainError};
use crate::decoder::Decoder;
use crate::tensor::Tensor;
use crate::util;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Chain parameters. `gamma` is the temperature of the tilt
/// `p(z) exp(log p(x|z) / gamma)`; an infinite `gamma` switches the
/// likelihood term off entirely, leaving a discretized
/// Ornstein-Uhlenbeck chain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    pub gamma: f64,
    pub n_step: usize,
    pub delta_tau: f64,
    pub clip_bound: f64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self { gamma: 1.0, n_step: 10, delta_tau: 0.05, clip_bound: 1.0 }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_tau > 0.0 && self.delta_tau < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "delta_tau must lie in (0, 1) so the affine term stays contractive, got {}",
                self.delta_tau
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.clip_bound > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "clip_bound must be positive, got {}",
                self.clip_bound
            )));
        }
        Ok(())
    }
}

/// Discretized stationary variance of the likelihood-free chain
/// `z <- z (1 - dtau) + sqrt(2 dtau) eps`: `1 / (1 - dtau / 2)`. The test
/// oracle for the equilibrium checks.
pub fn discrete_ou_stationary_variance(delta_tau: f64) -> f64 {
    1.0 / (1.0 - delta_tau / 2.0)
}

/// Run `n_step` iterations of
/// `z <- z + [-z + clip(grad_z log p(x|z)) / gamma] dtau + sqrt(2 dtau) eps`
/// on a `[B, D_Z]` latent batch with the decoder frozen. The componentwise
/// clip to `[-clip_bound, clip_bound]` preserves the sign of each gradient
/// component. Returns the final latents.
pub fn langevin_estep(
    decoder: &Decoder,
    x: &Tensor,
    z_init: &Tensor,
    cfg: &LangevinConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut z = z_init.clone();
    let shape = z.shape().to_vec();
    let likelihood_on = cfg.gamma.is_finite();
    for step in 0..cfg.n_step {
        let tilt: Option<Tensor> = if likelihood_on {
            Some(decoder.grad_z_log_likelihood(x, &z)?)
        } else {
            None
        };
        let noise = util::randn(&shape, rng);
        let amp = (2.0 * cfg.delta_tau).sqrt();
        for (i, zv) in z.data_mut().iter_mut().enumerate() {
            let g = tilt
                .as_ref()
                .map(|t| t.data()[i].clamp(-cfg.clip_bound, cfg.clip_bound) / cfg.gamma)
                .unwrap_or(0.0);
            *zv += (-*zv + g) * cfg.delta_tau + amp * noise.data()[i];
        }
        if !z.all_finite() {
            return Err(TrainError::LangevinNonFinite { step });
        }
    }
    Ok(z)
}
