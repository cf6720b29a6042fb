//! Alternating EM-style training.
//!
//! One cycle of the primary trainer: (1) the encoder proposes latents by
//! integrating its probability-flow ODE, (2) a short Langevin chain
//! equilibrates them toward the decoder-tilted posterior
//! `p(z) exp(log p(x|z) / gamma)` — the E-step, (3) the encoder takes one
//! Adam step on the denoising loss with the equilibrated latents as targets,
//! and (4) the decoder takes one Adam step on the reconstruction loss — the
//! M-step. Regularization lives entirely in the Langevin drift's affine
//! term, so the encoder update never fights the decoder's.
//!
//! The alternative trainer moves regularization back to the encoder side as
//! a neural-entropy penalty; it is retained because its failure mode
//! (compounding encoder/decoder misalignment, often ending in non-finite
//! losses) is part of the observable behavior: divergence halts the run with
//! a flag instead of raising.

mod adam;
mod langevin;
mod vae;

pub use adam::Adam;
pub use langevin::{discrete_ou_stationary_variance, langevin_estep, LangevinConfig};
pub use vae::{vae_kl, GaussianEncoder, VaeTrainState};

use crate::decoder::Decoder;
use crate::encoder::{
    denoising_loss_on, neural_entropy_on, CondValues, Draws, EncoderError, ScoreNet,
};
use crate::schedule::VpSchedule;
use crate::tensor::{Tape, Tensor};
use crate::util;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] crate::decoder::DecoderError),
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
    #[error("langevin: non-finite latent at chain step {step}")]
    LangevinNonFinite { step: usize },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("encoder output sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimizer settings; moments follow the usual adaptive first/second-moment
/// scheme with bias correction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { encoder_lr: 1e-3, decoder_lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-cycle loss record. `encoder_loss` is the denoising objective for the
/// diffusion trainer and the total objective for the VAE baseline;
/// `rate_proxy` is a one-draw neural-entropy estimate (diffusion) or the
/// mean closed-form KL (VAE).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleRecord {
    pub cycle: u64,
    pub encoder_loss: f64,
    pub reconstruction_loss: f64,
    pub rate_proxy: f64,
    pub wall_ms: f64,
}

/// Ordered step trace of one training cycle, recorded for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainEvent {
    Encode,
    Langevin,
    EncoderUpdate,
    LatentGradStep,
    DecoderUpdate,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DaeTrainConfig {
    /// Latents generated per input (`B_z`).
    pub latents_per_input: usize,
    /// Probability-flow ODE steps used when the encoder proposes latents.
    pub pf_ode_steps: usize,
}

impl Default for DaeTrainConfig {
    fn default() -> Self {
        Self { latents_per_input: 4, pf_ode_steps: 16 }
    }
}

/// Encoder + decoder + optimizer state of the diffusion autoencoder.
pub struct DaeTrainState {
    pub score: ScoreNet,
    pub decoder: Decoder,
    pub schedule: VpSchedule,
    pub langevin: LangevinConfig,
    pub train_cfg: DaeTrainConfig,
    pub adam_encoder: Adam,
    pub adam_decoder: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub diverged: bool,
    pub loss_history: Vec<CycleRecord>,
    pub last_trace: Vec<TrainEvent>,
}

impl DaeTrainState {
    pub fn new(
        score: ScoreNet,
        decoder: Decoder,
        schedule: VpSchedule,
        langevin: LangevinConfig,
        train_cfg: DaeTrainConfig,
        opt: OptimizerConfig,
        seed: u64,
    ) -> Self {
        Self {
            adam_encoder: Adam::new(opt.encoder_lr, opt.beta1, opt.beta2, opt.eps),
            adam_decoder: Adam::new(opt.decoder_lr, opt.beta1, opt.beta2, opt.eps),
            rng: util::rng_from_seed(seed),
            step: 0,
            diverged: false,
            loss_history: Vec::new(),
            last_trace: Vec::new(),
            score,
            decoder,
            schedule,
            langevin,
            train_cfg,
        }
    }

    /// Propose latents for a conditioning batch: `N(0, I)` on the very first
    /// cycle (no trained encoder yet), then the encoder's own PF-ODE samples
    /// from distinct initial draws.
    fn propose_latents(&mut self, cond: &CondValues) -> Result<Tensor> {
        let b = cond.batch();
        let dz = self.score.cfg.latent_dim;
        let z0 = util::randn(&[b, dz], &mut self.rng);
        if self.step == 0 {
            return Ok(z0);
        }
        Ok(self.score.sample_pf_ode(&self.schedule, cond, &z0, self.train_cfg.pf_ode_steps)?)
    }

    /// One cycle of the primary alternating trainer on a conditioning batch
    /// `x`: encode, Langevin-equilibrate, encoder update, decoder update.
    pub fn train_cycle_alg1(&mut self, x: &Tensor) -> Result<()> {
        if self.diverged {
            return Ok(());
        }
        let t0 = std::time::Instant::now();
        self.last_trace.clear();
        let bz = self.train_cfg.latents_per_input;
        let cond = self.score.prep_cond(x)?;
        let cond_rep = cond.repeat_rows(bz);
        let x_rep = repeat_rows(x, bz);

        self.last_trace.push(TrainEvent::Encode);
        let z_init = self.propose_latents(&cond_rep)?;

        self.last_trace.push(TrainEvent::Langevin);
        let z_star = langevin_estep(&self.decoder, &x_rep, &z_init, &self.langevin, &mut self.rng)?;

        // Encoder update: one Adam step on the denoising objective with each
        // equilibrated latent as an independent target.
        self.last_trace.push(TrainEvent::EncoderUpdate);
        let draws = Draws::sample(
            &self.schedule,
            z_star.shape()[0],
            self.score.cfg.latent_dim,
            &mut self.rng,
        );
        let denoise = {
            let mut tape = Tape::new();
            let leaves = self.score.stage(&mut tape, true);
            let cond_on = self.score.cond_on(&mut tape, &leaves, &CondValues::Raw(x_rep.clone()))?;
            let loss = denoising_loss_on(
                &mut tape,
                &self.schedule,
                |t, z, s| self.score.forward_on(t, &leaves, z, s, &cond_on),
                &z_star,
                &draws,
            )?;
            tape.backward(loss)?;
            let value = tape.value(loss).item();
            if value.is_finite() {
                let refs = leaves.ordered_refs();
                self.adam_encoder.step_from_tape(&tape, &refs, self.score.params_mut());
            }
            value
        };

        self.last_trace.push(TrainEvent::DecoderUpdate);
        let recon = {
            let mut tape = Tape::new();
            let leaves = self.decoder.stage(&mut tape, true);
            let xr = tape.constant(&x_rep);
            let zr = tape.constant(&z_star);
            let loss = self.decoder.reconstruction_loss_on(&mut tape, &leaves, xr, zr)?;
            tape.backward(loss)?;
            let value = tape.value(loss).item();
            if value.is_finite() {
                let refs = leaves.ordered_refs();
                self.adam_decoder.step_from_tape(&tape, &refs, self.decoder.params_mut());
            }
            value
        };

        // Cheap per-cycle rate proxy: a single-draw neural-entropy estimate.
        let rate_proxy = self.score.neural_entropy(&self.schedule, &z_star, &cond_rep, &mut self.rng, 1)?;

        if !denoise.is_finite() || !recon.is_finite() || !rate_proxy.is_finite() {
            self.diverged = true;
        }
        self.loss_history.push(CycleRecord {
            cycle: self.step,
            encoder_loss: denoise,
            reconstruction_loss: recon,
            rate_proxy,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        self.step += 1;
        Ok(())
    }

    /// One cycle of the neural-entropy-regularized alternative trainer:
    /// PF-ODE latents, one latent gradient step toward the decoder, decoder
    /// update on all pairs, then an encoder update on `denoising + gamma *
    /// neural entropy` with the per-input mean latents as targets.
    ///
    /// Divergence is tolerated here: the run halts with the flag set.
    pub fn train_cycle_alg2(&mut self, x: &Tensor) -> Result<()> {
        if self.diverged {
            return Ok(());
        }
        let t0 = std::time::Instant::now();
        self.last_trace.clear();
        let bz = self.train_cfg.latents_per_input;
        let b = x.shape()[0];
        let dz = self.score.cfg.latent_dim;
        let cond = self.score.prep_cond(x)?;
        let cond_rep = cond.repeat_rows(bz);
        let x_rep = repeat_rows(x, bz);

        self.last_trace.push(TrainEvent::Encode);
        let z0 = util::randn(&[b * bz, dz], &mut self.rng);
        let z_hat =
            self.score.sample_pf_ode(&self.schedule, &cond_rep, &z0, self.train_cfg.pf_ode_steps)?;

        // One deterministic latent step against the reconstruction gradient:
        // z <- z - dtau * grad_z(-log p(x|z)) = z + dtau * grad_z log p.
        self.last_trace.push(TrainEvent::LatentGradStep);
        let grad = self.decoder.grad_z_log_likelihood(&x_rep, &z_hat)?;
        let mut z_hat = z_hat;
        for (zv, gv) in z_hat.data_mut().iter_mut().zip(grad.data()) {
            *zv += self.langevin.delta_tau * gv;
        }

        // Per-input mean over the B_z updated latents.
        let mut mean_data = vec![0.0; b * dz];
        for i in 0..b {
            for k in 0..bz {
                for j in 0..dz {
                    mean_data[i * dz + j] += z_hat.data()[(i * bz + k) * dz + j] / bz as f64;
                }
            }
        }
        let z_mean = Tensor::new(vec![b, dz], mean_data)?;

        self.last_trace.push(TrainEvent::DecoderUpdate);
        let recon = {
            let mut tape = Tape::new();
            let leaves = self.decoder.stage(&mut tape, true);
            let xr = tape.constant(&x_rep);
            let zr = tape.constant(&z_hat);
            let loss = self.decoder.reconstruction_loss_on(&mut tape, &leaves, xr, zr)?;
            tape.backward(loss)?;
            let value = tape.value(loss).item();
            if value.is_finite() {
                let refs = leaves.ordered_refs();
                self.adam_decoder.step_from_tape(&tape, &refs, self.decoder.params_mut());
            }
            value
        };

        self.last_trace.push(TrainEvent::EncoderUpdate);
        let draws = Draws::sample(&self.schedule, b, dz, &mut self.rng);
        let draws_ne = Draws::sample(&self.schedule, b, dz, &mut self.rng);
        let (denoise, rate_proxy) = {
            let mut tape = Tape::new();
            let leaves = self.score.stage(&mut tape, true);
            let cond_on = self.score.cond_on(&mut tape, &leaves, &CondValues::Raw(x.clone()))?;
            let dl = denoising_loss_on(
                &mut tape,
                &self.schedule,
                |t, z, s| self.score.forward_on(t, &leaves, z, s, &cond_on),
                &z_mean,
                &draws,
            )?;
            let ne = neural_entropy_on(
                &mut tape,
                &self.schedule,
                |t, z, s| self.score.forward_on(t, &leaves, z, s, &cond_on),
                &z_mean,
                &draws_ne,
            )?;
            let ne_scaled = tape.scale(ne, self.langevin.gamma);
            let total = tape.add(dl, ne_scaled)?;
            tape.backward(total)?;
            let value = tape.value(total).item();
            if value.is_finite() {
                let refs = leaves.ordered_refs();
                self.adam_encoder.step_from_tape(&tape, &refs, self.score.params_mut());
            }
            (value, tape.value(ne).item())
        };

        if !denoise.is_finite() || !recon.is_finite() {
            // Expected failure mode of this variant: halt, do not raise.
            self.diverged = true;
        }
        self.loss_history.push(CycleRecord {
            cycle: self.step,
            encoder_loss: denoise,
            reconstruction_loss: recon,
            rate_proxy,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        self.step += 1;
        Ok(())
    }
}

/// Row-repeat a batch tensor: each row appears `k` consecutive times.
pub(crate) fn repeat_rows(x: &Tensor, k: usize) -> Tensor {
    let b = x.shape()[0];
    let per = x.len() / b.max(1);
    let mut data = Vec::with_capacity(x.len() * k);
    for i in 0..b {
        for _ in 0..k {
            data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = b * k;
    Tensor::new(shape, data).expect("sized by construction")
}
