//! Gaussian-encoder VAE baseline: closed-form KL regularizer and joint
//! reparameterized training of encoder and decoder.

use super::{Adam, CycleRecord, OptimizerConfig, Result, TrainError};
use crate::decoder::Decoder;
use crate::layers;
use crate::tensor::{Tape, Tensor, TensorRef};
use crate::util;
use rand_chacha::ChaCha8Rng;

/// MLP mapping a flat input to `(mu, log sigma^2)`, both of latent width.
/// The log-variance head starts at zero so the encoder begins at unit noise.
#[derive(Debug, Clone)]
pub struct GaussianEncoder {
    pub in_dim: usize,
    pub latent_dim: usize,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    mu_w: Tensor,
    mu_b: Tensor,
    logvar_w: Tensor,
    logvar_b: Tensor,
}

pub struct GaussianEncoderLeaves {
    weights: Vec<TensorRef>,
    biases: Vec<TensorRef>,
    mu_w: TensorRef,
    mu_b: TensorRef,
    logvar_w: TensorRef,
    logvar_b: TensorRef,
}

impl GaussianEncoder {
    pub fn init(in_dim: usize, widths: &[usize], latent_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut prev = in_dim;
        for &w in widths {
            weights.push(layers::init_weight(prev, &[prev, w], rng));
            biases.push(Tensor::zeros(&[w]));
            prev = w;
        }
        Self {
            in_dim,
            latent_dim,
            weights,
            biases,
            mu_w: layers::init_weight(prev, &[prev, latent_dim], rng),
            mu_b: Tensor::zeros(&[latent_dim]),
            logvar_w: Tensor::zeros(&[prev, latent_dim]),
            logvar_b: Tensor::zeros(&[latent_dim]),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("genc.w{i}"), w));
            out.push((format!("genc.b{i}"), b));
        }
        out.push(("genc.mu_w".into(), &self.mu_w));
        out.push(("genc.mu_b".into(), &self.mu_b));
        out.push(("genc.logvar_w".into(), &self.logvar_w));
        out.push(("genc.logvar_b".into(), &self.logvar_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter_mut().zip(&mut self.biases).enumerate() {
            out.push((format!("genc.w{i}"), w));
            out.push((format!("genc.b{i}"), b));
        }
        out.push(("genc.mu_w".into(), &mut self.mu_w));
        out.push(("genc.mu_b".into(), &mut self.mu_b));
        out.push(("genc.logvar_w".into(), &mut self.logvar_w));
        out.push(("genc.logvar_b".into(), &mut self.logvar_b));
        out
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> GaussianEncoderLeaves {
        let one = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        GaussianEncoderLeaves {
            weights: self.weights.iter().map(|w| one(tape, w)).collect(),
            biases: self.biases.iter().map(|b| one(tape, b)).collect(),
            mu_w: one(tape, &self.mu_w),
            mu_b: one(tape, &self.mu_b),
            logvar_w: one(tape, &self.logvar_w),
            logvar_b: one(tape, &self.logvar_b),
        }
    }

    /// `(mu, log sigma^2)` heads for a `[B, in_dim]` batch.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        leaves: &GaussianEncoderLeaves,
        x: TensorRef,
    ) -> crate::tensor::Result<(TensorRef, TensorRef)> {
        let mut h = x;
        for (w, b) in leaves.weights.iter().zip(&leaves.biases) {
            h = layers::linear(tape, h, *w, *b)?;
            h = tape.silu(h);
        }
        let mu = layers::linear(tape, h, leaves.mu_w, leaves.mu_b)?;
        let lv = layers::linear(tape, h, leaves.logvar_w, leaves.logvar_b)?;
        Ok((mu, lv))
    }

    /// Value-level `(mu, sigma)` for a `[B, in_dim]` batch.
    pub fn encode(&self, x: &Tensor) -> crate::tensor::Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let leaves = self.stage(&mut tape, false);
        let xr = tape.constant(x);
        let (mu, lv) = self.forward_on(&mut tape, &leaves, xr)?;
        let sigma: Vec<f64> = tape.value(lv).data().iter().map(|v| (0.5 * v).exp()).collect();
        Ok((
            tape.value(mu).clone(),
            Tensor::new(tape.value(lv).shape().to_vec(), sigma)?,
        ))
    }
}

impl GaussianEncoderLeaves {
    pub fn ordered_refs(&self) -> Vec<TensorRef> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.mu_w);
        out.push(self.mu_b);
        out.push(self.logvar_w);
        out.push(self.logvar_b);
        out
    }
}

/// Closed-form KL of `N(mu, diag(sigma^2))` to the standard normal:
/// `0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)`. Zero exactly at the prior.
pub fn vae_kl(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(TrainError::NonPositiveSigma(s));
        }
        acc += 0.5 * (m * m + s * s - (s * s).ln() - 1.0);
    }
    Ok(acc)
}

/// Gaussian-encoder baseline trainer: joint Adam over encoder and decoder on
/// `reconstruction + gamma * KL` with reparameterized latents.
pub struct VaeTrainState {
    pub encoder: GaussianEncoder,
    pub decoder: Decoder,
    pub gamma: f64,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub diverged: bool,
    pub loss_history: Vec<CycleRecord>,
}

impl VaeTrainState {
    pub fn new(
        encoder: GaussianEncoder,
        decoder: Decoder,
        gamma: f64,
        opt: OptimizerConfig,
        seed: u64,
    ) -> Self {
        Self {
            adam: Adam::new(opt.encoder_lr, opt.beta1, opt.beta2, opt.eps),
            rng: util::rng_from_seed(seed),
            step: 0,
            diverged: false,
            loss_history: Vec::new(),
            encoder,
            decoder,
            gamma,
        }
    }

    /// One joint update on a flat `[B, in_dim]` batch (images arrive
    /// flattened; the decoder reshapes as needed).
    pub fn train_cycle(&mut self, x_flat: &Tensor, x_target: &Tensor) -> Result<()> {
        if self.diverged {
            return Ok(());
        }
        let t0 = std::time::Instant::now();
        let b = x_flat.shape()[0];
        let dz = self.encoder.latent_dim;
        let eps = util::randn(&[b, dz], &mut self.rng);

        let mut tape = Tape::new();
        let enc_leaves = self.encoder.stage(&mut tape, true);
        let dec_leaves = self.decoder.stage(&mut tape, true);
        let xr = tape.constant(x_flat);
        let (mu, lv) = self.encoder.forward_on(&mut tape, &enc_leaves, xr)?;
        // z = mu + exp(lv / 2) * eps: the reparameterized sample.
        let half_lv = tape.scale(lv, 0.5);
        let sigma = tape.exp(half_lv);
        let eps_r = tape.constant(&eps);
        let noise = tape.mul(sigma, eps_r)?;
        let z = tape.add(mu, noise)?;

        let xt = tape.constant(x_target);
        let recon = self.decoder.reconstruction_loss_on(&mut tape, &dec_leaves, xt, z)?;

        // 0.5 * (mu^2 + exp(lv) - lv - 1), summed then averaged over the batch.
        let mu2 = tape.square(mu);
        let s2 = tape.exp(lv);
        let a = tape.add(mu2, s2)?;
        let a = tape.sub(a, lv)?;
        let ones = tape.constant(&Tensor::full(&[dz], 1.0));
        let a = {
            let negated = tape.scale(ones, -1.0);
            tape.add(a, negated)?
        };
        let kl_sum = tape.sum_all(a);
        let kl_mean = tape.scale(kl_sum, 0.5 / b as f64);

        let kl_scaled = tape.scale(kl_mean, self.gamma);
        let total = tape.add(recon, kl_scaled)?;
        tape.backward(total)?;

        let total_v = tape.value(total).item();
        let recon_v = tape.value(recon).item();
        let kl_v = tape.value(kl_mean).item();
        if total_v.is_finite() {
            let mut refs = enc_leaves.ordered_refs();
            refs.extend(dec_leaves.ordered_refs());
            let grads: Vec<Option<&[f64]>> = refs.iter().map(|r| tape.grad(*r)).collect();
            let mut params = self.encoder.params_mut();
            params.extend(self.decoder.params_mut());
            self.adam.step(params, &grads);
        } else {
            self.diverged = true;
        }
        self.loss_history.push(CycleRecord {
            cycle: self.step,
            encoder_loss: total_v,
            reconstruction_loss: recon_v,
            rate_proxy: kl_v,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        self.step += 1;
        Ok(())
    }
}
