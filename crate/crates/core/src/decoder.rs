//! Gaussian-likelihood decoders.
//!
//! All variants share `log p(x|z) = -||x - d(z)||^2 / (2 sigma^2)` with the
//! normalization constant dropped, so reconstruction loss and log-likelihood
//! are related exactly by `recon = -2 sigma^2 * mean(log_lik)`. The
//! z-gradient of the log-likelihood (the quantity the Langevin chain needs)
//! is computed by reverse-mode differentiation through the decoder.

use crate::layers::{self, AttentionWeights};
use crate::tensor::{Tape, Tensor, TensorError, TensorRef};
use crate::util;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("{what}: non-finite values")]
    NonFinite { what: &'static str },
    #[error("{what}: batch must be nonempty")]
    EmptyBatch { what: &'static str },
}

pub type Result<T> = std::result::Result<T, DecoderError>;

/// Cubic polynomial decoder `d(z) = c0 + c1 z + c2 z^2 + c3 z^3` for the
/// one-dimensional toy model. Degree is fixed at 3.
#[derive(Debug, Clone)]
pub struct PolyDecoder {
    pub coeffs: Tensor, // [4]
    pub sigma_lik: f64,
}

impl PolyDecoder {
    pub fn new(coeffs: [f64; 4], sigma_lik: f64) -> Self {
        Self { coeffs: Tensor::from_vec(coeffs.to_vec()), sigma_lik }
    }

    pub fn init(sigma_lik: f64, rng: &mut ChaCha8Rng) -> Self {
        let c = util::randn_scaled(&[4], 0.1, rng);
        Self { coeffs: c, sigma_lik }
    }
}

/// Fully connected decoder with SiLU hidden layers and a linear readout.
#[derive(Debug, Clone)]
pub struct MlpDecoder {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub sigma_lik: f64,
}

impl MlpDecoder {
    pub fn init(
        in_dim: usize,
        widths: &[usize],
        out_dim: usize,
        sigma_lik: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut prev = in_dim;
        for &w in widths.iter().chain(std::iter::once(&out_dim)) {
            weights.push(layers::init_weight(prev, &[prev, w], rng));
            biases.push(Tensor::zeros(&[w]));
            prev = w;
        }
        Self { in_dim, out_dim, weights, biases, sigma_lik }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConvDecoderConfig {
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    /// Channel widths of the intermediate upsampling stages; the final stage
    /// to `out_c` is implicit. Spatial size doubles per stage.
    pub stage_channels: Vec<usize>,
    pub self_attention: bool,
    pub sigma_lik: f64,
}

impl ConvDecoderConfig {
    fn base_hw(&self) -> Result<(usize, usize)> {
        let n_stages = self.stage_channels.len() + 1;
        let div = 1usize << n_stages;
        if self.out_h % div != 0 || self.out_w % div != 0 {
            return Err(DecoderError::InvalidConfig(format!(
                "output {}x{} not divisible by 2^{n_stages}",
                self.out_h, self.out_w
            )));
        }
        Ok((self.out_h / div, self.out_w / div))
    }
}

/// Dense projection to a coarse grid, optional pre-norm self-attention at
/// that grid, then transposed-conv upsampling stages (kernel 4, stride 2);
/// sigmoid keeps pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    pub cfg: ConvDecoderConfig,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
    pub(crate) attn: Option<AttentionWeights>,
    pub stage_kernels: Vec<Tensor>, // [4,4,ci,co]
    pub stage_biases: Vec<Tensor>,  // [co]
    base_h: usize,
    base_w: usize,
}

const DECODER_ATTN_HEADS: usize = 4;

impl ConvDecoder {
    pub fn init(cfg: ConvDecoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (base_h, base_w) = cfg.base_hw()?;
        let bc = cfg.base_channels;
        let dense_w = layers::init_weight(cfg.latent_dim, &[cfg.latent_dim, base_h * base_w * bc], rng);
        let dense_b = Tensor::zeros(&[base_h * base_w * bc]);
        let attn = if cfg.self_attention {
            if bc % DECODER_ATTN_HEADS != 0 {
                return Err(DecoderError::InvalidConfig(format!(
                    "base_channels {bc} not divisible by {DECODER_ATTN_HEADS} attention heads"
                )));
            }
            Some(AttentionWeights::init(bc, bc, bc, DECODER_ATTN_HEADS, bc, rng))
        } else {
            None
        };
        let mut stage_kernels = Vec::new();
        let mut stage_biases = Vec::new();
        let mut prev = bc;
        for &c in cfg.stage_channels.iter().chain(std::iter::once(&cfg.out_c)) {
            stage_kernels.push(layers::init_weight(16 * prev, &[4, 4, prev, c], rng));
            stage_biases.push(Tensor::zeros(&[c]));
            prev = c;
        }
        Ok(Self { cfg, dense_w, dense_b, attn, stage_kernels, stage_biases, base_h, base_w })
    }
}

/// The decoder variants behind one dispatch point.
#[derive(Debug, Clone)]
pub enum Decoder {
    Poly(PolyDecoder),
    Mlp(MlpDecoder),
    Conv(ConvDecoder),
}

pub enum DecoderLeaves {
    Poly { coeffs: TensorRef },
    Mlp { weights: Vec<TensorRef>, biases: Vec<TensorRef> },
    Conv(ConvLeaves),
}

/// Staged refs of the convolutional decoder (fields crate-internal).
pub struct ConvLeaves {
    pub(crate) dense_w: TensorRef,
    pub(crate) dense_b: TensorRef,
    pub(crate) attn: Option<crate::layers::AttentionLeaves>,
    pub(crate) stage_kernels: Vec<TensorRef>,
    pub(crate) stage_biases: Vec<TensorRef>,
}

impl DecoderLeaves {
    /// Tracked leaf refs in the exact order of `Decoder::params()`.
    pub fn ordered_refs(&self) -> Vec<TensorRef> {
        let mut out = Vec::new();
        match self {
            DecoderLeaves::Poly { coeffs } => out.push(*coeffs),
            DecoderLeaves::Mlp { weights, biases } => {
                for (w, b) in weights.iter().zip(biases) {
                    out.push(*w);
                    out.push(*b);
                }
            }
            DecoderLeaves::Conv(c) => {
                out.push(c.dense_w);
                out.push(c.dense_b);
                if let Some(a) = &c.attn {
                    a.push_refs(&mut out);
                }
                for (k, b) in c.stage_kernels.iter().zip(&c.stage_biases) {
                    out.push(*k);
                    out.push(*b);
                }
            }
        }
        out
    }
}

impl Decoder {
    pub fn sigma_lik(&self) -> f64 {
        match self {
            Decoder::Poly(d) => d.sigma_lik,
            Decoder::Mlp(d) => d.sigma_lik,
            Decoder::Conv(d) => d.cfg.sigma_lik,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Decoder::Poly(_) => 1,
            Decoder::Mlp(d) => d.in_dim,
            Decoder::Conv(d) => d.cfg.latent_dim,
        }
    }

    /// Shape of one decoded sample (without the batch dimension).
    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            Decoder::Poly(_) => vec![1],
            Decoder::Mlp(d) => vec![d.out_dim],
            Decoder::Conv(d) => vec![d.cfg.out_h, d.cfg.out_w, d.cfg.out_c],
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            Decoder::Poly(d) => out.push(("poly.coeffs".to_string(), &d.coeffs)),
            Decoder::Mlp(d) => {
                for (i, (w, b)) in d.weights.iter().zip(&d.biases).enumerate() {
                    out.push((format!("mlp.w{i}"), w));
                    out.push((format!("mlp.b{i}"), b));
                }
            }
            Decoder::Conv(d) => {
                out.push(("conv.dense_w".to_string(), &d.dense_w));
                out.push(("conv.dense_b".to_string(), &d.dense_b));
                if let Some(a) = &d.attn {
                    a.visit("conv.attn", &mut out);
                }
                for (i, (k, b)) in d.stage_kernels.iter().zip(&d.stage_biases).enumerate() {
                    out.push((format!("conv.k{i}"), k));
                    out.push((format!("conv.b{i}"), b));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            Decoder::Poly(d) => out.push(("poly.coeffs".to_string(), &mut d.coeffs)),
            Decoder::Mlp(d) => {
                for (i, (w, b)) in d.weights.iter_mut().zip(&mut d.biases).enumerate() {
                    out.push((format!("mlp.w{i}"), w));
                    out.push((format!("mlp.b{i}"), b));
                }
            }
            Decoder::Conv(d) => {
                out.push(("conv.dense_w".to_string(), &mut d.dense_w));
                out.push(("conv.dense_b".to_string(), &mut d.dense_b));
                if let Some(a) = &mut d.attn {
                    a.visit_mut("conv.attn", &mut out);
                }
                for (i, (k, b)) in d.stage_kernels.iter_mut().zip(&mut d.stage_biases).enumerate() {
                    out.push((format!("conv.k{i}"), k));
                    out.push((format!("conv.b{i}"), b));
                }
            }
        }
        out
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> DecoderLeaves {
        let one = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        match self {
            Decoder::Poly(d) => DecoderLeaves::Poly { coeffs: one(tape, &d.coeffs) },
            Decoder::Mlp(d) => DecoderLeaves::Mlp {
                weights: d.weights.iter().map(|w| one(tape, w)).collect(),
                biases: d.biases.iter().map(|b| one(tape, b)).collect(),
            },
            Decoder::Conv(d) => DecoderLeaves::Conv(ConvLeaves {
                dense_w: one(tape, &d.dense_w),
                dense_b: one(tape, &d.dense_b),
                attn: d.attn.as_ref().map(|a| a.stage(tape, trainable)),
                stage_kernels: d.stage_kernels.iter().map(|k| one(tape, k)).collect(),
                stage_biases: d.stage_biases.iter().map(|b| one(tape, b)).collect(),
            }),
        }
    }

    /// Build `d(z)` on the tape for a `[B, D_Z]` latent batch.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        leaves: &DecoderLeaves,
        z: TensorRef,
    ) -> crate::tensor::Result<TensorRef> {
        let b = tape.value(z).shape()[0];
        match (self, leaves) {
            (Decoder::Poly(_), DecoderLeaves::Poly { coeffs }) => {
                let ones = tape.constant(&Tensor::full(&[b, 1], 1.0));
                let z2 = tape.square(z);
                let z3 = tape.mul(z2, z)?;
                let design = tape.concat_lastdim(&[ones, z, z2, z3])?; // [B, 4]
                let c = tape.reshape(*coeffs, &[4, 1])?;
                Ok(tape.matmul(design, c)?) // [B, 1]
            }
            (Decoder::Mlp(d), DecoderLeaves::Mlp { weights, biases }) => {
                let mut h = z;
                let last = weights.len() - 1;
                for (i, (w, bias)) in weights.iter().zip(biases).enumerate() {
                    h = layers::linear(tape, h, *w, *bias)?;
                    if i != last {
                        h = tape.silu(h);
                    }
                }
                let _ = d;
                Ok(h)
            }
            (Decoder::Conv(d), DecoderLeaves::Conv(c)) => {
                let h0 = layers::linear(tape, z, c.dense_w, c.dense_b)?;
                let bc = d.cfg.base_channels;
                let n_tok = d.base_h * d.base_w;
                let mut h = tape.silu(h0);
                if let Some(a) = &c.attn {
                    let tokens = tape.reshape(h, &[b, n_tok, bc])?;
                    let normed = tape.layernorm(tokens)?;
                    let att = layers::multi_head_attention(tape, a, normed, normed)?;
                    h = tape.add(tokens, att)?;
                }
                let mut grid = tape.reshape(h, &[b, d.base_h, d.base_w, bc])?;
                let last = c.stage_kernels.len() - 1;
                for (i, (k, bias)) in c.stage_kernels.iter().zip(&c.stage_biases).enumerate() {
                    grid = tape.transposed_conv2d(grid, *k, 2, 1)?;
                    grid = tape.add(grid, *bias)?;
                    grid = if i == last { tape.sigmoid_op(grid) } else { tape.silu(grid) };
                }
                Ok(grid)
            }
            _ => unreachable!("leaves staged from a different decoder variant"),
        }
    }

    /// Value-level decode of a `[B, D_Z]` batch.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let leaves = self.stage(&mut tape, false);
        let zr = tape.constant(z);
        let out = self.decode_on(&mut tape, &leaves, zr)?;
        Ok(tape.value(out).clone())
    }

    /// Per-sample `log p(x|z) = -||x - d(z)||^2 / (2 sigma^2)`, constant dropped.
    pub fn log_likelihood(&self, x: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
        let xhat = self.decode(z)?;
        if xhat.shape() != x.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "log_likelihood",
                lhs: x.shape().to_vec(),
                rhs: xhat.shape().to_vec(),
            }
            .into());
        }
        let b = x.shape()[0];
        let per = x.len() / b;
        let s2 = 2.0 * self.sigma_lik() * self.sigma_lik();
        Ok(x.data()
            .chunks(per)
            .zip(xhat.data().chunks(per))
            .map(|(xa, xb)| {
                -xa.iter().zip(xb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / s2
            })
            .collect())
    }

    /// Summed log-likelihood on the tape (for gradients w.r.t. z or params).
    pub fn log_likelihood_sum_on(
        &self,
        tape: &mut Tape,
        leaves: &DecoderLeaves,
        x: TensorRef,
        z: TensorRef,
    ) -> crate::tensor::Result<TensorRef> {
        let xhat = self.decode_on(tape, leaves, z)?;
        let d = tape.sub(xhat, x)?;
        let sq = tape.square(d);
        let ss = tape.sum_all(sq);
        let s2 = 2.0 * self.sigma_lik() * self.sigma_lik();
        Ok(tape.scale(ss, -1.0 / s2))
    }

    /// Exact `d log p(x|z) / dz` for every row of the batch.
    pub fn grad_z_log_likelihood(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let leaves = self.stage(&mut tape, false);
        let xr = tape.constant(x);
        let zr = tape.param(z);
        let ll = self.log_likelihood_sum_on(&mut tape, &leaves, xr, zr)?;
        tape.backward(ll)?;
        let g = tape.grad(zr).expect("z is a tracked leaf");
        if !g.iter().all(|v| v.is_finite()) {
            return Err(DecoderError::NonFinite { what: "grad_z_log_likelihood" });
        }
        Ok(Tensor::new(z.shape().to_vec(), g.to_vec())?)
    }

    /// Mean over the batch of `||x - d(z)||^2`.
    pub fn reconstruction_loss(&self, x: &Tensor, z: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = self.stage(&mut tape, false);
        let xr = tape.constant(x);
        let zr = tape.constant(z);
        let loss = self.reconstruction_loss_on(&mut tape, &leaves, xr, zr)?;
        Ok(tape.value(loss).item())
    }

    /// Reconstruction loss on the tape (for the decoder M-step).
    pub fn reconstruction_loss_on(
        &self,
        tape: &mut Tape,
        leaves: &DecoderLeaves,
        x: TensorRef,
        z: TensorRef,
    ) -> Result<TensorRef> {
        let b = tape.value(x).shape().first().copied().unwrap_or(0);
        if b == 0 {
            return Err(DecoderError::EmptyBatch { what: "reconstruction_loss" });
        }
        let xhat = self.decode_on(tape, leaves, z)?;
        let d = tape.sub(xhat, x)?;
        let sq = tape.square(d);
        let ss = tape.sum_all(sq);
        Ok(tape.scale(ss, 1.0 / b as f64))
    }
}
