//! The diffusion encoder: a conditional noise-prediction network driving a
//! reverse-time VP diffusion in latent space.
//!
//! The network `eps(z_s, s; x)` sees the noised latent, a Fourier embedding
//! of the forward time, and the conditioning input `x` — summarized by
//! cross-attention over weak-encoder image tokens (image mode) or by a
//! Fourier embedding of `x` itself (vector mode). The backbone is a residual
//! MLP whose blocks are modulated by the conditioning vector through
//! zero-initialized scale/shift (FiLM) maps, so the network starts as the
//! identity flow: with the readout at zero the reverse SDE is an
//! Ornstein-Uhlenbeck process and the probability-flow ODE is the identity.
//!
//! Latents are produced either by Euler-Maruyama integration of the reverse
//! SDE or deterministically by a Heun probability-flow ODE solve; training
//! uses the simulation-free denoising objective, and the time-integrated
//! squared network output (the conditional neural entropy) upper-bounds the
//! KL from the encoder's output distribution to the standard normal prior.

use crate::layers::{self, AttentionLeaves, AttentionWeights};
use crate::schedule::VpSchedule;
use crate::tensor::{Tape, Tensor, TensorError, TensorRef};
use crate::util;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
    #[error("invalid score net config: {0}")]
    InvalidConfig(String),
    #[error("score_forward: time {0} outside [eps_cutoff, horizon_t]")]
    TimeOutOfRange(f64),
    #[error("{what}: batch must be nonempty")]
    EmptyBatch { what: &'static str },
    #[error("neural_entropy: n_mc must be positive")]
    ZeroMcSamples,
    #[error("{solver}: non-finite state at step {step}")]
    NonFinite { solver: &'static str, step: usize },
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// `x` is a flat vector, Fourier-embedded with its own frozen matrix.
    Vector,
    /// `x` is an image, reduced to tokens by the weak encoder and queried by
    /// cross-attention.
    Image,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetConfig {
    pub latent_dim: usize,
    pub mapping_size: usize,
    pub fourier_scale_s: f64,
    pub fourier_scale_z: f64,
    pub embed_z: bool,
    pub mlp_widths: Vec<usize>,
    pub n_heads: usize,
    pub weak_encoder_channels: Vec<usize>,
    pub per_block_attention: bool,
    pub conditioning_mode: ConditioningMode,
    /// Flat dimension of `x` in vector mode.
    #[serde(default)]
    pub cond_dim: usize,
    /// `(H, W, C)` of `x` in image mode.
    #[serde(default)]
    pub image_hwc: Option<(usize, usize, usize)>,
}

impl ScoreNetConfig {
    /// Vector-conditioned network for low-dimensional inputs.
    pub fn vector(latent_dim: usize, cond_dim: usize, mapping_size: usize, mlp_widths: Vec<usize>) -> Self {
        Self {
            latent_dim,
            mapping_size,
            fourier_scale_s: 10.0,
            fourier_scale_z: 10.0,
            embed_z: false,
            mlp_widths,
            n_heads: 1,
            weak_encoder_channels: vec![],
            per_block_attention: false,
            conditioning_mode: ConditioningMode::Vector,
            cond_dim,
            image_hwc: None,
        }
    }

    /// Image-conditioned network with the weak-encoder/cross-attention path.
    pub fn image(
        latent_dim: usize,
        image_hwc: (usize, usize, usize),
        mapping_size: usize,
        mlp_widths: Vec<usize>,
        n_heads: usize,
        weak_encoder_channels: Vec<usize>,
    ) -> Self {
        Self {
            latent_dim,
            mapping_size,
            fourier_scale_s: 10.0,
            fourier_scale_z: 10.0,
            embed_z: false,
            mlp_widths,
            n_heads,
            weak_encoder_channels,
            per_block_attention: false,
            conditioning_mode: ConditioningMode::Image,
            cond_dim: 0,
            image_hwc: Some(image_hwc),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.latent_dim == 0 || self.mapping_size == 0 {
            return fail("latent_dim and mapping_size must be positive".into());
        }
        if self.mlp_widths.is_empty() {
            return fail("mlp_widths must be nonempty".into());
        }
        match self.conditioning_mode {
            ConditioningMode::Vector => {
                if self.cond_dim == 0 {
                    return fail("vector conditioning requires cond_dim > 0".into());
                }
                if self.per_block_attention {
                    return fail("per_block_attention requires image conditioning".into());
                }
            }
            ConditioningMode::Image => {
                let (h, w, _c) = self
                    .image_hwc
                    .ok_or_else(|| EncoderError::InvalidConfig("image mode needs image_hwc".into()))?;
                if h % 4 != 0 || w % 4 != 0 {
                    return fail(format!("image {h}x{w} must have sides divisible by 4"));
                }
                if self.weak_encoder_channels.len() != 2 {
                    return fail("weak encoder uses exactly two strided conv layers".into());
                }
                let c2 = self.weak_encoder_channels[1];
                if c2 % 4 != 0 {
                    return fail(format!("token width {c2} must be divisible by 4 for positional encodings"));
                }
                if self.n_heads == 0 || self.mapping_size % self.n_heads != 0 {
                    return fail(format!(
                        "n_heads {} must divide the attention value width {}",
                        self.n_heads, self.mapping_size
                    ));
                }
            }
        }
        Ok(())
    }

    fn token_grid(&self) -> (usize, usize, usize) {
        let (h, w, _) = self.image_hwc.expect("image mode");
        (h / 4, w / 4, self.weak_encoder_channels[1])
    }
}

#[derive(Clone)]
struct Block {
    dense_w: Tensor,
    dense_b: Tensor,
    film_rho_w: Tensor,
    film_rho_b: Tensor,
    film_shift_w: Tensor,
    film_shift_b: Tensor,
    res_proj: Option<Tensor>,
    attn: Option<AttentionWeights>,
    cond_w: Option<Tensor>,
    cond_b: Option<Tensor>,
}

/// Parameters of the conditional score network. The Fourier matrices are
/// fixed at initialization and never receive gradient updates — they are
/// staged onto tapes as constants and excluded from `params()`.
#[derive(Clone)]
pub struct ScoreNet {
    pub cfg: ScoreNetConfig,
    horizon: f64,
    eps_cutoff: f64,
    fourier_b_s: Tensor,
    fourier_b_z: Option<Tensor>,
    fourier_b_x: Option<Tensor>,
    time_w: Tensor,
    time_b: Tensor,
    x_w: Option<Tensor>,
    x_b: Option<Tensor>,
    conv1_k: Option<Tensor>,
    conv1_b: Option<Tensor>,
    conv2_k: Option<Tensor>,
    conv2_b: Option<Tensor>,
    global_attn: Option<AttentionWeights>,
    global_cond_w: Option<Tensor>,
    global_cond_b: Option<Tensor>,
    z_w: Option<Tensor>,
    z_b: Option<Tensor>,
    blocks: Vec<Block>,
    readout_w: Tensor,
    readout_b: Tensor,
    pos_enc: Option<Tensor>,
}

pub struct BlockLeaves {
    dense_w: TensorRef,
    dense_b: TensorRef,
    film_rho_w: TensorRef,
    film_rho_b: TensorRef,
    film_shift_w: TensorRef,
    film_shift_b: TensorRef,
    res_proj: Option<TensorRef>,
    attn: Option<AttentionLeaves>,
    cond_w: Option<TensorRef>,
    cond_b: Option<TensorRef>,
}

pub struct ScoreNetLeaves {
    fourier_b_s: TensorRef,
    fourier_b_z: Option<TensorRef>,
    fourier_b_x: Option<TensorRef>,
    time_w: TensorRef,
    time_b: TensorRef,
    x_w: Option<TensorRef>,
    x_b: Option<TensorRef>,
    conv1_k: Option<TensorRef>,
    conv1_b: Option<TensorRef>,
    conv2_k: Option<TensorRef>,
    conv2_b: Option<TensorRef>,
    global_attn: Option<AttentionLeaves>,
    global_cond_w: Option<TensorRef>,
    global_cond_b: Option<TensorRef>,
    z_w: Option<TensorRef>,
    z_b: Option<TensorRef>,
    blocks: Vec<BlockLeaves>,
    readout_w: TensorRef,
    readout_b: TensorRef,
    pos_enc: Option<TensorRef>,
}

impl ScoreNetLeaves {
    /// Tracked leaf refs in the exact order of `ScoreNet::params()`, for
    /// pairing tape gradients with parameter tensors.
    pub fn ordered_refs(&self) -> Vec<TensorRef> {
        let mut out = vec![self.time_w, self.time_b];
        for r in [
            self.x_w, self.x_b, self.conv1_k, self.conv1_b, self.conv2_k, self.conv2_b,
            self.global_cond_w, self.global_cond_b, self.z_w, self.z_b,
        ].into_iter().flatten() {
            out.push(r);
        }
        if let Some(a) = &self.global_attn {
            a.push_refs(&mut out);
        }
        for b in &self.blocks {
            out.push(b.dense_w);
            out.push(b.dense_b);
            out.push(b.film_rho_w);
            out.push(b.film_rho_b);
            out.push(b.film_shift_w);
            out.push(b.film_shift_b);
            if let Some(p) = b.res_proj {
                out.push(p);
            }
            if let Some(a) = &b.attn {
                a.push_refs(&mut out);
            }
            if let Some(w) = b.cond_w {
                out.push(w);
            }
            if let Some(bn) = b.cond_b {
                out.push(bn);
            }
        }
        out.push(self.readout_w);
        out.push(self.readout_b);
        out
    }
}

/// Conditioning staged on a tape.
pub enum CondOn {
    /// Projected embedding of a vector `x`, width M.
    Vector(TensorRef),
    /// Weak-encoder tokens `[B, N, C']`.
    Tokens(TensorRef),
}

/// Value-level conditioning for the samplers; image tokens are computed once
/// per batch and reused across solver steps.
#[derive(Debug, Clone)]
pub enum CondValues {
    /// Unprocessed conditioning input (flat vector or image, per the mode).
    Raw(Tensor),
    /// Precomputed weak-encoder tokens `[B, N, C']`.
    Tokens(Tensor),
}

impl CondValues {
    pub fn batch(&self) -> usize {
        match self {
            CondValues::Raw(t) | CondValues::Tokens(t) => t.shape()[0],
        }
    }

    /// Repeat each row `k` times (row i of the result is row i/k of self),
    /// so several latent chains can share one conditioning input.
    pub fn repeat_rows(&self, k: usize) -> CondValues {
        let rep = |t: &Tensor| {
            let b = t.shape()[0];
            let per = t.len() / b;
            let mut data = Vec::with_capacity(t.len() * k);
            for i in 0..b {
                for _ in 0..k {
                    data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
            }
            let mut shape = t.shape().to_vec();
            shape[0] = b * k;
            Tensor::new(shape, data).expect("sized by construction")
        };
        match self {
            CondValues::Raw(t) => CondValues::Raw(rep(t)),
            CondValues::Tokens(t) => CondValues::Tokens(rep(t)),
        }
    }
}

impl ScoreNet {
    pub fn init(cfg: ScoreNetConfig, sched: &VpSchedule, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.mapping_size;
        let dz = cfg.latent_dim;
        let fourier_b_s = util::randn_scaled(&[m, 1], cfg.fourier_scale_s, rng);
        let fourier_b_z =
            cfg.embed_z.then(|| util::randn_scaled(&[m, dz], cfg.fourier_scale_z, rng));
        let time_w = layers::init_weight(2 * m, &[2 * m, m], rng);
        let time_b = Tensor::zeros(&[m]);

        let mut net = Self {
            horizon: sched.horizon_t,
            eps_cutoff: sched.eps_cutoff,
            fourier_b_x: None,
            x_w: None,
            x_b: None,
            conv1_k: None,
            conv1_b: None,
            conv2_k: None,
            conv2_b: None,
            global_attn: None,
            global_cond_w: None,
            global_cond_b: None,
            z_w: None,
            z_b: None,
            blocks: Vec::new(),
            readout_w: Tensor::zeros(&[*cfg.mlp_widths.last().unwrap(), dz]),
            readout_b: Tensor::zeros(&[dz]),
            pos_enc: None,
            fourier_b_s,
            fourier_b_z,
            time_w,
            time_b,
            cfg,
        };
        let cfg = &net.cfg;

        match cfg.conditioning_mode {
            ConditioningMode::Vector => {
                net.fourier_b_x =
                    Some(util::randn_scaled(&[m, cfg.cond_dim], cfg.fourier_scale_z, rng));
                net.x_w = Some(layers::init_weight(2 * m, &[2 * m, m], rng));
                net.x_b = Some(Tensor::zeros(&[m]));
            }
            ConditioningMode::Image => {
                let (_, _, c) = cfg.image_hwc.unwrap();
                let (c1, c2) = (cfg.weak_encoder_channels[0], cfg.weak_encoder_channels[1]);
                net.conv1_k = Some(layers::init_weight(16 * c, &[4, 4, c, c1], rng));
                net.conv1_b = Some(Tensor::zeros(&[c1]));
                net.conv2_k = Some(layers::init_weight(16 * c1, &[4, 4, c1, c2], rng));
                net.conv2_b = Some(Tensor::zeros(&[c2]));
                let (th, tw, tc) = cfg.token_grid();
                net.pos_enc = Some(layers::positional_encoding_2d(th, tw, tc));
                if !cfg.per_block_attention {
                    net.global_attn =
                        Some(AttentionWeights::init(m, c2, m, cfg.n_heads, m, rng));
                }
            }
        }
        if !cfg.per_block_attention {
            net.global_cond_w = Some(layers::init_weight(2 * m, &[2 * m, m], rng));
            net.global_cond_b = Some(Tensor::zeros(&[m]));
        }
        if cfg.embed_z {
            net.z_w = Some(layers::init_weight(2 * m, &[2 * m, m], rng));
            net.z_b = Some(Tensor::zeros(&[m]));
        }

        let mut prev = if cfg.embed_z { m } else { dz };
        let per_block = cfg.per_block_attention;
        let tc = (cfg.conditioning_mode == ConditioningMode::Image)
            .then(|| cfg.token_grid().2)
            .unwrap_or(0);
        for &w in &cfg.mlp_widths {
            let attn =
                per_block.then(|| AttentionWeights::init(prev, tc, m, cfg.n_heads, m, rng));
            let (cond_w, cond_b) = if per_block {
                (Some(layers::init_weight(2 * m, &[2 * m, m], rng)), Some(Tensor::zeros(&[m])))
            } else {
                (None, None)
            };
            net.blocks.push(Block {
                dense_w: layers::init_weight(prev, &[prev, w], rng),
                dense_b: Tensor::zeros(&[w]),
                // Zero-initialized modulation: h*(1+rho)+shift starts as identity.
                film_rho_w: Tensor::zeros(&[m, w]),
                film_rho_b: Tensor::zeros(&[w]),
                film_shift_w: Tensor::zeros(&[m, w]),
                film_shift_b: Tensor::zeros(&[w]),
                res_proj: (prev != w).then(|| layers::init_weight(prev, &[prev, w], rng)),
                attn,
                cond_w,
                cond_b,
            });
            prev = w;
        }
        Ok(net)
    }

    /// Overwrite the zero readout with small random weights. The zero init is
    /// the training default (the encoder starts at the prior); tests that need
    /// a non-degenerate random network perturb it through this hook.
    pub fn randomize_readout(&mut self, std: f64, rng: &mut ChaCha8Rng) {
        let shape = self.readout_w.shape().to_vec();
        self.readout_w = util::randn_scaled(&shape, std, rng);
    }

    pub fn fourier_b_s(&self) -> &Tensor {
        &self.fourier_b_s
    }

    pub fn fourier_b_z(&self) -> Option<&Tensor> {
        self.fourier_b_z.as_ref()
    }

    /// The frozen Fourier matrices, for checkpointing; never part of
    /// `params()` and never updated by optimizers.
    pub fn frozen_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("score.fourier_b_s".to_string(), &self.fourier_b_s)];
        if let Some(t) = &self.fourier_b_z {
            out.push(("score.fourier_b_z".to_string(), t));
        }
        if let Some(t) = &self.fourier_b_x {
            out.push(("score.fourier_b_x".to_string(), t));
        }
        out
    }

    pub fn frozen_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("score.fourier_b_s".to_string(), &mut self.fourier_b_s)];
        if let Some(t) = &mut self.fourier_b_z {
            out.push(("score.fourier_b_z".to_string(), t));
        }
        if let Some(t) = &mut self.fourier_b_x {
            out.push(("score.fourier_b_x".to_string(), t));
        }
        out
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("score.time_w".into(), &self.time_w));
        out.push(("score.time_b".into(), &self.time_b));
        for (n, t) in [
            ("x_w", self.x_w.as_ref()),
            ("x_b", self.x_b.as_ref()),
            ("conv1_k", self.conv1_k.as_ref()),
            ("conv1_b", self.conv1_b.as_ref()),
            ("conv2_k", self.conv2_k.as_ref()),
            ("conv2_b", self.conv2_b.as_ref()),
            ("global_cond_w", self.global_cond_w.as_ref()),
            ("global_cond_b", self.global_cond_b.as_ref()),
            ("z_w", self.z_w.as_ref()),
            ("z_b", self.z_b.as_ref()),
        ] {
            if let Some(t) = t {
                out.push((format!("score.{n}"), t));
            }
        }
        if let Some(a) = &self.global_attn {
            a.visit("score.global_attn", &mut out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("score.blk{i}.dense_w"), &b.dense_w));
            out.push((format!("score.blk{i}.dense_b"), &b.dense_b));
            out.push((format!("score.blk{i}.film_rho_w"), &b.film_rho_w));
            out.push((format!("score.blk{i}.film_rho_b"), &b.film_rho_b));
            out.push((format!("score.blk{i}.film_shift_w"), &b.film_shift_w));
            out.push((format!("score.blk{i}.film_shift_b"), &b.film_shift_b));
            if let Some(p) = &b.res_proj {
                out.push((format!("score.blk{i}.res_proj"), p));
            }
            if let Some(a) = &b.attn {
                a.visit(&format!("score.blk{i}.attn"), &mut out);
            }
            if let Some(w) = &b.cond_w {
                out.push((format!("score.blk{i}.cond_w"), w));
            }
            if let Some(bn) = &b.cond_b {
                out.push((format!("score.blk{i}.cond_b"), bn));
            }
        }
        out.push(("score.readout_w".into(), &self.readout_w));
        out.push(("score.readout_b".into(), &self.readout_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("score.time_w".into(), &mut self.time_w));
        out.push(("score.time_b".into(), &mut self.time_b));
        for (n, t) in [
            ("x_w", self.x_w.as_mut()),
            ("x_b", self.x_b.as_mut()),
            ("conv1_k", self.conv1_k.as_mut()),
            ("conv1_b", self.conv1_b.as_mut()),
            ("conv2_k", self.conv2_k.as_mut()),
            ("conv2_b", self.conv2_b.as_mut()),
            ("global_cond_w", self.global_cond_w.as_mut()),
            ("global_cond_b", self.global_cond_b.as_mut()),
            ("z_w", self.z_w.as_mut()),
            ("z_b", self.z_b.as_mut()),
        ] {
            if let Some(t) = t {
                out.push((format!("score.{n}"), t));
            }
        }
        if let Some(a) = &mut self.global_attn {
            a.visit_mut("score.global_attn", &mut out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("score.blk{i}.dense_w"), &mut b.dense_w));
            out.push((format!("score.blk{i}.dense_b"), &mut b.dense_b));
            out.push((format!("score.blk{i}.film_rho_w"), &mut b.film_rho_w));
            out.push((format!("score.blk{i}.film_rho_b"), &mut b.film_rho_b));
            out.push((format!("score.blk{i}.film_shift_w"), &mut b.film_shift_w));
            out.push((format!("score.blk{i}.film_shift_b"), &mut b.film_shift_b));
            if let Some(p) = &mut b.res_proj {
                out.push((format!("score.blk{i}.res_proj"), p));
            }
            if let Some(a) = &mut b.attn {
                a.visit_mut(&format!("score.blk{i}.attn"), &mut out);
            }
            if let Some(w) = &mut b.cond_w {
                out.push((format!("score.blk{i}.cond_w"), w));
            }
            if let Some(bn) = &mut b.cond_b {
                out.push((format!("score.blk{i}.cond_b"), bn));
            }
        }
        out.push(("score.readout_w".into(), &mut self.readout_w));
        out.push(("score.readout_b".into(), &mut self.readout_b));
        out
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> ScoreNetLeaves {
        let one = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let opt = |tape: &mut Tape, t: &Option<Tensor>| t.as_ref().map(|t| one(tape, t));
        ScoreNetLeaves {
            // Frozen Fourier matrices always enter as constants.
            fourier_b_s: tape.constant(&self.fourier_b_s),
            fourier_b_z: self.fourier_b_z.as_ref().map(|t| tape.constant(t)),
            fourier_b_x: self.fourier_b_x.as_ref().map(|t| tape.constant(t)),
            time_w: one(tape, &self.time_w),
            time_b: one(tape, &self.time_b),
            x_w: opt(tape, &self.x_w),
            x_b: opt(tape, &self.x_b),
            conv1_k: opt(tape, &self.conv1_k),
            conv1_b: opt(tape, &self.conv1_b),
            conv2_k: opt(tape, &self.conv2_k),
            conv2_b: opt(tape, &self.conv2_b),
            global_attn: self.global_attn.as_ref().map(|a| a.stage(tape, trainable)),
            global_cond_w: opt(tape, &self.global_cond_w),
            global_cond_b: opt(tape, &self.global_cond_b),
            z_w: opt(tape, &self.z_w),
            z_b: opt(tape, &self.z_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockLeaves {
                    dense_w: one(tape, &b.dense_w),
                    dense_b: one(tape, &b.dense_b),
                    film_rho_w: one(tape, &b.film_rho_w),
                    film_rho_b: one(tape, &b.film_rho_b),
                    film_shift_w: one(tape, &b.film_shift_w),
                    film_shift_b: one(tape, &b.film_shift_b),
                    res_proj: opt(tape, &b.res_proj),
                    attn: b.attn.as_ref().map(|a| a.stage(tape, trainable)),
                    cond_w: opt(tape, &b.cond_w),
                    cond_b: opt(tape, &b.cond_b),
                })
                .collect(),
            readout_w: one(tape, &self.readout_w),
            readout_b: one(tape, &self.readout_b),
            pos_enc: self.pos_enc.as_ref().map(|t| tape.constant(t)),
        }
    }

    /// `[sin(2 pi u B^T), cos(2 pi u B^T)]` for `u: [B, d]`, `B: [M, d]`.
    pub fn fourier_embed(
        tape: &mut Tape,
        u: TensorRef,
        b_matrix: TensorRef,
    ) -> crate::tensor::Result<TensorRef> {
        let bt = tape.transpose_last2(b_matrix)?;
        let proj = tape.matmul(u, bt)?;
        let scaled = tape.scale(proj, 2.0 * std::f64::consts::PI);
        let s = tape.sin(scaled);
        let c = tape.cos(scaled);
        tape.concat_lastdim(&[s, c])
    }

    fn embed_time(
        &self,
        tape: &mut Tape,
        leaves: &ScoreNetLeaves,
        s: &[f64],
    ) -> Result<TensorRef> {
        let t = self.schedule_normalized_times(s);
        let u = tape.constant_owned(Tensor::new(vec![s.len(), 1], t)?);
        let emb = Self::fourier_embed(tape, u, leaves.fourier_b_s)?;
        let lin = layers::linear(tape, emb, leaves.time_w, leaves.time_b)?;
        Ok(tape.silu(lin))
    }

    fn schedule_normalized_times(&self, s: &[f64]) -> Vec<f64> {
        // Times are normalized by the horizon before embedding so the
        // embedding scale is independent of the horizon choice.
        s.iter().map(|&v| v / self.horizon).collect()
    }

    /// Weak encoder: two stride-2 convs (kernel 4, same padding, SiLU), then
    /// flatten to tokens and add 2-D sinusoidal positional encodings.
    pub fn weak_encode_on(
        &self,
        tape: &mut Tape,
        leaves: &ScoreNetLeaves,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let shape = tape.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "weak_encode: image {h}x{w} must have sides divisible by 4"
            )));
        }
        let b = shape[0];
        let h1 = tape.conv2d_stride(x, leaves.conv1_k.unwrap(), 2, 1)?;
        let h1 = tape.add(h1, leaves.conv1_b.unwrap())?;
        let h1 = tape.silu(h1);
        let h2 = tape.conv2d_stride(h1, leaves.conv2_k.unwrap(), 2, 1)?;
        let h2 = tape.add(h2, leaves.conv2_b.unwrap())?;
        let h2 = tape.silu(h2);
        let (th, tw, tc) = self.cfg.token_grid();
        let tokens = tape.reshape(h2, &[b, th * tw, tc])?;
        tape.add(tokens, leaves.pos_enc.unwrap()).map_err(Into::into)
    }

    /// Stage conditioning values onto the tape.
    pub fn cond_on(
        &self,
        tape: &mut Tape,
        leaves: &ScoreNetLeaves,
        cond: &CondValues,
    ) -> Result<CondOn> {
        match (self.cfg.conditioning_mode, cond) {
            (ConditioningMode::Vector, CondValues::Raw(x)) => {
                let xr = tape.constant(x);
                self.embed_x_on(tape, leaves, xr).map(CondOn::Vector)
            }
            (ConditioningMode::Image, CondValues::Raw(x)) => {
                let xr = tape.constant(x);
                let tokens = self.weak_encode_on(tape, leaves, xr)?;
                Ok(CondOn::Tokens(tokens))
            }
            (ConditioningMode::Image, CondValues::Tokens(t)) => {
                Ok(CondOn::Tokens(tape.constant(t)))
            }
            (ConditioningMode::Vector, CondValues::Tokens(_)) => Err(EncoderError::InvalidConfig(
                "vector-conditioned network cannot take image tokens".into(),
            )),
        }
    }

    /// Fourier-embed a vector `x` and project to width M (vector mode).
    pub fn embed_x_on(
        &self,
        tape: &mut Tape,
        leaves: &ScoreNetLeaves,
        x: TensorRef,
    ) -> Result<TensorRef> {
        let emb = Self::fourier_embed(tape, x, leaves.fourier_b_x.expect("vector mode"))?;
        let lin = layers::linear(tape, emb, leaves.x_w.unwrap(), leaves.x_b.unwrap())?;
        Ok(tape.silu(lin))
    }

    fn cond_vector(
        &self,
        tape: &mut Tape,
        e_s: TensorRef,
        summary: TensorRef,
        cond_w: TensorRef,
        cond_b: TensorRef,
    ) -> Result<TensorRef> {
        let cat = tape.concat_lastdim(&[e_s, summary])?;
        let act = tape.silu(cat);
        layers::linear(tape, act, cond_w, cond_b).map_err(Into::into)
    }

    /// `eps(z_s, s; x)` for a `[B, D_Z]` batch with per-row times.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        leaves: &ScoreNetLeaves,
        z: TensorRef,
        s: &[f64],
        cond: &CondOn,
    ) -> Result<TensorRef> {
        for &si in s {
            if !(self.eps_cutoff..=self.horizon).contains(&si) {
                return Err(EncoderError::TimeOutOfRange(si));
            }
        }
        let b = tape.value(z).shape()[0];
        if b == 0 || b != s.len() {
            return Err(EncoderError::EmptyBatch { what: "score_forward" });
        }
        let e_s = self.embed_time(tape, leaves, s)?;

        // Global conditioning vector (reused by every block unless the
        // per-block variant recomputes it from the current hidden state).
        let global_c = if self.cfg.per_block_attention {
            None
        } else {
            let summary = match cond {
                CondOn::Vector(e_x) => *e_x,
                CondOn::Tokens(tokens) => layers::attend_single_query(
                    tape,
                    leaves.global_attn.as_ref().expect("global attention in image mode"),
                    e_s,
                    *tokens,
                )?,
            };
            Some(self.cond_vector(
                tape,
                e_s,
                summary,
                leaves.global_cond_w.unwrap(),
                leaves.global_cond_b.unwrap(),
            )?)
        };

        let mut h = if self.cfg.embed_z {
            let emb = Self::fourier_embed(tape, z, leaves.fourier_b_z.expect("embed_z"))?;
            let lin = layers::linear(tape, emb, leaves.z_w.unwrap(), leaves.z_b.unwrap())?;
            tape.silu(lin)
        } else {
            z
        };

        for bl in &leaves.blocks {
            let h_in = h;
            let c = match global_c {
                Some(c) => c,
                None => {
                    let tokens = match cond {
                        CondOn::Tokens(t) => *t,
                        CondOn::Vector(_) => unreachable!("validated: per-block needs images"),
                    };
                    let att = layers::attend_single_query(
                        tape,
                        bl.attn.as_ref().expect("per-block attention"),
                        h_in,
                        tokens,
                    )?;
                    self.cond_vector(tape, e_s, att, bl.cond_w.unwrap(), bl.cond_b.unwrap())?
                }
            };
            let mut u = layers::linear(tape, h, bl.dense_w, bl.dense_b)?;
            u = tape.layernorm(u)?;
            let rho = layers::linear(tape, c, bl.film_rho_w, bl.film_rho_b)?;
            let shift = layers::linear(tape, c, bl.film_shift_w, bl.film_shift_b)?;
            let width = tape.value(u).shape()[1];
            let ones = tape.constant(&Tensor::full(&[width], 1.0));
            let gain = tape.add(rho, ones)?;
            u = tape.mul(u, gain)?;
            u = tape.add(u, shift)?;
            u = tape.silu(u);
            h = match bl.res_proj {
                Some(p) => {
                    let proj = tape.matmul(h_in, p)?;
                    tape.add(u, proj)?
                }
                None => tape.add(u, h_in)?,
            };
        }
        layers::linear(tape, h, leaves.readout_w, leaves.readout_b).map_err(Into::into)
    }

    /// Value-level conditioning prep: compute weak-encoder tokens once per
    /// batch (image mode) so solver loops do not repeat the convolutions.
    pub fn prep_cond(&self, x: &Tensor) -> Result<CondValues> {
        match self.cfg.conditioning_mode {
            ConditioningMode::Vector => Ok(CondValues::Raw(x.clone())),
            ConditioningMode::Image => {
                let mut tape = Tape::new();
                let leaves = self.stage(&mut tape, false);
                let xr = tape.constant(x);
                let tok = self.weak_encode_on(&mut tape, &leaves, xr)?;
                Ok(CondValues::Tokens(tape.value(tok).clone()))
            }
        }
    }

    /// Value-level `eps(z, s; x)` for one shared time.
    pub fn score_eval(&self, z: &Tensor, s: f64, cond: &CondValues) -> Result<Tensor> {
        let mut tape = Tape::new();
        let leaves = self.stage(&mut tape, false);
        let cond_on = self.cond_on(&mut tape, &leaves, cond)?;
        let zr = tape.constant(z);
        let times = vec![s; z.shape()[0]];
        let out = self.forward_on(&mut tape, &leaves, zr, &times, &cond_on)?;
        Ok(tape.value(out).clone())
    }

}

/// Per-sample `(time, noise)` draws for the simulation-free losses. Keeping
/// them explicit makes losses reproducible for fixed-draw gradient checks.
#[derive(Debug, Clone)]
pub struct Draws {
    pub s: Vec<f64>,
    pub noise: Tensor, // [B, D_Z]
}

impl Draws {
    pub fn sample(sched: &VpSchedule, batch: usize, dz: usize, rng: &mut ChaCha8Rng) -> Self {
        let s: Vec<f64> = (0..batch).map(|_| sched.sample_time(rng)).collect();
        Self { s, noise: util::randn(&[batch, dz], rng) }
    }
}

/// Denoising objective on the tape against an arbitrary score function:
/// `T * mean_b[ lambda(s_b) beta(s_b)/2 * || eps(zt_b, s_b; x_b) - zt_b + noise_b / sqrt(1 - ab(s_b)) ||^2 ]`.
///
/// `zt = sqrt(ab) z* + sqrt(1-ab) noise` is the forward kernel sample; the
/// bracket is `grad log prior - kernel score + eps`, with
/// `grad log prior(zt) = -zt` and kernel score `-noise / sqrt(1 - ab)`.
pub fn denoising_loss_on<F>(
    tape: &mut Tape,
    sched: &VpSchedule,
    mut score: F,
    z_star: &Tensor,
    draws: &Draws,
) -> Result<TensorRef>
where
    F: FnMut(&mut Tape, TensorRef, &[f64]) -> Result<TensorRef>,
{
    let b = z_star.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(EncoderError::EmptyBatch { what: "denoising_loss" });
    }
    let dz = z_star.shape()[1];
    let zt = sched.forward_sample_rows(z_star, &draws.s, &draws.noise)?;

    // Constant part of the residual: noise / sqrt(1-ab) - zt, and weights.
    let mut resid_const = vec![0.0; b * dz];
    let mut weights = vec![0.0; b * dz];
    for (i, &si) in draws.s.iter().enumerate() {
        let ab = sched.alpha_bar(si)?;
        let denom = (1.0 - ab).sqrt();
        let w = sched.lambda_weight(si)? * sched.beta(si)? / 2.0;
        for j in 0..dz {
            resid_const[i * dz + j] = draws.noise.data()[i * dz + j] / denom - zt.data()[i * dz + j];
            weights[i * dz + j] = w;
        }
    }
    let zt_ref = tape.constant(&zt);
    let eps = score(tape, zt_ref, &draws.s)?;
    let c = tape.constant_owned(Tensor::new(vec![b, dz], resid_const)?);
    let resid = tape.add(eps, c)?;
    let sq = tape.square(resid);
    let w = tape.constant_owned(Tensor::new(vec![b, dz], weights)?);
    let weighted = tape.mul(sq, w)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, sched.horizon_t / b as f64))
}

/// Conditional neural entropy on the tape:
/// `T * mean[ beta(s)/2 * ||eps(zt, s; x)||^2 ]` over the provided draws.
pub fn neural_entropy_on<F>(
    tape: &mut Tape,
    sched: &VpSchedule,
    mut score: F,
    z0: &Tensor,
    draws: &Draws,
) -> Result<TensorRef>
where
    F: FnMut(&mut Tape, TensorRef, &[f64]) -> Result<TensorRef>,
{
    let b = z0.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(EncoderError::EmptyBatch { what: "neural_entropy" });
    }
    let dz = z0.shape()[1];
    let zt = sched.forward_sample_rows(z0, &draws.s, &draws.noise)?;
    let mut weights = vec![0.0; b * dz];
    for (i, &si) in draws.s.iter().enumerate() {
        let w = sched.beta(si)? / 2.0;
        for j in 0..dz {
            weights[i * dz + j] = w;
        }
    }
    let zt_ref = tape.constant(&zt);
    let eps = score(tape, zt_ref, &draws.s)?;
    let sq = tape.square(eps);
    let w = tape.constant_owned(Tensor::new(vec![b, dz], weights)?);
    let weighted = tape.mul(sq, w)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, sched.horizon_t / b as f64))
}

impl ScoreNet {
    /// Denoising loss of this network on `(z*, x)` targets with fresh draws.
    pub fn denoising_loss(
        &self,
        sched: &VpSchedule,
        z_star: &Tensor,
        cond: &CondValues,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let draws = Draws::sample(sched, z_star.shape()[0], self.cfg.latent_dim, rng);
        let mut tape = Tape::new();
        let leaves = self.stage(&mut tape, false);
        let cond_on = self.cond_on(&mut tape, &leaves, cond)?;
        let loss = denoising_loss_on(
            &mut tape,
            sched,
            |t, z, s| self.forward_on(t, &leaves, z, s, &cond_on),
            z_star,
            &draws,
        )?;
        Ok(tape.value(loss).item())
    }

    /// Monte-Carlo neural-entropy estimate with `n_mc` draws per sample.
    pub fn neural_entropy(
        &self,
        sched: &VpSchedule,
        z0: &Tensor,
        cond: &CondValues,
        rng: &mut ChaCha8Rng,
        n_mc: usize,
    ) -> Result<f64> {
        if n_mc == 0 {
            return Err(EncoderError::ZeroMcSamples);
        }
        let b = z0.shape()[0];
        let dz = self.cfg.latent_dim;
        let mut acc = 0.0;
        for _ in 0..n_mc {
            let draws = Draws::sample(sched, b, dz, rng);
            let mut tape = Tape::new();
            let leaves = self.stage(&mut tape, false);
            let cond_on = self.cond_on(&mut tape, &leaves, cond)?;
            let se = neural_entropy_on(
                &mut tape,
                sched,
                |t, z, s| self.forward_on(t, &leaves, z, s, &cond_on),
                z0,
                &draws,
            )?;
            acc += tape.value(se).item();
        }
        Ok(acc / n_mc as f64)
    }
}

/// Euler-Maruyama integration of the reverse SDE
/// `dz = [f_eq(z, s) + beta(s) eps(z, s; x)] dt + sqrt(beta(s)) dB`,
/// from `z ~ N(0, I)` at `s = T` down to `s = eps_cutoff`.
pub fn sample_sde<F>(
    sched: &VpSchedule,
    mut score: F,
    batch: usize,
    dz: usize,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    assert!(n_steps >= 1, "n_steps must be at least 1");
    let mut z = util::randn(&[batch, dz], rng);
    let dt = (sched.horizon_t - sched.eps_cutoff) / n_steps as f64;
    for i in 0..n_steps {
        // clamp the grid: accumulated rounding must not leave [eps, T]
        let s = (sched.horizon_t - i as f64 * dt).clamp(sched.eps_cutoff, sched.horizon_t);
        let beta = sched.beta(s)?;
        let eps = score(&z, s)?;
        let noise = util::randn(&[batch, dz], rng);
        let amp = (beta * dt).sqrt();
        for ((zv, ev), nv) in z.data_mut().iter_mut().zip(eps.data()).zip(noise.data()) {
            *zv += (-beta / 2.0 * *zv + beta * ev) * dt + amp * nv;
        }
        if !z.all_finite() {
            return Err(EncoderError::NonFinite { solver: "sample_sde", step: i });
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeSolver {
    Heun,
    Euler,
}

/// Probability-flow ODE transport of `z0` (reverse time, deterministic):
/// `dz/dt = -f_eq(z, s) + (beta(s)/2) s_theta(z, s; x)` with the
/// score-matching parameterization `s_theta = eps - z` (since
/// `2 f_eq / sigma^2 = -z`). Heun is the default second-order solver.
pub fn sample_pf_ode<F>(
    sched: &VpSchedule,
    mut score: F,
    z0: &Tensor,
    n_steps: usize,
    solver: OdeSolver,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    assert!(n_steps >= 1, "n_steps must be at least 1");
    let mut z = z0.clone();
    let dt = (sched.horizon_t - sched.eps_cutoff) / n_steps as f64;
    let drift = |score: &mut F, z: &Tensor, s: f64, beta: f64| -> Result<Tensor> {
        let eps = score(z, s)?;
        let mut d = eps;
        for (dv, zv) in d.data_mut().iter_mut().zip(z.data()) {
            let s_theta = *dv - zv;
            *dv = beta / 2.0 * zv + beta / 2.0 * s_theta;
        }
        Ok(d)
    };
    for i in 0..n_steps {
        // clamp the grid: accumulated rounding must not leave [eps, T]
        let s0 = (sched.horizon_t - i as f64 * dt).clamp(sched.eps_cutoff, sched.horizon_t);
        let s1 = (sched.horizon_t - (i + 1) as f64 * dt)
            .clamp(sched.eps_cutoff, sched.horizon_t);
        let k1 = drift(&mut score, &z, s0, sched.beta(s0)?)?;
        match solver {
            OdeSolver::Euler => {
                for (zv, kv) in z.data_mut().iter_mut().zip(k1.data()) {
                    *zv += dt * kv;
                }
            }
            OdeSolver::Heun => {
                let mut z_pred = z.clone();
                for (zv, kv) in z_pred.data_mut().iter_mut().zip(k1.data()) {
                    *zv += dt * kv;
                }
                let k2 = drift(&mut score, &z_pred, s1, sched.beta(s1)?)?;
                for ((zv, k1v), k2v) in z.data_mut().iter_mut().zip(k1.data()).zip(k2.data()) {
                    *zv += dt / 2.0 * (k1v + k2v);
                }
            }
        }
        if !z.all_finite() {
            return Err(EncoderError::NonFinite { solver: "sample_pf_ode", step: i });
        }
    }
    Ok(z)
}

impl ScoreNet {
    /// Reverse-SDE latents for a conditioning batch (one chain per row).
    pub fn sample_sde(
        &self,
        sched: &VpSchedule,
        cond: &CondValues,
        n_steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        sample_sde(
            sched,
            |z, s| self.score_eval(z, s, cond),
            cond.batch(),
            self.cfg.latent_dim,
            n_steps,
            rng,
        )
    }

    /// Deterministic PF-ODE latents from given `z0` (one chain per row).
    pub fn sample_pf_ode(
        &self,
        sched: &VpSchedule,
        cond: &CondValues,
        z0: &Tensor,
        n_steps: usize,
    ) -> Result<Tensor> {
        sample_pf_ode(sched, |z, s| self.score_eval(z, s, cond), z0, n_steps, OdeSolver::Heun)
    }
}

#[cfg(test)]
#[path = "encoder_tests.rs"]
mod tests;
