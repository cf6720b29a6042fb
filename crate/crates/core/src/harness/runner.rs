//! Config-driven training runs: dataset preparation with a fixed seeded
//! train/eval split, model construction, the cycle loop with last-good
//! checkpoint snapshots, and the deterministic final evaluation.

use super::checkpoint::{Checkpoint, CheckpointError, FinalEval};
use super::config::{Algorithm, DatasetKind, DecoderKind, ModelKind, RunConfig};
use super::dataset::{self, Dataset};
use crate::decoder::{ConvDecoder, ConvDecoderConfig, Decoder, MlpDecoder, PolyDecoder};
use crate::encoder::{ScoreNet, ScoreNetConfig};
use crate::tensor::Tensor;
use crate::toy::{self, ToyConfig};
use crate::trainer::{
    vae_kl, DaeTrainConfig, DaeTrainState, GaussianEncoder, TrainError, VaeTrainState,
};
use crate::util;
use rand::seq::SliceRandom;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] super::dataset::DatasetError),
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Decoder(#[from] crate::decoder::DecoderError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Toy(#[from] crate::toy::ToyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

/// Train/eval split of the conditioning inputs. Images are `[n, h, w, c]`;
/// the toy model uses `[n, 1]`.
pub struct SplitData {
    pub train: Tensor,
    pub eval: Tensor,
    pub train_labels: Option<Vec<u8>>,
    pub eval_labels: Option<Vec<u8>>,
    /// `(h, w, c)` when the inputs are images.
    pub image_dims: Option<(usize, usize, usize)>,
}

impl SplitData {
    pub fn flat_dim(&self) -> usize {
        self.train.len() / self.train.shape()[0]
    }

    fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
        let per = t.len() / t.shape()[0];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data).expect("sized by construction")
    }

    pub fn train_batch(&self, idx: &[usize]) -> Tensor {
        Self::rows(&self.train, idx)
    }
}

/// Flatten `[n, ...]` to `[n, prod]` (same data, new shape).
pub fn flatten_rows(t: &Tensor) -> Tensor {
    let n = t.shape()[0];
    let per = t.len() / n.max(1);
    Tensor::new(vec![n, per], t.data().to_vec()).expect("same length")
}

const EVAL_TAG: u64 = 0x45_56_41_4c; // "EVAL"
const DATA_TAG: u64 = 0x44_41_54_41; // "DATA"
const ORDER_TAG: u64 = 0x4f_52_44_52; // "ORDR"
const MODEL_TAG: u64 = 0x4d_4f_44_4c; // "MODL"

/// Build the configured dataset and split it by a fixed seeded permutation;
/// no eval example appears in training.
pub fn prepare_data(cfg: &RunConfig) -> Result<SplitData> {
    let need = cfg.dataset.train_count + cfg.dataset.eval_count;
    let data_seed = util::derive_seed(cfg.seed, DATA_TAG);
    match cfg.dataset.kind {
        DatasetKind::Toy => {
            let tc = ToyConfig { sigma: cfg.dataset.toy_sigma, ..Default::default() };
            let mut rng = util::rng_from_seed(data_seed);
            let xs: Vec<f64> = toy::toy_sample(&tc, need, &mut rng).iter().map(|p| p.1).collect();
            let all = Tensor::new(vec![need, 1], xs)?;
            let (tr, ev) = split_rows(&all, cfg.dataset.train_count, data_seed);
            Ok(SplitData { train: tr, eval: ev, train_labels: None, eval_labels: None, image_dims: None })
        }
        DatasetKind::MnistIdx | DatasetKind::Synthetic => {
            let ds = load_image_dataset(cfg, need, data_seed)?;
            let ds = if cfg.dataset.downsample > 1 {
                dataset::downsample(&ds, cfg.dataset.downsample)?
            } else {
                ds
            };
            if ds.n < need {
                return Err(RunError::Invalid(format!(
                    "dataset has {} examples, need {}",
                    ds.n, need
                )));
            }
            let mut order: Vec<usize> = (0..ds.n).collect();
            let mut rng = util::rng_from_seed(data_seed);
            order.shuffle(&mut rng);
            let tr_idx = &order[..cfg.dataset.train_count];
            let ev_idx = &order[cfg.dataset.train_count..need];
            let labels = ds.labels.as_ref();
            Ok(SplitData {
                train: ds.batch(tr_idx),
                eval: ds.batch(ev_idx),
                train_labels: labels.map(|l| tr_idx.iter().map(|&i| l[i]).collect()),
                eval_labels: labels.map(|l| ev_idx.iter().map(|&i| l[i]).collect()),
                image_dims: Some((ds.h, ds.w, ds.c)),
            })
        }
    }
}

fn load_image_dataset(cfg: &RunConfig, need: usize, data_seed: u64) -> Result<Dataset> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            Ok(dataset::synthetic_digits(need, cfg.dataset.side, data_seed))
        }
        DatasetKind::MnistIdx => {
            let dir = cfg
                .dataset
                .path
                .clone()
                .ok_or_else(|| RunError::Invalid("dataset.path required for mnist-idx".into()))?;
            let images = dir.join("train-images-idx3-ubyte");
            let labels = dir.join("train-labels-idx1-ubyte");
            Ok(dataset::load_mnist_idx(&images, Some(&labels))?)
        }
        DatasetKind::Toy => unreachable!("toy handled by the caller"),
    }
}

fn split_rows(all: &Tensor, n_train: usize, seed: u64) -> (Tensor, Tensor) {
    let n = all.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = util::rng_from_seed(seed);
    order.shuffle(&mut rng);
    (SplitData::rows(all, &order[..n_train]), SplitData::rows(all, &order[n_train..]))
}

pub enum ModelState {
    Dae(DaeTrainState),
    Vae(VaeTrainState),
}

impl ModelState {
    pub fn diverged(&self) -> bool {
        match self {
            ModelState::Dae(s) => s.diverged,
            ModelState::Vae(s) => s.diverged,
        }
    }

    pub fn loss_history(&self) -> &[crate::trainer::CycleRecord] {
        match self {
            ModelState::Dae(s) => &s.loss_history,
            ModelState::Vae(s) => &s.loss_history,
        }
    }
}

fn score_config(cfg: &RunConfig, data: &SplitData) -> ScoreNetConfig {
    let m = &cfg.model;
    let mut sc = match data.image_dims {
        Some(hwc) => ScoreNetConfig::image(
            m.latent_dim,
            hwc,
            m.mapping_size,
            m.mlp_widths.clone(),
            m.n_heads,
            m.weak_encoder_channels.clone(),
        ),
        None => ScoreNetConfig::vector(m.latent_dim, 1, m.mapping_size, m.mlp_widths.clone()),
    };
    sc.embed_z = m.embed_z;
    sc.per_block_attention = m.per_block_attention;
    sc.fourier_scale_s = m.fourier_scale_s;
    sc.fourier_scale_z = m.fourier_scale_z;
    sc
}

fn build_decoder(cfg: &RunConfig, data: &SplitData, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Decoder> {
    let m = &cfg.model;
    Ok(match m.decoder {
        DecoderKind::Poly => {
            if m.latent_dim != 1 {
                return Err(RunError::Invalid(
                    "the polynomial decoder requires latent_dim = 1".into(),
                ));
            }
            Decoder::Poly(PolyDecoder::init(m.decoder_sigma, rng))
        }
        DecoderKind::Mlp => Decoder::Mlp(MlpDecoder::init(
            m.latent_dim,
            &m.decoder_mlp_widths,
            data.flat_dim(),
            m.decoder_sigma,
            rng,
        )),
        DecoderKind::Conv => {
            let (h, w, c) = data
                .image_dims
                .ok_or_else(|| RunError::Invalid("conv decoder requires image data".into()))?;
            Decoder::Conv(ConvDecoder::init(
                ConvDecoderConfig {
                    out_h: h,
                    out_w: w,
                    out_c: c,
                    latent_dim: m.latent_dim,
                    base_channels: m.decoder_base_channels,
                    stage_channels: m.decoder_stage_channels.clone(),
                    self_attention: m.decoder_self_attention,
                    sigma_lik: m.decoder_sigma,
                },
                rng,
            )?)
        }
    })
}

/// Initialize a model state from the config and data dims.
pub fn build_state(cfg: &RunConfig, data: &SplitData) -> Result<ModelState> {
    let model_seed = util::derive_seed(cfg.seed, MODEL_TAG);
    let mut rng = util::rng_from_seed(model_seed);
    match cfg.model.kind {
        ModelKind::Dae => {
            let score = ScoreNet::init(score_config(cfg, data), &cfg.schedule, &mut rng)?;
            let decoder = build_decoder(cfg, data, &mut rng)?;
            Ok(ModelState::Dae(DaeTrainState::new(
                score,
                decoder,
                cfg.schedule,
                cfg.langevin,
                DaeTrainConfig {
                    latents_per_input: cfg.run.latents_per_input,
                    pf_ode_steps: cfg.run.pf_ode_steps,
                },
                cfg.optimizer,
                cfg.seed,
            )))
        }
        ModelKind::Vae => {
            let enc = GaussianEncoder::init(
                data.flat_dim(),
                &cfg.model.vae_encoder_widths,
                cfg.model.latent_dim,
                &mut rng,
            );
            let decoder = build_decoder(cfg, data, &mut rng)?;
            Ok(ModelState::Vae(VaeTrainState::new(
                enc,
                decoder,
                cfg.langevin.gamma,
                cfg.optimizer,
                cfg.seed,
            )))
        }
    }
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub final_eval: Option<FinalEval>,
    /// Checkpoint reflecting the end of the run (last good state if diverged).
    pub checkpoint: Checkpoint,
}

/// Train per the config; no file output. The returned checkpoint is the
/// last finite state, with the final evaluation embedded when the run
/// completed cleanly.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = prepare_data(cfg)?;
    let mut state = build_state(cfg, &data)?;
    let n_train = data.train.shape()[0];
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut order_rng = util::rng_from_seed(util::derive_seed(cfg.seed, ORDER_TAG));
    let mut cursor = n_train; // force an initial shuffle
    let total = cfg.total_cycles();
    let mut last_good = snapshot(&state, cfg, None)?;

    for _ in 0..total {
        if cursor >= n_train {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.run.batch_size).min(n_train);
        let idx = &order[cursor..end];
        cursor = end;
        let x = data.train_batch(idx);
        match &mut state {
            ModelState::Dae(st) => match cfg.run.algorithm {
                Algorithm::Alg1 => st.train_cycle_alg1(&x)?,
                Algorithm::Alg2 => st.train_cycle_alg2(&x)?,
            },
            ModelState::Vae(st) => {
                let flat = flatten_rows(&x);
                st.train_cycle(&flat, &x)?;
            }
        }
        if state.diverged() {
            // Freeze the run: the caller persists the last good checkpoint.
            return Ok(TrainOutcome { state, final_eval: None, checkpoint: last_good });
        }
        last_good = snapshot(&state, cfg, None)?;
    }

    let final_eval = Some(evaluate(&state, cfg, &data)?);
    let checkpoint = snapshot(&state, cfg, final_eval)?;
    Ok(TrainOutcome { state, final_eval, checkpoint })
}

/// Deterministic held-out evaluation: distortion from one fresh latent
/// sample per input, the model's rate proxy, and its encoder objective.
pub fn evaluate(state: &ModelState, cfg: &RunConfig, data: &SplitData) -> Result<FinalEval> {
    let eval_seed = util::derive_seed(cfg.seed, EVAL_TAG);
    let mut rng = util::rng_from_seed(eval_seed);
    let x = &data.eval;
    let n = x.shape()[0];
    match state {
        ModelState::Dae(st) => {
            let dz = st.score.cfg.latent_dim;
            let cond = st.score.prep_cond(x)?;
            let z0 = util::randn(&[n, dz], &mut rng);
            let z = st.score.sample_pf_ode(&st.schedule, &cond, &z0, cfg.run.heun_steps_export)?;
            let xhat = st.decoder.decode(&z)?;
            let distortion = mean_sq_norm(x, &xhat);
            let rate =
                st.score.neural_entropy(&st.schedule, &z, &cond, &mut rng, cfg.run.rate_mc_samples)?;
            let encoder_loss = st.score.denoising_loss(&st.schedule, &z, &cond, &mut rng)?;
            Ok(FinalEval { encoder_loss, distortion, rate })
        }
        ModelState::Vae(st) => {
            let flat = flatten_rows(x);
            let (mu, sigma) = st.encoder.encode(&flat)?;
            let eps = util::randn(mu.shape(), &mut rng);
            let mut z = mu.clone();
            for ((zv, sv), ev) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
                *zv += sv * ev;
            }
            let xhat = st.decoder.decode(&z)?;
            let distortion = mean_sq_norm(x, &xhat);
            let dz = st.encoder.latent_dim;
            let mut kl_acc = 0.0;
            for i in 0..n {
                kl_acc += vae_kl(
                    &mu.data()[i * dz..(i + 1) * dz],
                    &sigma.data()[i * dz..(i + 1) * dz],
                )?;
            }
            let rate = kl_acc / n as f64;
            Ok(FinalEval { encoder_loss: distortion + st.gamma * rate, distortion, rate })
        }
    }
}

/// Mean over the batch of the squared distance between inputs and
/// reconstructions.
pub fn mean_sq_norm(x: &Tensor, xhat: &Tensor) -> f64 {
    let n = x.shape()[0] as f64;
    x.data().iter().zip(xhat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

// ---- checkpoint plumbing ---------------------------------------------------

fn adam_tensors(prefix: &str, adam: &crate::trainer::Adam, out: &mut Vec<(String, Tensor)>) {
    let (t, m, v) = adam.state();
    out.push((format!("{prefix}.t"), Tensor::scalar(t as f64)));
    for (i, buf) in m.iter().enumerate() {
        out.push((format!("{prefix}.m.{i:04}"), Tensor::from_vec(buf.clone())));
    }
    for (i, buf) in v.iter().enumerate() {
        out.push((format!("{prefix}.v.{i:04}"), Tensor::from_vec(buf.clone())));
    }
}

fn adam_restore(prefix: &str, adam: &mut crate::trainer::Adam, ck: &Checkpoint) -> Result<()> {
    let t = match ck.tensor(&format!("{prefix}.t")) {
        Some(t) => t.item() as u64,
        None => return Ok(()), // optimizer never stepped
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for i in 0.. {
        match ck.tensor(&format!("{prefix}.m.{i:04}")) {
            Some(t) => m.push(t.data().to_vec()),
            None => break,
        }
    }
    for i in 0.. {
        match ck.tensor(&format!("{prefix}.v.{i:04}")) {
            Some(t) => v.push(t.data().to_vec()),
            None => break,
        }
    }
    adam.restore(t, m, v);
    Ok(())
}

/// Serialize the full training state (parameters, frozen matrices, optimizer
/// moments, RNG position, step counter).
pub fn snapshot(state: &ModelState, cfg: &RunConfig, final_eval: Option<FinalEval>) -> Result<Checkpoint> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let (kind, rng, step, diverged) = match state {
        ModelState::Dae(st) => {
            for (n, t) in st.score.params() {
                tensors.push((n, t.clone()));
            }
            for (n, t) in st.score.frozen_params() {
                tensors.push((n, t.clone()));
            }
            for (n, t) in st.decoder.params() {
                tensors.push((format!("dec.{n}"), t.clone()));
            }
            adam_tensors("opt_enc", &st.adam_encoder, &mut tensors);
            adam_tensors("opt_dec", &st.adam_decoder, &mut tensors);
            (0u8, &st.rng, st.step, st.diverged)
        }
        ModelState::Vae(st) => {
            for (n, t) in st.encoder.params() {
                tensors.push((n, t.clone()));
            }
            for (n, t) in st.decoder.params() {
                tensors.push((format!("dec.{n}"), t.clone()));
            }
            adam_tensors("opt", &st.adam, &mut tensors);
            (1u8, &st.rng, st.step, st.diverged)
        }
    };
    let (rng_seed, rng_word_pos, rng_stream) = Checkpoint::capture_rng(rng);
    Ok(Checkpoint {
        kind,
        config: cfg.clone(),
        rng_seed,
        rng_word_pos,
        rng_stream,
        step,
        diverged,
        final_eval,
        tensors,
    })
}

/// Rebuild a training state from a checkpoint (the embedded config drives
/// model construction; every tensor is then overwritten from the table).
pub fn restore(ck: &Checkpoint, data: &SplitData) -> Result<ModelState> {
    let cfg = &ck.config;
    let mut state = build_state(cfg, data)?;
    let fill = |name: String, t: &mut Tensor| -> Result<()> {
        let src = ck
            .tensor(&name)
            .ok_or_else(|| RunError::Invalid(format!("checkpoint missing tensor {name}")))?;
        if src.shape() != t.shape() {
            return Err(RunError::Invalid(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        *t = src.clone();
        Ok(())
    };
    match &mut state {
        ModelState::Dae(st) => {
            if ck.kind != 0 {
                return Err(RunError::Invalid("checkpoint kind is not a diffusion autoencoder".into()));
            }
            for (n, t) in st.score.params_mut() {
                fill(n, t)?;
            }
            for (n, t) in st.score.frozen_params_mut() {
                fill(n, t)?;
            }
            for (n, t) in st.decoder.params_mut() {
                fill(format!("dec.{n}"), t)?;
            }
            adam_restore("opt_enc", &mut st.adam_encoder, ck)?;
            adam_restore("opt_dec", &mut st.adam_decoder, ck)?;
            st.rng = ck.rng();
            st.step = ck.step;
            st.diverged = ck.diverged;
        }
        ModelState::Vae(st) => {
            if ck.kind != 1 {
                return Err(RunError::Invalid("checkpoint kind is not a VAE".into()));
            }
            for (n, t) in st.encoder.params_mut() {
                fill(n, t)?;
            }
            for (n, t) in st.decoder.params_mut() {
                fill(format!("dec.{n}"), t)?;
            }
            adam_restore("opt", &mut st.adam, ck)?;
            st.rng = ck.rng();
            st.step = ck.step;
            st.diverged = ck.diverged;
        }
    }
    Ok(state)
}

/// Latent samples from the E-step equilibrium: encoder PF-ODE draws pushed
/// through the Langevin chain against the trained decoder (diffusion model),
/// or reparameterized posterior draws (VAE). Rows are `(z, label)`,
/// `n_per_class` per label.
pub fn export_latents(
    state: &ModelState,
    x: &Tensor,
    labels: &[u8],
    n_per_class: usize,
    heun_steps: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, u8)>> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut counts = std::collections::BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let c = counts.entry(l).or_insert(0usize);
        if *c < n_per_class {
            *c += 1;
            chosen.push(i);
        }
    }
    let xs = SplitData::rows(x, &chosen);
    let mut rng = util::rng_from_seed(seed);
    let z = match state {
        ModelState::Dae(st) => {
            let cond = st.score.prep_cond(&xs)?;
            let dz = st.score.cfg.latent_dim;
            let z0 = util::randn(&[chosen.len(), dz], &mut rng);
            let z = st.score.sample_pf_ode(&st.schedule, &cond, &z0, heun_steps)?;
            crate::trainer::langevin_estep(&st.decoder, &xs, &z, &st.langevin, &mut rng)?
        }
        ModelState::Vae(st) => {
            let flat = flatten_rows(&xs);
            let (mu, sigma) = st.encoder.encode(&flat)?;
            let eps = util::randn(mu.shape(), &mut rng);
            let mut z = mu.clone();
            for ((zv, sv), ev) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
                *zv += sv * ev;
            }
            z
        }
    };
    let dz = z.shape()[1];
    Ok(chosen
        .iter()
        .enumerate()
        .map(|(row, &i)| (z.data()[row * dz..(row + 1) * dz].to_vec(), labels[i]))
        .collect())
}
