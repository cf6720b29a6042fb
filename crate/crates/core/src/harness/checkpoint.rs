//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian, 64-bit floats stored as raw IEEE-754
//! bits so the round trip is bitwise lossless):
//!
//! ```text
//! magic            4 bytes  "DAEC"
//! version          u32      currently 1
//! kind             u8       0 = diffusion autoencoder, 1 = VAE baseline
//! config           u64 len + UTF-8 TOML of the full run config
//! rng seed         32 bytes (ChaCha8 seed)
//! rng word pos     u128
//! rng stream       u64
//! step             u64
//! diverged         u8
//! final eval       u8 present flag + 3 x f64 (encoder loss, distortion, rate)
//! tensor count     u64
//! per tensor:      u64 name len, name bytes, u64 ndim, ndim x u64 dims,
//!                  numel x f64 (LE bits)
//! ```
//!
//! The tensor table carries every model parameter, the frozen Fourier
//! matrices, and both optimizers' moment buffers, so resumed runs continue
//! bit-for-bit.

use super::config::RunConfig;
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config embedded in checkpoint failed to parse: {0}")]
    Config(#[from] super::config::ConfigError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

const MAGIC: &[u8; 4] = b"DAEC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalEval {
    pub encoder_loss: f64,
    pub distortion: f64,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: u8,
    pub config: RunConfig,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
    pub step: u64,
    pub diverged: bool,
    pub final_eval: Option<FinalEval>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn capture_rng(rng: &ChaCha8Rng) -> ([u8; 32], u128, u64) {
        (rng.get_seed(), rng.get_word_pos(), rng.get_stream())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind);
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.push(self.diverged as u8);
        match &self.final_eval {
            None => out.push(0),
            Some(fe) => {
                out.push(1);
                for v in [fe.encoder_loss, fe.distortion, fe.rate] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let kind = r.u8()?;
        let cfg_len = r.u64()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let config = RunConfig::parse(cfg_text)?;
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(r.take(32)?);
        let rng_word_pos = u128::from_le_bytes(
            r.take(16)?.try_into().expect("sized take"),
        );
        let rng_stream = r.u64()?;
        let step = r.u64()?;
        let diverged = r.u8()? != 0;
        let final_eval = if r.u8()? != 0 {
            Some(FinalEval { encoder_loss: r.f64()?, distortion: r.f64()?, rate: r.f64()? })
        } else {
            None
        };
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?
                .to_string();
            let ndim = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64()?);
            }
            tensors.push((
                name,
                Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
            ));
        }
        Ok(Self {
            kind,
            config,
            rng_seed,
            rng_word_pos,
            rng_stream,
            step,
            diverged,
            final_eval,
            tensors,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        super::dataset::atomic_write(path, &self.encode())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "need {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized take")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("sized take")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("sized take")))
    }
}
