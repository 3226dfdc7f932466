//! Checkpoint serialization: a little-endian binary container holding the
//! config snapshot, every named parameter tensor, optimizer state, RNG
//! position and the global step.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{ModelConfig, NamedParam};
use crate::tensor::{read_tensor, write_tensor, TensorError};
use crate::train::optim::{Adam, Schedule};

const MAGIC: &[u8; 4] = b"TPCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("config block: {0}")]
    Config(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Reproducible position of a ChaCha stream cipher RNG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<NamedParam>,
    pub optim: Adam,
    pub rng: RngState,
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_f64_slice<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    write_u64(w, v.len() as u64)?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64_vec<R: Read>(r: &mut R) -> std::io::Result<Vec<f64>> {
    let len = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;

        let config = serde_json::to_vec(&self.config)?;
        write_u64(w, config.len() as u64)?;
        w.write_all(&config)?;

        write_u64(w, self.step)?;

        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        write_u64(w, self.rng.stream)?;

        write_u64(w, self.params.len() as u64)?;
        for p in &self.params {
            write_u64(w, p.name.len() as u64)?;
            w.write_all(p.name.as_bytes())?;
            write_tensor(w, &p.value)?;
        }

        let o = &self.optim;
        w.write_all(&o.beta1.to_le_bytes())?;
        w.write_all(&o.beta2.to_le_bytes())?;
        w.write_all(&o.eps.to_le_bytes())?;
        w.write_all(&o.schedule.base_lr.to_le_bytes())?;
        write_u64(w, o.schedule.total_steps as u64)?;
        write_u64(w, o.schedule.warmup_steps as u64)?;
        write_u64(w, o.step as u64)?;
        write_u64(w, o.m.len() as u64)?;
        for buf in o.m.iter().chain(&o.v) {
            write_f64_slice(w, buf)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        let found = u32::from_le_bytes(ver);
        if found != VERSION {
            return Err(CheckpointError::VersionMismatch { found });
        }

        let config_len = read_u64(r)? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes)?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)?;

        let step = read_u64(r)?;

        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        let rng = RngState {
            seed,
            word_pos: u128::from_le_bytes(wp),
            stream: read_u64(r)?,
        };

        let count = read_u64(r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u64(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Malformed("non-utf8 tensor name".into()))?;
            let value = read_tensor(r)?;
            params.push(NamedParam { name, value });
        }

        let beta1 = read_f64(r)?;
        let beta2 = read_f64(r)?;
        let eps = read_f64(r)?;
        let base_lr = read_f64(r)?;
        let total_steps = read_u64(r)? as usize;
        let warmup_steps = read_u64(r)? as usize;
        let opt_step = read_u64(r)? as usize;
        let buffers = read_u64(r)? as usize;
        if buffers != params.len() {
            return Err(CheckpointError::Malformed(format!(
                "optimizer has {buffers} buffers for {} parameters",
                params.len()
            )));
        }
        let mut m = Vec::with_capacity(buffers);
        for _ in 0..buffers {
            m.push(read_f64_vec(r)?);
        }
        let mut v = Vec::with_capacity(buffers);
        for _ in 0..buffers {
            v.push(read_f64_vec(r)?);
        }
        let optim = Adam {
            beta1,
            beta2,
            eps,
            schedule: Schedule { base_lr, total_steps, warmup_steps },
            step: opt_step,
            m,
            v,
        };

        Ok(Checkpoint { config, step, params, optim, rng })
    }
}
