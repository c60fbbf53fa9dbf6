//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CLLD" | format_version u32 | config digest [32] | config_len u32 | config JSON
//! | step u64 | seed u64 | array_count u32
//! | { name_len u32 | name | rank u32 | dims u64 × rank | f32 × numel } × array_count
//! | SHA-256 of everything above [32]
//! ```
//!
//! Arrays are named `online/<param>`, `target/<param>` and `optim/velocity/<param>`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{init_params, EncoderConfig};
use crate::rng::{stream, Domain};
use crate::error::{Error, Result};
use crate::optim::Lars;
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"CLLD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Hex SHA-256 of the configuration this run was resolved from. Defaults
    /// to the digest of `config_json`; callers with a wider configuration
    /// file substitute theirs.
    pub config_digest: String,
    pub config_json: String,
    pub step: u64,
    pub seed: u64,
    pub arrays: Vec<NamedArray>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn from_state<T: Real>(state: &TrainState<T>) -> Result<Self> {
        let config_json = serde_json::to_string(&state.config)
            .map_err(|e| Error::Checkpoint(format!("serializing config: {e}")))?;
        let mut arrays = Vec::new();
        let mut add = |prefix: &str, ps: &ParamSet<T>| {
            for (name, t) in ps.iter() {
                arrays.push(NamedArray {
                    name: format!("{prefix}/{name}"),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.f64() as f32).collect(),
                });
            }
        };
        add("online", &state.pair.online);
        add("target", &state.pair.target);
        for ((name, t), v) in state.pair.online.iter().zip(&state.optim.velocity) {
            arrays.push(NamedArray {
                name: format!("optim/velocity/{name}"),
                shape: t.shape().to_vec(),
                data: v.iter().map(|x| x.f64() as f32).collect(),
            });
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            config_digest: sha256_hex(config_json.as_bytes()),
            config_json,
            step: state.step,
            seed: state.config.seed,
            arrays,
        })
    }

    pub fn config(&self) -> Result<TrainConfig> {
        serde_json::from_str(&self.config_json).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))
    }

    pub fn with_config_digest(mut self, hex_digest: &str) -> Result<Self> {
        match hex::decode(hex_digest) {
            Ok(b) if b.len() == 32 => {
                self.config_digest = hex_digest.to_ascii_lowercase();
                Ok(self)
            }
            _ => Err(Error::Checkpoint(format!("{hex_digest:?} is not a SHA-256 hex digest"))),
        }
    }

    fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    fn fill<T: Real>(&self, prefix: &str, ps: &mut ParamSet<T>) -> Result<()> {
        for (name, t) in ps.iter_mut() {
            let a = self.array(&format!("{prefix}/{name}"))?;
            if a.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}/{name}: stored shape {:?}, expected {:?}",
                    a.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&a.data) {
                *dst = T::of(src as f64);
            }
        }
        Ok(())
    }

    /// Online encoder parameters and the encoder configuration they belong to.
    pub fn online_encoder<T: Real>(&self) -> Result<(EncoderConfig, ParamSet<T>)> {
        let cfg = self.config()?;
        let mut ps = init_params::<T>(&cfg.encoder, &mut stream(0, Domain::Init, 0, 0));
        self.fill("online", &mut ps)?;
        Ok((cfg.encoder, ps))
    }

    pub fn into_state<T: Real>(&self) -> Result<TrainState<T>> {
        let config = self.config()?;
        let mut state = TrainState::<T>::new(config)?;
        self.fill("online", &mut state.pair.online)?;
        self.fill("target", &mut state.pair.target)?;
        let mut velocity = state.pair.online.detached();
        self.fill("optim/velocity", &mut velocity)?;
        state.optim = Lars {
            config: state.optim.config,
            velocity: velocity.iter().map(|(_, t)| t.data().to_vec()).collect(),
        };
        state.step = self.step;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.format_version.to_le_bytes());
        b.extend_from_slice(&hex::decode(&self.config_digest).expect("digest is validated hex"));
        put_bytes(&mut b, self.config_json.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_bytes(&mut b, a.name.as_bytes());
            b.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: format_version,
            });
        }
        if bytes.len() < 32 + 8 {
            return Err(truncated());
        }
        let body_len = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt file)".into()));
        }
        let r_bytes = &bytes[..body_len];
        let mut r = Reader { bytes: r_bytes, pos: r.pos };
        let config_digest = hex::encode(r.take(32)?);
        let config_json = String::from_utf8(r.sized()?.to_vec())
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = String::from_utf8(r.sized()?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != r_bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after arrays".into()));
        }
        Ok(Self {
            format_version,
            config_digest,
            config_json,
            step,
            seed,
            arrays,
        })
    }
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s);
}

fn truncated() -> Error {
    Error::Checkpoint("file is truncated".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn sized(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::from_state(state)?.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>> {
    read_checkpoint(path)?.into_state()
}

/// Converts a stored array back into a tensor.
pub fn array_tensor<T: Real>(a: &NamedArray) -> Result<Tensor<T>> {
    Tensor::new(a.shape.clone(), a.data.iter().map(|&v| T::of(v as f64)).collect())
}
