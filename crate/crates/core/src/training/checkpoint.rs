//! PHOS checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "PHOS"                     magic
//! u32 version                = 1
//! u64 len, [u8; len]         TOML header: [network], optional [train], epoch
//! u32 count                  parameters, each:
//!   u32 len, name (UTF-8)
//!   u32 rank, u32 dims[rank]
//!   f64 values[prod(dims)]
//! u32 count                  batch-norm layers, each:
//!   u32 channels, f64 momentum, f64 epsilon
//!   f64 running_mean[channels], f64 running_var[channels]
//! u8 flag                    1 => 10 f64 normalization stats follow
//!                            (mean, std for four modalities, then age)
//! u8 flag                    1 => u64 step, then per parameter
//!                            f64 m[..], f64 v[..] in parameter order
//! [u8; 32]                   SHA-256 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerState, TrainConfig};
use crate::autodiff::BatchNormState;
use crate::data::{MeanStd, NormStats};
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, PosthocModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PHOS";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PosthocModel,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<OptimizerState>,
    pub norm: Option<NormStats>,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn of_model(model: PosthocModel) -> Self {
        Checkpoint {
            model,
            train_config: None,
            optimizer: None,
            norm: None,
            epoch: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    epoch: usize,
    network: NetworkConfig,
    train: Option<TrainConfig>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        epoch: ckpt.epoch,
        network: ckpt.model.config().clone(),
        train: ckpt.train_config.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let params = ckpt.model.params();
    put_u32(&mut out, params.len() as u32);
    for p in params {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f64s(&mut out, p.value.data());
    }

    let bn = ckpt.model.batch_norm_states();
    put_u32(&mut out, bn.len() as u32);
    for s in bn {
        put_u32(&mut out, s.channels() as u32);
        put_f64s(&mut out, &[s.momentum, s.epsilon]);
        put_f64s(&mut out, &s.running_mean);
        put_f64s(&mut out, &s.running_var);
    }

    match &ckpt.norm {
        Some(n) => {
            out.push(1);
            for s in n.modalities.iter().chain(std::iter::once(&n.age)) {
                put_f64s(&mut out, &[s.mean, s.std]);
            }
        }
        None => out.push(0),
    }

    match &ckpt.optimizer {
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.t.to_le_bytes());
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_f64s(&mut out, m.data());
                put_f64s(&mut out, v.data());
            }
        }
        None => out.push(0),
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Data(format!("checkpoint truncated at byte {}", self.at)));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Data("checkpoint length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a checkpoint. The digest is verified before anything is built, so
/// a corrupted file never yields a partial model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Data("not a checkpoint: expected magic \"PHOS\"".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(Error::Data("checkpoint truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Data("checkpoint is corrupted: checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, at: 8 };
    let text_len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let mut model = PosthocModel::new(header.network)?;

    let n_params = r.u32()? as usize;
    if n_params != model.params().len() {
        return Err(Error::Data(format!(
            "checkpoint has {n_params} parameters, configuration implies {}",
            model.params().len()
        )));
    }
    for param in model.params_mut() {
        let len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != param.name || dims != param.value.shape() {
            return Err(Error::Data(format!(
                "checkpoint parameter {name} {dims:?} does not match expected {} {:?}",
                param.name,
                param.value.shape()
            )));
        }
        param.value = Tensor::new(dims, r.f64s(param.value.numel())?)?;
    }

    let n_bn = r.u32()? as usize;
    if n_bn != model.batch_norm_states().len() {
        return Err(Error::Data(format!("checkpoint has {n_bn} batch-norm layers")));
    }
    for state in model.batch_norm_states_mut() {
        let channels = r.u32()? as usize;
        if channels != state.channels() {
            return Err(Error::Data(format!(
                "batch-norm layer has {channels} channels, expected {}",
                state.channels()
            )));
        }
        let me = r.f64s(2)?;
        *state = BatchNormState {
            momentum: me[0],
            epsilon: me[1],
            running_mean: r.f64s(channels)?,
            running_var: r.f64s(channels)?,
            ..BatchNormState::new(channels)
        };
    }

    let norm = match r.u8()? {
        0 => None,
        1 => {
            let v = r.f64s(10)?;
            let ms = |i: usize| MeanStd {
                mean: v[2 * i],
                std: v[2 * i + 1],
            };
            Some(NormStats {
                modalities: [ms(0), ms(1), ms(2), ms(3)],
                age: ms(4),
            })
        }
        f => return Err(Error::Data(format!("bad normalization flag {f}"))),
    };

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in model.params() {
                let shape = p.value.shape().to_vec();
                m.push(Tensor::new(shape.clone(), r.f64s(p.value.numel())?)?);
                v.push(Tensor::new(shape, r.f64s(p.value.numel())?)?);
            }
            Some(OptimizerState { m, v, t })
        }
        f => return Err(Error::Data(format!("bad optimizer flag {f}"))),
    };
    if r.at != body.len() {
        return Err(Error::Data(format!(
            "{} unexpected trailing bytes in checkpoint",
            body.len() - r.at
        )));
    }
    Ok(Checkpoint {
        model,
        train_config: header.train,
        optimizer,
        norm,
        epoch: header.epoch,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
