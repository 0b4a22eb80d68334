//! Model checkpoint file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "MMDD"                      magic
//! u32  version (= 1)
//! u32  latent_dim
//! u32  num_classes
//! u32  total_steps T
//! u32  time_dim
//! u8   activation             0 = tanh, 1 = relu
//! u8   class embedding        0 = one-hot, 1 = learned
//! u32  class embedding width  (0 for one-hot)
//! u32  number of hidden layers H, then H x u32 widths
//! f64  beta_min
//! f64  beta_max
//! u8   codec                  0 = identity, 1 = linear
//!      if linear: u32 data_dim, encoder f64[latent*data], decoder f64[data*latent]
//! u64  parameter count P, then P x f64 parameters (network layers in order,
//!      each weights then biases, followed by the learned class table)
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{ClassEmbeddingMode, DenoiserConfig, DenoiserModel, LatentCodec};
use crate::nn::Activation;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMDD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.model.config();
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.usize_as_u32(cfg.latent_dim, "latent dim")?;
        w.usize_as_u32(cfg.num_classes, "class count")?;
        w.usize_as_u32(cfg.total_steps, "total steps")?;
        w.usize_as_u32(cfg.time_dim, "time dim")?;
        w.u8(cfg.activation.code());
        match cfg.class_embedding {
            ClassEmbeddingMode::OneHot => {
                w.u8(0);
                w.u32(0);
            }
            ClassEmbeddingMode::Learned { width } => {
                w.u8(1);
                w.usize_as_u32(width, "class width")?;
            }
        }
        w.usize_as_u32(cfg.hidden.len(), "hidden layer count")?;
        for &h in &cfg.hidden {
            w.usize_as_u32(h, "hidden width")?;
        }
        w.f64(self.schedule.beta_min());
        w.f64(self.schedule.beta_max());
        match &self.codec {
            LatentCodec::Identity { .. } => w.u8(0),
            LatentCodec::Linear {
                data_dim,
                encoder,
                decoder,
                ..
            } => {
                w.u8(1);
                w.usize_as_u32(*data_dim, "data dim")?;
                w.f64s(encoder);
                w.f64s(decoder);
            }
        }
        let params = self.model.params();
        w.u64(params.len() as u64);
        w.f64s(&params);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let latent_dim = r.u32("latent dim")? as usize;
        let num_classes = r.u32("class count")? as usize;
        let total_steps = r.u32("total steps")? as usize;
        let time_dim = r.u32("time dim")? as usize;
        let at = r.offset();
        let activation = Activation::from_code(r.u8("activation")?).ok_or(Error::Format {
            offset: at,
            message: "unknown activation code".into(),
        })?;
        let at = r.offset();
        let mode = r.u8("class embedding mode")?;
        let width = r.u32("class width")? as usize;
        let class_embedding = match mode {
            0 => ClassEmbeddingMode::OneHot,
            1 => ClassEmbeddingMode::Learned { width },
            _ => {
                return Err(Error::Format {
                    offset: at,
                    message: format!("unknown class embedding mode {mode}"),
                })
            }
        };
        let n_hidden = r.u32("hidden layer count")? as usize;
        if n_hidden > r.remaining() / 4 {
            return Err(r.error("hidden layer count exceeds file size"));
        }
        let hidden = (0..n_hidden)
            .map(|_| r.u32("hidden width").map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        let beta_min = r.f64("beta_min")?;
        let beta_max = r.f64("beta_max")?;
        let schedule =
            NoiseSchedule::linear(total_steps, beta_min, beta_max).map_err(|e| Error::Format {
                offset: at,
                message: e.to_string(),
            })?;
        let at = r.offset();
        let codec = match r.u8("codec mode")? {
            0 => LatentCodec::identity(latent_dim),
            1 => {
                let data_dim = r.u32("data dim")? as usize;
                let n = data_dim
                    .checked_mul(latent_dim)
                    .ok_or_else(|| r.error("codec size overflow"))?;
                let encoder = r.f64s(n, "encoder")?;
                let decoder = r.f64s(n, "decoder")?;
                LatentCodec::linear(data_dim, latent_dim, encoder, decoder).map_err(|e| {
                    Error::Format {
                        offset: at,
                        message: e.to_string(),
                    }
                })?
            }
            m => {
                return Err(Error::Format {
                    offset: at,
                    message: format!("unknown codec mode {m}"),
                })
            }
        };
        let config = DenoiserConfig {
            latent_dim,
            num_classes,
            total_steps,
            time_dim,
            hidden,
            activation,
            class_embedding,
        };
        let at = r.offset();
        let count = r.u64("parameter count")? as usize;
        config.validate().map_err(|e| Error::Format {
            offset: at,
            message: e.to_string(),
        })?;
        if count != config.num_params() {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "parameter count {count} does not match dims ({} expected)",
                    config.num_params()
                ),
            });
        }
        let params = r.f64s(count, "parameters")?;
        r.finish()?;
        let model = DenoiserModel::from_params(config, params)?;
        Ok(Self {
            model,
            schedule,
            codec,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
