//! Binary checkpoint format.
//!
//! ```text
//! magic  "SCNF"                      4 bytes
//! version u32 LE                     (currently 1)
//! config  u32 LE length + UTF-8 text
//! table   per parameter, in registration order:
//!           u32 LE name length + UTF-8 name
//!           u32 LE rank, then u32 LE per dimension
//!           f64 LE per value
//! ```
//!
//! The table runs to end-of-file. Loading validates every entry against
//! the target model before a single parameter is written, so a mismatched
//! architecture cannot leave a half-loaded model behind.

use std::io::Write;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::model::ScnfModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCNF";
pub const VERSION: u32 = 1;

pub fn save_bytes(cfg: &TrainConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = cfg.serialize();
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, cfg: &TrainConfig, store: &ParamStore) -> Result<()> {
    let bytes = save_bytes(cfg, store);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[derive(Debug)]
pub struct CheckpointData {
    pub config: TrainConfig,
    pub params: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail(format!("truncated checkpoint (wanted {n} more bytes)"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn parse_bytes(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad checkpoint magic {magic:02x?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version} (supported: {VERSION})"),
        });
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| Error::Format {
            offset: 12,
            msg: format!("config snapshot is not UTF-8: {e}"),
        })?
        .to_string();
    let config = TrainConfig::parse(&cfg_text)?;
    let mut params = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format {
                offset: r.pos as u64,
                msg: format!("param name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(CheckpointData { config, params })
}

pub fn load_bytes(bytes: &[u8]) -> Result<(TrainConfig, ScnfModel)> {
    let data = parse_bytes(bytes)?;
    let mut model = crate::arch::build_model(&data.config)?;
    // Validate the whole table before writing anything.
    if data.params.len() != model.store.len() {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "checkpoint has {} params, model wants {}",
                data.params.len(),
                model.store.len()
            ),
        });
    }
    for (name, value) in &data.params {
        let Some(id) = model.store.find(name) else {
            return Err(Error::Format {
                offset: 0,
                msg: format!("checkpoint param {name:?} not present in the model"),
            });
        };
        if model.store.value(id).shape() != value.shape() {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "param {name:?}: checkpoint shape {:?} vs model shape {:?}",
                    value.shape(),
                    model.store.value(id).shape()
                ),
            });
        }
    }
    for (name, value) in data.params {
        let id = model.store.find(&name).expect("validated above");
        model.store.set_value(id, value)?;
    }
    mark_actnorms_initialized(&mut model);
    Ok((data.config, model))
}

// Loaded actnorm parameters are trained values; nothing should re-run the
// data-dependent init on them.
fn mark_actnorms_initialized(model: &mut ScnfModel) {
    use crate::layers::{FlowLayer, StackItem};
    let mark = |items: &mut Vec<StackItem>| {
        for item in items {
            if let StackItem::Layer(FlowLayer::ActNorm(an)) = item {
                an.initialized = true;
            }
        }
    };
    mark(&mut model.fw.items);
    if let crate::model::CondHead::Flow { stack, .. } = &mut model.head {
        mark(&mut stack.items);
    }
}

pub fn load(path: &Path) -> Result<(TrainConfig, ScnfModel)> {
    let bytes = std::fs::read(path)?;
    load_bytes(&bytes)
}
