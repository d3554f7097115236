//! Binary checkpoints.
//!
//! Layout: `SRDK`, `u32` version, `u32` tensor count, then per tensor a
//! `u16` name length, the UTF-8 name, a `u8` rank, rank × `u32` dims and the
//! little-endian `f32` payload; a trailing `u32` CRC32 covers everything
//! after the magic. Besides the model tensors a checkpoint carries
//! `meta.config` (the network config text, one byte per element) and, when
//! saved with an optimizer, `optim.step` (the step as eight bytes) plus
//! `optim.m.<name>` / `optim.v.<name>` moments.

use std::path::{Path, PathBuf};

use irdet_tensor::{Real, Tensor};

use crate::error::Result;
use crate::net::{Model, NetConfig};
use crate::train::{AdamW, Moments};

const MAGIC: &[u8; 4] = b"SRDK";
pub const VERSION: u32 = 1;
const CONFIG: &str = "meta.config";
const STEP: &str = "optim.step";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic")]
    BadMagic,
    #[error("unexpected end of checkpoint")]
    UnexpectedEnd,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Named `f32` tensors in file order.
pub type Entries = Vec<(String, Tensor<f32>)>;

pub fn encode(entries: &Entries) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&VERSION.to_le_bytes());
    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        body.extend_from_slice(&(name.len() as u16).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(t.rank() as u8);
        for &d in t.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::UnexpectedEnd)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::UnexpectedEnd)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Entries, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::UnexpectedEnd)?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(&shape, data).expect("length checked")));
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&bytes[4..body_end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes after checksum".into()));
    }
    Ok(entries)
}

fn bytes_tensor(bytes: &[u8]) -> Tensor<f32> {
    Tensor::new(&[bytes.len()], bytes.iter().map(|&b| b as f32).collect()).expect("1-d")
}

fn tensor_bytes(t: &Tensor<f32>) -> std::result::Result<Vec<u8>, CheckpointError> {
    t.data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(CheckpointError::Malformed("byte tensor holds a non-byte value".into()))
            }
        })
        .collect()
}

pub fn to_entries<T: Real>(model: &Model<T>, opt: Option<&AdamW<T>>) -> Entries {
    let store = model.store();
    let mut entries = vec![(CONFIG.to_string(), bytes_tensor(model.config().to_text().as_bytes()))];
    for id in store.ids() {
        entries.push((store.name(id).to_string(), store.get(id).cast()));
    }
    if let Some(opt) = opt {
        entries.push((STEP.to_string(), bytes_tensor(&opt.step.to_le_bytes())));
        for (i, slot) in opt.moments.iter().enumerate() {
            if let Some(mo) = slot {
                let name = store.name(store.ids().nth(i).expect("moment index within store"));
                entries.push((format!("optim.m.{name}"), mo.m.cast()));
                entries.push((format!("optim.v.{name}"), mo.v.cast()));
            }
        }
    }
    entries
}

pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub optimizer: Option<AdamW<T>>,
}

/// Rebuilds a model (and optimizer state when present). The optimizer gets
/// `weight_decay` since hyperparameters are not stored.
pub fn from_entries<T: Real>(entries: Entries, weight_decay: f64) -> Result<Checkpoint<T>> {
    let config_bytes = entries
        .iter()
        .find(|(n, _)| n == CONFIG)
        .ok_or_else(|| CheckpointError::MissingTensor(CONFIG.into()))?;
    let text = String::from_utf8(tensor_bytes(&config_bytes.1)?)
        .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
    let config = NetConfig::from_text(&text)?;
    let mut model = Model::<T>::build(config, 0)?;
    let mut seen = vec![false; model.store().len()];
    let mut opt: Option<AdamW<T>> = None;
    for (name, t) in entries {
        if name == CONFIG {
            continue;
        }
        if name == STEP {
            let b: [u8; 8] = tensor_bytes(&t)?
                .try_into()
                .map_err(|_| CheckpointError::Malformed("optimizer step is not 8 bytes".into()))?;
            opt.get_or_insert_with(|| AdamW::new(weight_decay)).step = u64::from_le_bytes(b);
            continue;
        }
        let moment = name
            .strip_prefix("optim.m.")
            .map(|n| (n, true))
            .or_else(|| name.strip_prefix("optim.v.").map(|n| (n, false)));
        if let Some((pname, first)) = moment {
            let id = model
                .store()
                .id(pname)
                .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
            let expected = model.store().get(id).shape().to_vec();
            if t.shape() != expected {
                return Err(CheckpointError::ShapeMismatch { name, found: t.shape().to_vec(), expected }.into());
            }
            let o = opt.get_or_insert_with(|| AdamW::new(weight_decay));
            if o.moments.len() < model.store().len() {
                o.moments.resize(model.store().len(), None);
            }
            let slot = o.moments[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(&expected),
                v: Tensor::zeros(&expected),
            });
            if first {
                slot.m = t.cast();
            } else {
                slot.v = t.cast();
            }
            continue;
        }
        let id = model
            .store()
            .id(&name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        let expected = model.store().get(id).shape().to_vec();
        if t.shape() != expected {
            return Err(CheckpointError::ShapeMismatch { name, found: t.shape().to_vec(), expected }.into());
        }
        model.store_mut().set(id, t.cast())?;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let id = model.store().ids().nth(i).expect("index within store");
        return Err(CheckpointError::MissingTensor(model.store().name(id).to_string()).into());
    }
    Ok(Checkpoint { model, optimizer: opt })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, opt: Option<&AdamW<T>>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&to_entries(model, opt))).map_err(io(path))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path, weight_decay: f64) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    from_entries(decode(&bytes)?, weight_decay)
}
