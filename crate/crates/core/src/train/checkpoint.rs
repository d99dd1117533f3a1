//! Single-file checkpoint: magic, version, a TOML metadata block, then named
//! little-endian tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use usfnet_autograd::Tensor;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::train::{EpochRecord, PartialEpoch, Sgd, TrainState};

pub const MAGIC: &[u8; 8] = b"USFCKPT\0";
pub const VERSION: u32 = 1;

/// Storage precision of tensor payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            _ => Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param = 0,
    Buffer = 1,
    Velocity = 2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    step: usize,
    lr: f64,
    occlusion: f64,
    /// TOML integers are signed 64-bit, so the seed is stored as text.
    #[serde(with = "seed_text")]
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_metric: Option<f64>,
    dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partial: Option<PartialEpoch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    state: StateMeta,
    config: Config,
    #[serde(default)]
    history: Vec<EpochRecord>,
}

mod seed_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn put_tensor(out: &mut Vec<u8>, kind: Kind, name: &str, t: &Tensor, dtype: Dtype) -> Result<()> {
    out.push(kind as u8);
    let nb = name.as_bytes();
    let len = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(nb);
    out.push(dtype.tag());
    out.push(u8::try_from(t.rank()).map_err(|_| Error::Checkpoint("rank too large".into()))?);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

/// Serialises a training state to bytes.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let meta = Meta {
        state: StateMeta {
            epoch: state.epoch,
            step: state.step,
            lr: state.lr,
            occlusion: state.occlusion,
            seed: state.seed,
            best_metric: state.best_metric,
            dtype: state.dtype,
            partial: state.partial.clone(),
        },
        config: state.config.clone(),
        history: state.history.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let count = state.params.params().count() + state.params.buffers().count() + state.optimizer.velocity.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (n, t) in state.params.params() {
        put_tensor(&mut out, Kind::Param, n, t, state.dtype)?;
    }
    for (n, t) in state.params.buffers() {
        put_tensor(&mut out, Kind::Buffer, n, t, state.dtype)?;
    }
    for (n, t) in &state.optimizer.velocity {
        put_tensor(&mut out, Kind::Velocity, n, t, state.dtype)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses bytes written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta: Meta = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamStore::default();
    let mut velocity = BTreeMap::new();
    for _ in 0..count {
        let kind = r.u8()?;
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|e| Error::Checkpoint(e.to_string()))?.to_string();
        let dtype = Dtype::from_tag(r.u8()?)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            Dtype::F32 => r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            Dtype::F64 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
        };
        let t = Tensor::new(&shape, data)?;
        match kind {
            0 => params.insert(name, t),
            1 => params.insert_buffer(name, t),
            2 => {
                velocity.insert(name, t);
            }
            k => return Err(Error::Checkpoint(format!("unknown tensor kind {k}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let tc = &meta.config.train;
    Ok(TrainState {
        optimizer: Sgd { momentum: tc.momentum, weight_decay: tc.weight_decay, velocity },
        config: meta.config,
        params,
        epoch: meta.state.epoch,
        step: meta.state.step,
        lr: meta.state.lr,
        occlusion: meta.state.occlusion,
        seed: meta.state.seed,
        best_metric: meta.state.best_metric,
        dtype: meta.state.dtype,
        history: meta.history,
        partial: meta.state.partial,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(state)?).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks its tensors against the model it describes.
pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let state = decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    state.check_params()?;
    Ok(state)
}
