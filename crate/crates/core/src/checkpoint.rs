//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SHKLCKPT"
//! version  u32
//! meta_len u64, then meta_len bytes of JSON metadata
//! count    u64, then per tensor:
//!   name_len u32, name bytes,
//!   dtype u8, ndim u8, dims (u64 each),
//!   raw little-endian values
//! ```
//!
//! The tensor table holds parameters (by name), batchnorm buffers
//! (`buffer:<name>`) and momentum buffers (`velocity:<name>`). Loading
//! stages the whole file before touching any live state, so a truncated or
//! corrupt file never applies partially. Saving writes to a sibling
//! temporary file and renames it into place.

use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::models::{ModelSpec, Network};
use crate::params::ParamId;
use crate::rng::{RngState, RngStream};
use crate::tensor::{Dtype, Element, Tensor};
use crate::train::TrainState;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SHKLCKPT";
const VERSION: u32 = 1;

/// Checkpoint metadata: everything resume needs besides the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub epoch: usize,
    pub dtype: String,
    pub rng_seed: u64,
    /// ChaCha word position, serialized as decimal (u128 exceeds JSON's
    /// integer range).
    pub rng_word_pos: String,
    pub rng_draws: u64,
    pub stats: DatasetStats,
}

impl CheckpointMeta {
    pub fn dtype(&self) -> Result<Dtype> {
        match self.dtype.as_str() {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown checkpoint dtype {other}"))),
        }
    }

    pub fn rng_state(&self) -> Result<RngState> {
        let word_pos: u128 = self
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Format("bad rng word position".into()))?;
        Ok(RngState {
            seed: self.rng_seed,
            word_pos,
            draws: self.rng_draws,
        })
    }
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::F32 => "f32",
        Dtype::F64 => "f64",
    }
}

fn push_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        v.to_le_bytes(out);
    }
}

/// Save model parameters, buffers, optimizer state and the coefficient
/// stream position.
pub fn save_checkpoint<T: Element>(
    path: &Path,
    net: &Network<T>,
    state: &TrainState<T>,
    stats: &DatasetStats,
) -> Result<()> {
    let rng = state.coeff_rng.state();
    let meta = CheckpointMeta {
        model: net.spec,
        epoch: state.next_epoch,
        dtype: dtype_name(T::DTYPE).to_string(),
        rng_seed: rng.seed,
        rng_word_pos: rng.word_pos.to_string(),
        rng_draws: rng.draws,
        stats: *stats,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Format(format!("metadata encode: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);

    let count = net.params.len() * 2 + net.params.iter_buffers().count();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (_, p) in net.params.iter() {
        push_tensor(&mut out, &p.name, &p.value);
    }
    for (name, t) in net.params.iter_buffers() {
        push_tensor(&mut out, &format!("buffer:{name}"), t);
    }
    for ((_, p), v) in net.params.iter().zip(state.sgd.velocity()) {
        push_tensor(&mut out, &format!("velocity:{}", p.name), v);
    }

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read only the metadata block (for dtype dispatch before a typed load).
pub fn peek_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Format(format!("metadata decode: {e}")))?;
    Ok(meta)
}

/// Load a checkpoint, rebuilding the network and optimizer state. The
/// element type must match the stored dtype.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(Network<T>, TrainState<T>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Format(format!("metadata decode: {e}")))?;
    if meta.dtype()? != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint dtype {} does not match requested {}",
            meta.dtype,
            dtype_name(T::DTYPE)
        )));
    }

    // Stage the whole tensor table before touching any state.
    let count = r.u64()? as usize;
    let mut table: HashMap<String, Tensor<T>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let dtype = Dtype::from_code(r.u8()?)?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!("tensor {name} has mixed dtype")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = T::DTYPE.size_bytes();
        let raw = r.take(numel * width)?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::from_le_slice).collect();
        table.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor table".into()));
    }

    // Rebuild the network layout, then overwrite every value from the table.
    let mut net: Network<T> = Network::build(meta.model, 0)?;
    let mut velocity = Vec::with_capacity(net.params.len());
    for i in 0..net.params.len() {
        let pid = ParamId(i);
        let name = net.params.param(pid).name.clone();
        let stored = table
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing parameter {name}")))?;
        if stored.shape() != net.params.value(pid).shape() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {:?} vs model {:?}",
                stored.shape(),
                net.params.value(pid).shape()
            )));
        }
        *net.params.value_mut(pid) = stored.clone();
        let vel = table
            .get(&format!("velocity:{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint missing velocity for {name}")))?;
        velocity.push(vel.clone());
    }
    let buffer_names: Vec<String> = net
        .params
        .iter_buffers()
        .map(|(n, _)| n.to_string())
        .collect();
    for name in buffer_names {
        let stored = table
            .get(&format!("buffer:{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint missing buffer {name}")))?;
        let bid = net
            .params
            .buffer_by_name(&name)
            .expect("buffer exists in freshly built model");
        *net.params.buffer_mut(bid) = stored.clone();
    }

    let mut state = TrainState::new(&net, 0);
    state.coeff_rng = RngStream::restore(meta.rng_state()?);
    state.next_epoch = meta.epoch;
    let sgd_vel = state.sgd.velocity_mut();
    for (slot, v) in sgd_vel.iter_mut().zip(velocity) {
        *slot = v;
    }
    Ok((net, state, meta))
}
