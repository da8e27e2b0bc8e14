//! Checkpoint wire format, little-endian throughout:
//!
//! ```text
//! magic "HSCJN1"
//! u32 header length, header JSON (version, model config, step,
//!     optimizer step, RNG state)
//! u32 parameter count, then per parameter:
//!     u32 name length, name bytes, u32 rank, u32 dims..., f32 data
//! u32 moment count, same record format ("adam_m.*" / "adam_v.*")
//! ```
//!
//! Values are stored as raw 32-bit floats; an f32 training run
//! round-trips bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Array, Real};

pub const MAGIC: &[u8; 6] = b"HSCJN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// u128 as a decimal string (JSON numbers cannot carry it).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed is not 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word_pos {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    /// Optimizer updates completed.
    pub step: u64,
    pub adam_t: u64,
    pub rng: RngState,
}

fn push_record<R: Real>(buf: &mut Vec<u8>, name: &str, arr: &Array<R>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
    for &d in &arr.shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &arr.data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn save_checkpoint<R: Real>(
    path: &Path,
    config: &ModelConfig,
    step: u64,
    rng: &ChaCha8Rng,
    params: &ModelParams<R>,
    adam: &AdamState<R>,
) -> Result<()> {
    let header = CheckpointHeader {
        version: VERSION,
        config: config.clone(),
        step,
        adam_t: adam.t,
        rng: RngState::capture(rng),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);

    let named = params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, arr) in &named {
        push_record(&mut buf, name, arr);
    }

    buf.extend_from_slice(&((named.len() * 2) as u32).to_le_bytes());
    for (i, (name, _)) in named.iter().enumerate() {
        push_record(&mut buf, &format!("adam_m.{name}"), &adam.m[i]);
        push_record(&mut buf, &format!("adam_v.{name}"), &adam.v[i]);
    }

    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn record<R: Real>(&mut self) -> Result<(String, Array<R>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 4 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data: Vec<R> = raw
            .chunks_exact(4)
            .map(|b| R::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        Ok((name, Array::new(shape, data)))
    }
}

pub fn load_checkpoint<R: Real>(
    path: &Path,
) -> Result<(CheckpointHeader, ModelParams<R>, AdamState<R>)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &data, pos: 0 };
    let magic = cur.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let header_len = cur.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (this build reads {})",
            path.display(),
            header.version,
            VERSION
        )));
    }

    let n_params = cur.u32()? as usize;
    let mut records: HashMap<String, Array<R>> = HashMap::with_capacity(n_params);
    for _ in 0..n_params {
        let (name, arr) = cur.record()?;
        if records.insert(name.clone(), arr).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    let mut params = ModelParams::<R>::zeros(&header.config);
    for (name, slot) in params.named_mut() {
        let arr = records
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if arr.shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match config shape {:?}",
                arr.shape, slot.shape
            )));
        }
        *slot = arr;
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }

    let n_moments = cur.u32()? as usize;
    let mut moments: HashMap<String, Array<R>> = HashMap::with_capacity(n_moments);
    for _ in 0..n_moments {
        let (name, arr) = cur.record()?;
        moments.insert(name, arr);
    }
    let mut adam = AdamState::new(&params);
    adam.t = header.adam_t;
    for (i, (name, arr)) in params.named().iter().enumerate() {
        let m = moments
            .remove(&format!("adam_m.{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing moment adam_m.{name}")))?;
        let v = moments
            .remove(&format!("adam_v.{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing moment adam_v.{name}")))?;
        if m.shape != arr.shape || v.shape != arr.shape {
            return Err(Error::Checkpoint(format!("{name}: moment shape mismatch")));
        }
        adam.m[i] = m;
        adam.v[i] = v;
    }
    if cur.pos != data.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            data.len() - cur.pos
        )));
    }
    Ok((header, params, adam))
}
