//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"FGPT"
//! version u8 (currently 1)
//! config  u32 length + that many bytes of model-config JSON
//! count   u32 number of tensor entries
//! entry   repeated `count` times:
//!           name   u16 length + UTF-8 bytes (e.g. "theta_ae/tlm_w1")
//!           rank   u8
//!           dims   u32 per rank
//!           offset u64 byte offset into the payload
//! payload all tensor data as f64 little-endian, in entry order
//! ```
//!
//! Entry names embed the parameter-group names, so a checkpoint records the
//! group structure as well as the values. Saving is deterministic:
//! save → load → save reproduces the file byte for byte.

use std::path::Path;

use super::{SftError, ToyVlm};

const MAGIC: &[u8; 4] = b"FGPT";
const VERSION: u8 = 1;

fn corrupt(reason: impl Into<String>) -> SftError {
    SftError::CorruptCheckpoint { reason: reason.into() }
}

/// Serialize the model (config plus every parameter tensor) to `path`.
pub fn save_checkpoint(model: &ToyVlm, path: &Path) -> Result<(), SftError> {
    let config_json = serde_json::to_string(model.config()).expect("config serializes");
    let tensors = model.named_tensors();

    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.push(VERSION);
    header.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    header.extend_from_slice(config_json.as_bytes());
    header.extend_from_slice(&(tensors.len() as u32).to_le_bytes());

    let mut payload = Vec::new();
    for t in &tensors {
        header.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        header.extend_from_slice(t.name.as_bytes());
        header.push(t.dims.len() as u8);
        for &d in &t.dims {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.extend_from_slice(&payload);
    std::fs::write(path, header)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SftError> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(format!(
                "truncated while reading {what} (need {n} bytes at offset {}, file has {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, SftError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, SftError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, SftError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SftError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Load a model saved with [`save_checkpoint`].
///
/// The file must contain exactly the tensors the embedded config implies,
/// with matching shapes; anything else (bad magic, unsupported version,
/// truncation, unknown or missing tensors, size mismatches) is a
/// [`SftError::CorruptCheckpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ToyVlm, SftError> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic (not a model checkpoint)"));
    }
    let version = cur.u8("version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }

    let config_len = cur.u32("config length")? as usize;
    let config_bytes = cur.take(config_len, "config JSON")?;
    let config_json = std::str::from_utf8(config_bytes)
        .map_err(|_| corrupt("config JSON is not UTF-8"))?;
    let config = serde_json::from_str(config_json)
        .map_err(|e| corrupt(format!("config JSON does not parse: {e}")))?;

    // Seed value is irrelevant: every tensor is overwritten below.
    let mut model =
        ToyVlm::new(config, 0).map_err(|e| corrupt(format!("embedded config invalid: {e}")))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|t| (t.name, t.dims))
        .collect();

    let count = cur.u32("entry count")? as usize;
    if count != expected.len() {
        return Err(corrupt(format!(
            "checkpoint has {count} tensors, model needs {}",
            expected.len()
        )));
    }

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| corrupt(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = cur.u8("tensor rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(corrupt(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("tensor dim")? as usize);
        }
        let offset = cur.u64("tensor offset")? as usize;
        entries.push((name, dims, offset));
    }

    let payload = &bytes[cur.pos..];
    let mut seen = std::collections::BTreeSet::new();
    for (name, dims, offset) in entries {
        if !seen.insert(name.clone()) {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
        let len: usize = dims.iter().product();
        let end = offset
            .checked_add(len * 8)
            .ok_or_else(|| corrupt(format!("tensor {name} offset overflows")))?;
        if end > payload.len() {
            return Err(corrupt(format!(
                "tensor {name} payload runs past end of file ({end} > {})",
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.apply_named_data(&name, &dims, data)?;
    }
    if seen.len() != expected.len() {
        return Err(corrupt("checkpoint is missing tensors"));
    }
    Ok(model)
}
