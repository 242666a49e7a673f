//! "ACKP" named-tensor checkpoints with a JSON sidecar manifest.
//!
//! Blob layout (little-endian): magic `ACKP`, format version u16, entry
//! count u32, then per entry: name length u16 + UTF-8 name, rank u8,
//! extents u32 each, f32 data. The sidecar (same path + `.json`) records
//! hyperparameters and the RNG seed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::tensor::{NdTensor, Params};
use crate::{Error, Result};

pub const ACKP_MAGIC: &[u8; 4] = b"ACKP";
pub const ACKP_VERSION: u16 = 1;

const MAX_ELEMENTS: u64 = 1 << 28;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, NdTensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ACKP_MAGIC);
    buf.extend_from_slice(&ACKP_VERSION.to_le_bytes());
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::config("too many checkpoint entries"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::config(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let rank = u8::try_from(tensor.shape().len())
            .map_err(|_| Error::config(format!("tensor rank too large: {name}")))?;
        buf.push(rank);
        for &e in tensor.shape() {
            let e32 = u32::try_from(e)
                .map_err(|_| Error::config(format!("extent {e} exceeds u32 in {name}")))?;
            buf.extend_from_slice(&e32.to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Save a checkpoint plus its JSON sidecar manifest.
pub fn save_with_manifest(
    path: &Path,
    entries: &[(String, NdTensor<f32>)],
    manifest: &serde_json::Value,
) -> Result<()> {
    save_checkpoint(path, entries)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, NdTensor<f32>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn load_manifest(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(sidecar_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, NdTensor<f32>)>> {
    if bytes.len() < 4 || &bytes[..4] != ACKP_MAGIC {
        return Err(Error::format(0, "bad magic, expected ACKP"));
    }
    if bytes.len() < 10 {
        return Err(Error::format(4, "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != ACKP_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut off = 10usize;
    let mut entries = Vec::with_capacity(count);
    let take = |off: &mut usize, n: usize, what: &str| -> Result<std::ops::Range<usize>> {
        if *off + n > bytes.len() {
            return Err(Error::format(*off as u64, format!("truncated {what}")));
        }
        let r = *off..*off + n;
        *off += n;
        Ok(r)
    };
    for _ in 0..count {
        let r = take(&mut off, 2, "name length")?;
        let name_len = u16::from_le_bytes(bytes[r].try_into().unwrap()) as usize;
        let r = take(&mut off, name_len, "name")?;
        let name = std::str::from_utf8(&bytes[r.clone()])
            .map_err(|_| Error::format(r.start as u64, "name is not UTF-8"))?
            .to_string();
        let r = take(&mut off, 1, "rank")?;
        let rank = bytes[r.start] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let r = take(&mut off, 4, "extent")?;
            shape.push(u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &e| acc.checked_mul(e as u64))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::format(off as u64, format!("element overflow in {name}")))?;
        let r = take(&mut off, numel as usize * 4, "tensor data")?;
        let data: Vec<f32> = bytes[r]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = NdTensor::new(shape, data)
            .map_err(|e| Error::format(off as u64, format!("invalid tensor {name}: {e}")))?;
        entries.push((name, tensor));
    }
    if off != bytes.len() {
        return Err(Error::format(off as u64, "trailing bytes after last entry"));
    }
    Ok(entries)
}

/// Parameters as checkpoint entries, in entry order.
pub fn params_entries(params: &Params<f32>) -> Vec<(String, NdTensor<f32>)> {
    params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Restore checkpoint entries into an already-built parameter store,
/// validating names and shapes. Optimizer moments (`opt.*`) are skipped.
pub fn restore_params(params: &mut Params<f32>, entries: &[(String, NdTensor<f32>)]) -> Result<()> {
    for (name, tensor) in entries {
        if name.starts_with("opt.") {
            continue;
        }
        params.set(name, tensor.clone())?;
    }
    Ok(())
}
