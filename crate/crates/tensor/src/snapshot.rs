//! On-disk tensor snapshots: one binary file per named tensor plus a
//! manifest. Each file is a little-endian header `rank: u32, dims: u32 × rank`
//! followed by the row-major `f64` data.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

pub const MANIFEST_FILE: &str = "tensors.manifest";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| TensorError::Snapshot("truncated header".into()))
    };
    let rank = word(0)? as usize;
    let shape = (0..rank).map(|d| word(4 + 4 * d).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let body = &bytes[4 + 4 * rank..];
    let n = numel(&shape);
    if body.len() != 8 * n {
        return Err(TensorError::Snapshot(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            8 * n,
            body.len()
        )));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(data, &shape)
}

/// Writes `entries` into `dir` (which must exist) with a manifest mapping
/// each name to its file, in the given order.
pub fn save_snapshot(dir: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut manifest = String::new();
    for (name, t) in entries {
        if name.is_empty() || name.contains(['\t', '\n', '/']) {
            return Err(TensorError::Snapshot(format!("invalid tensor name {name:?}")));
        }
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, encode_tensor(t)).map_err(io_err(&path))?;
        manifest.push_str(&format!("{name}\t{file}\n"));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(io_err(&path))
}

pub fn load_snapshot(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let (name, file) = line
            .split_once('\t')
            .ok_or_else(|| TensorError::Snapshot(format!("manifest line {}: expected name<TAB>file", lineno + 1)))?;
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        out.push((name.to_string(), decode_tensor(&bytes)?));
    }
    Ok(out)
}
