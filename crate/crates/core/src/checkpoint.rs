//! Binary parameter blobs and their JSON manifests.
//!
//! Blob layout (little endian):
//! `b"QBPF"`, `u32` format version, `u8` dtype width, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rows, `u32` cols and
//! `rows * cols` scalars in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"QBPF";

pub fn encode_params<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, value) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for &x in value.iter() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("truncated blob".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_params<T: Scalar>(bytes: &[u8]) -> std::result::Result<ParamStore<T>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("format_version {version}, expected {FORMAT_VERSION}"));
    }
    let width = r.take(1)?[0] as usize;
    if width != T::BYTES {
        return Err(format!("scalar width {width} bytes, expected {}", T::BYTES));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.take(rows * cols * T::BYTES)?;
        let values: Vec<T> = data.chunks_exact(T::BYTES).map(T::read_le).collect();
        let arr = Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())?;
        store.add(name, arr);
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(store)
}

/// Paths of a checkpoint: `<stem>.json` manifest next to `<stem>.bin`.
#[derive(Debug, Clone)]
pub struct CheckpointPaths {
    pub manifest: PathBuf,
    pub blob: PathBuf,
}

impl CheckpointPaths {
    /// Accepts the manifest path, the blob path or the bare stem.
    pub fn new(path: &Path) -> Self {
        let stem = match path.extension().and_then(|e| e.to_str()) {
            Some("json") | Some("bin") => path.with_extension(""),
            _ => path.to_path_buf(),
        };
        CheckpointPaths {
            manifest: stem.with_extension("json"),
            blob: stem.with_extension("bin"),
        }
    }
}

pub fn save<T: Scalar, M: Serialize>(path: &Path, store: &ParamStore<T>, manifest: &M) -> Result<CheckpointPaths> {
    let paths = CheckpointPaths::new(path);
    if let Some(dir) = paths.manifest.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&paths.blob, encode_params(store)).map_err(|e| Error::io(&paths.blob, e))?;
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&paths.manifest, json + "\n").map_err(|e| Error::io(&paths.manifest, e))?;
    Ok(paths)
}

/// Read a manifest and its blob. The manifest must carry a
/// `format_version` equal to [`FORMAT_VERSION`].
pub fn load<T: Scalar, M: DeserializeOwned>(path: &Path) -> Result<(ParamStore<T>, M)> {
    let paths = CheckpointPaths::new(path);
    let corrupt = |reason: String| Error::Checkpoint {
        path: paths.manifest.clone(),
        reason,
    };
    let text = fs::read_to_string(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("manifest is not JSON: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(corrupt(format!("format_version {v}, expected {FORMAT_VERSION}"))),
        None => return Err(corrupt("manifest lacks format_version".into())),
    }
    let manifest: M = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
    let bytes = fs::read(&paths.blob).map_err(|e| Error::io(&paths.blob, e))?;
    let store = decode_params(&bytes).map_err(|reason| Error::Checkpoint {
        path: paths.blob.clone(),
        reason,
    })?;
    Ok((store, manifest))
}
