//! Parameter archives: a manifest with the model configuration, then named,
//! shape-tagged arrays of little-endian `f32`.
//!
//! Layout: magic `CFLOWCK1`, `u32` manifest length, manifest (UTF-8
//! `key = value` lines), `u32` entry count, then per entry `u32` name length,
//! name, `u32` rank, `u64` dims, and the values.

use std::path::Path;

use cascade_tensor::{Real, Tensor};

use crate::config::{ModelConfig, RunConfig};
use crate::error::{io_err, FlowError, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"CFLOWCK1";

fn manifest(cfg: &ModelConfig) -> String {
    RunConfig { model: cfg.clone(), ..RunConfig::default() }.model_text()
}

pub fn save<T: Real>(path: &Path, cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let text = manifest(cfg);
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated archive")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap())).map_err(|e| e.to_string())
    }

    fn string(&mut self, n: usize) -> std::result::Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

fn parse<T: Real>(bytes: &[u8]) -> std::result::Result<(ModelConfig, ParamStore<T>), String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let n = c.u32()?;
    let text = c.string(n)?;
    let cfg = RunConfig::from_text(&text).map_err(|e| format!("manifest: {e}"))?.model;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = c.u32()?;
        let name = c.string(n)?;
        let rank = c.u32()?;
        if rank > 8 {
            return Err(format!("{name}: implausible rank {rank}"));
        }
        let shape = (0..rank).map(|_| c.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dimension overflow")?;
        let raw = c.take(len.checked_mul(4).ok_or("dimension overflow")?)?;
        let data = raw.chunks_exact(4).map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect();
        store.insert(name, Tensor::from_vec(&shape, data));
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes after the last entry".into());
    }
    Ok((cfg, store))
}

/// Loads an archive. With `expected`, the stored configuration must match it.
pub fn load<T: Real>(path: &Path, expected: Option<&ModelConfig>) -> Result<(ModelConfig, ParamStore<T>)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (cfg, store) = parse(&bytes).map_err(|reason| FlowError::Format { path: path.to_path_buf(), reason })?;
    if let Some(want) = expected {
        if manifest(want) != manifest(&cfg) {
            let diff: Vec<String> = manifest(want)
                .lines()
                .zip(manifest(&cfg).lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("requested `{a}`, stored `{b}`"))
                .collect();
            return Err(FlowError::CheckpointMismatch(diff.join("; ")));
        }
    }
    Ok((cfg, store))
}
