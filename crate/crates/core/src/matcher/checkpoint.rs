//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `XMATCH\0\0`, u32 version, u32 config
//! length, config JSON, u32 tensor count, then per tensor: u16 name length,
//! name, u8 rank, u32 dims, f32 values. The config is also written as a
//! JSON sidecar next to the checkpoint.

use std::fs;
use std::path::Path;

use super::model::MatcherModel;
use super::MatcherConfig;
use crate::error::{Error, Result};
use crate::volume::{sidecar_path, write_file};

const MAGIC: &[u8; 8] = b"XMATCH\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &MatcherModel, path: &Path) -> Result<()> {
    let config = serde_json::to_string_pretty(&model.config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let tensors = model.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, &out)?;
    write_file(&sidecar_path(path), config.as_bytes())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: "truncated file".into(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<MatcherModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let config: MatcherConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::json(format!("{} config", path.display()), e))?;
    let mut model = MatcherModel::new(&config)?;
    let expected: Vec<(String, Vec<usize>)> =
        model.tensors().into_iter().map(|t| (t.0, t.1)).collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(format_err(format!("{count} tensors, expected {}", expected.len())));
    }
    let mut slots = model.tensors_mut();
    for ((name, shape), slot) in expected.iter().zip(slots.iter_mut()) {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| format_err("non-UTF-8 name"))?;
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if got != name || &dims != shape {
            return Err(format_err(format!(
                "tensor {got} {dims:?} does not match {name} {shape:?}"
            )));
        }
        for (i, c) in r.take(slot.len() * 4)?.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "checkpoint", index: i });
            }
            slot[i] = v;
        }
    }
    if r.at != bytes.len() {
        return Err(format_err("trailing bytes"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let cfg = MatcherConfig {
            embed_dim: 8,
            heads: 2,
            head_dim: 4,
            patch_size: 2,
            ..Default::default()
        };
        let mut m = MatcherModel::new(&cfg).unwrap();
        let flat: Vec<f64> = m.flatten().iter().map(|&v| v as f32 as f64).collect();
        m.assign_flat(&flat);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
        assert!(sidecar_path(&p).exists());

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
