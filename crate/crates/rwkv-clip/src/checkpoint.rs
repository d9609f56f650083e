//! Binary checkpoint: magic, version, config JSON, then a name-sorted table
//! of little-endian `f64` tensors.
//!
//! ```text
//! "RWKVCLIP" | u32 version | u64 len, config JSON | u32 count
//! per tensor: u32 len, name | u8 dtype | u32 rank | u64 dims.. | data
//! ```

use std::fs;
use std::path::Path;

use rwkv_clip_core::model::{ClipModel, ModelConfig};
use rwkv_clip_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RWKVCLIP";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("tensor {name}: unknown dtype code {code}")]
    UnknownDtype { name: String, code: u8 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Serializes `tensors` (sorted by name on the way out) after `config`.
pub fn encode(config_json: &str, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut sorted: Vec<&(&str, &Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for (name, t) in sorted {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(what.to_string())),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub type Decoded = (String, Vec<(String, Tensor)>);

pub fn decode(buf: &[u8]) -> std::result::Result<Decoded, CheckpointError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let clen = r.u64("config")? as usize;
    let config = std::str::from_utf8(r.take(clen, "config")?)
        .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?
        .to_string();
    let count = r.u32("tensor table")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let label = format!("tensor #{i} header");
        let nlen = r.u32(&label)? as usize;
        let name = std::str::from_utf8(r.take(nlen, &label)?)
            .map_err(|_| CheckpointError::Malformed(format!("{label}: name is not UTF-8")))?
            .to_string();
        let code = r.take(1, &name)?[0];
        if code != DTYPE_F64 {
            return Err(CheckpointError::UnknownDtype { name, code });
        }
        let rank = r.u32(&name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&name)? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some())
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name}: dims overflow")))?;
        let raw = r.take(numel * 8, &format!("tensor {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed("trailing bytes after tensor table".into()));
    }
    Ok((config, tensors))
}

pub fn save_checkpoint(path: &Path, model: &ClipModel) -> Result<()> {
    let config = serde_json::to_string(&model.config).map_err(|e| Error::json("checkpoint config", e))?;
    let tensors: Vec<(&str, &Tensor)> = model.named_tensors().collect();
    let bytes = encode(&config, &tensors);
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ClipModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, tensors) = decode(&bytes)?;
    let config: ModelConfig =
        serde_json::from_str(&config).map_err(|e| Error::json(format!("{} config", path.display()), e))?;
    Ok(ClipModel::from_named(config, tensors)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("b".into(), Tensor::from_fn([2, 3], |i| i as f64 * 0.1 - 0.2)),
            ("a".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ("c".into(), Tensor::new([1], vec![-0.0]).unwrap()),
        ]
    }

    fn encoded() -> Vec<u8> {
        let s = sample();
        let refs: Vec<(&str, &Tensor)> = s.iter().map(|(n, t)| (n.as_str(), t)).collect();
        encode("{\"k\":1}", &refs)
    }

    #[test]
    fn roundtrip_is_bitwise_and_sorted() {
        let (cfg, t) = decode(&encoded()).unwrap();
        assert_eq!(cfg, "{\"k\":1}");
        let names: Vec<&str> = t.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["a", "b", "c"]);
        let mut orig = sample();
        orig.sort_by(|a, b| a.0.cmp(&b.0));
        for ((_, x), (_, y)) in t.iter().zip(&orig) {
            assert_eq!(x.shape(), y.shape());
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_inputs_have_distinct_errors() {
        let mut b = encoded();
        b[0] ^= 0xff;
        assert_eq!(decode(&b), Err(CheckpointError::BadMagic));

        let mut b = encoded();
        b[8] = 9;
        assert_eq!(decode(&b), Err(CheckpointError::UnsupportedVersion(9)));

        let b = encoded();
        // cut inside the data of the last tensor "c"
        let cut = &b[..b.len() - 3];
        assert_eq!(decode(cut), Err(CheckpointError::Truncated("tensor c".into())));
        assert!(matches!(decode(&b[..10]), Err(CheckpointError::Truncated(_))));
    }
}
