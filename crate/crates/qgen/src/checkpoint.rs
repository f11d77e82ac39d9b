//! Binary parameter files.
//!
//! Layout, all integers little-endian: the magic `QGCK`, a `u32` format
//! version, then for every tensor in name order a `u64` name length, the
//! UTF-8 name, a `u64` rank, `rank` `u64` dimensions, and the values as
//! `f64`. Records continue to end of file.

use std::fs;
use std::path::{Path, PathBuf};

use qgen_core::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"QGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated {what} at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize, String> {
        let v = self.u64(what)?;
        usize::try_from(v).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| format!("implausible {what} {v}"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("not a checkpoint file (bad magic)".to_string());
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut params = ParamSet::new();
    while r.pos < bytes.len() {
        let n = r.len("name length")?;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = r.len("rank")?;
        if rank == 0 {
            return Err(format!("tensor `{name}` has rank 0"));
        }
        let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
        let raw = r.take(count.checked_mul(8).ok_or("shape overflow")?, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        if params.contains(name) {
            return Err(format!("duplicate tensor `{name}`"));
        }
        params.insert(name, t);
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    fs::write(path, encode(params)).map_err(|err| CheckpointError::Io { path: path.to_path_buf(), err })
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    let bytes = fs::read(path).map_err(|err| CheckpointError::Io { path: path.to_path_buf(), err })?;
    decode(&bytes).map_err(|message| CheckpointError::Format { path: path.to_path_buf(), message })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap());
        p.insert("a", Tensor::scalar(0.1));
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = sample();
        let bytes = encode(&p);
        let q = decode(&bytes).unwrap();
        assert_eq!(encode(&q), bytes);
        for ((n1, t1), (n2, t2)) in p.iter().zip(q.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).unwrap_err().contains("truncated"));
        assert!(decode(b"XXXX\x01\0\0\0").unwrap_err().contains("magic"));
        assert!(decode(b"QGCK\x02\0\0\0").unwrap_err().contains("version"));
        assert_eq!(decode(b"QGCK\x01\0\0\0").unwrap().len(), 0);
    }
}
