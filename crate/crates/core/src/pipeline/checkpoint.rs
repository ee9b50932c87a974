//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SATP"            magic
//! u32               format version
//! u32 + bytes       metadata as JSON
//! u32               tensor count
//! per tensor:       u32 name length, name bytes, u32 rank, u64 dims, f64 values
//! 32 bytes          SHA-256 of everything above
//! ```
//!
//! Buffers (batch-norm statistics) are stored next to parameters under a
//! `buffers/` name prefix.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{BufferSet, ParameterSet, Tensor};

pub const MAGIC: &[u8; 4] = b"SATP";
pub const VERSION: u32 = 1;
const BUFFER_PREFIX: &str = "buffers/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub stage: String,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParameterSet,
    pub buffers: BufferSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        let buffers: Vec<(String, &Tensor)> = self
            .buffers
            .iter()
            .map(|(k, t)| (format!("{BUFFER_PREFIX}{k}"), t))
            .collect();
        let params = self.params.iter().map(|(k, t)| (k.clone(), t));
        let all: Vec<(String, &Tensor)> = params.chain(buffers).collect();
        put_u32(&mut out, all.len());
        for (name, t) in all {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Checkpoint> {
        let bad = |message: String| Error::Checkpoint {
            path: source.to_string(),
            message,
        };
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("content digest mismatch (file corrupted or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let truncated = || bad("truncated body".into());
        let meta_len = r.u32().ok_or_else(truncated)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len).ok_or_else(truncated)?)
            .map_err(|e| bad(format!("metadata: {e}")))?;
        let count = r.u32().ok_or_else(truncated)?;
        let mut params = ParameterSet::new();
        let mut buffers = BufferSet::new();
        for _ in 0..count {
            let len = r.u32().ok_or_else(truncated)? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
                .map_err(|_| bad("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32().ok_or_else(truncated)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(truncated)?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.f64())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(truncated)?;
            let t = Tensor::new(shape, data)?;
            match name.strip_prefix(BUFFER_PREFIX) {
                Some(b) => buffers.insert(b, t),
                None => params.insert(name, t)?,
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensor directory".into()));
        }
        Ok(Checkpoint { meta, params, buffers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; with `expected_digest` set, a checkpoint written
    /// under a different configuration is rejected.
    pub fn load(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<Checkpoint> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Checkpoint::from_bytes(&bytes, &path.display().to_string())?;
        if let Some(want) = expected_digest {
            if ck.meta.config_digest != want {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    message: format!(
                        "written for configuration {} but the current configuration is {want}",
                        ck.meta.config_digest
                    ),
                });
            }
        }
        Ok(ck)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParameterSet::new();
        params
            .insert(
                "a/w",
                Tensor::new(vec![2, 3], vec![1.0, -0.0, 1e-300, f64::MAX, 0.1, -7.5]).unwrap(),
            )
            .unwrap();
        params
            .insert("a/b", Tensor::new(vec![3], vec![0.3, 0.2, 0.1]).unwrap())
            .unwrap();
        let mut buffers = BufferSet::new();
        buffers.insert("a/bn/mean", Tensor::new(vec![2], vec![0.5, 1.5]).unwrap());
        Checkpoint {
            meta: CheckpointMeta {
                config_digest: "abc".into(),
                stage: "stage1".into(),
                seed: 7,
                epoch: 3,
            },
            params,
            buffers,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SATP");
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.params.digest(), ck.params.digest());
        assert_eq!(back.buffers.digest(), ck.buffers.digest());
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        assert!(Checkpoint::from_bytes(&bytes[..n - 1], "mem").is_err());
        bytes[40] ^= 1;
        let err = Checkpoint::from_bytes(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
        assert!(Checkpoint::from_bytes(b"NOPE0000", "mem").is_err());
    }

    #[test]
    fn digest_mismatch_is_rejected_unless_overridden() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load(&path, Some("abc")).is_ok());
        assert!(Checkpoint::load(&path, None).is_ok());
        let err = Checkpoint::load(&path, Some("other")).unwrap_err();
        assert!(err.is_data_error());
        let missing = Checkpoint::load(dir.path().join("none.ckpt"), None).unwrap_err();
        assert!(matches!(missing, Error::MissingFile(_)));
    }
}
