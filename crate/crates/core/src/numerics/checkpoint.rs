//! `MSCK` checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! "MSCK"                      4 bytes magic
//! version: u32                currently 1
//! meta_len: u32               length of the JSON blob
//! meta: [u8; meta_len]        UTF-8 JSON (config echo + run metadata)
//! count: u32                  number of entries
//! count x {
//!     name_len: u32
//!     name: [u8; name_len]    UTF-8
//!     rank: u32
//!     extents: [u32; rank]
//!     payload: [f32; prod(extents)]
//! }
//! ```

use std::path::Path;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{MoseError, Result};
use crate::fsutil::{self, put_f32s, put_u32, Reader};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new(meta: String) -> Self {
        Checkpoint {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f32_lossy()).collect(),
        });
    }

    /// Append every parameter value, names prefixed.
    pub fn push_params<T: Scalar>(&mut self, prefix: &str, params: &ParameterSet<T>) {
        for (name, value, _) in params.iter() {
            self.push(format!("{prefix}{name}"), value);
        }
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.entry(name).map(|e| {
            Tensor::from_vec(
                &e.shape,
                e.data.iter().map(|&v| T::from_f32(v).unwrap_or_else(T::nan)).collect(),
            )
            .expect("entry payload matches its shape")
        })
    }

    /// Overwrite every parameter from `prefix`-named entries; all must be present.
    pub fn load_params<T: Scalar>(&self, prefix: &str, params: &mut ParameterSet<T>) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self
                .tensor(&key)
                .ok_or_else(|| MoseError::Data(format!("checkpoint lacks entry {key}")))?;
            params.assign(&name, t)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, len_u32(self.meta.len())?);
        out.extend_from_slice(self.meta.as_bytes());
        put_u32(&mut out, len_u32(self.entries.len())?);
        for e in &self.entries {
            let n: usize = e.shape.iter().product();
            if n != e.data.len() {
                return Err(MoseError::shape(format!("entry {} payload", e.name)));
            }
            put_u32(&mut out, len_u32(e.name.len())?);
            out.extend_from_slice(e.name.as_bytes());
            put_u32(&mut out, len_u32(e.shape.len())?);
            for &d in &e.shape {
                put_u32(&mut out, len_u32(d)?);
            }
            put_f32s(&mut out, &e.data);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(MoseError::Format {
                offset: 0,
                message: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let at = r.pos();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(MoseError::Format {
                offset: at,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let meta = utf8(&mut r, "meta")?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = utf8(&mut r, "entry name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| MoseError::Format {
                    offset: r.pos(),
                    message: "extent overflow".into(),
                })?;
            let data = r.f32_vec(n, "payload")?;
            entries.push(CheckpointEntry { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(MoseError::Format {
                offset: r.pos(),
                message: "trailing bytes".into(),
            });
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fsutil::read_file(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| MoseError::invalid(format!("length {n} exceeds u32")))
}

fn utf8(r: &mut Reader<'_>, what: &str) -> Result<String> {
    let len = r.u32(what)? as usize;
    let at = r.pos();
    let b = r.take(len, what)?;
    String::from_utf8(b.to_vec()).map_err(|_| MoseError::Format {
        offset: at,
        message: format!("{what} is not UTF-8"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(r#"{"a":1}"#.into());
        ck.push("w", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0));
        ck.push("s", &Tensor::<f32>::full(&[], 7.0));
        ck
    }

    #[test]
    fn byte_layout() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"MSCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 7);
        let expected = 4 + 4 + 4 + 7 + 4 + (4 + 1 + 4 + 8 + 24) + (4 + 1 + 4 + 4);
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn roundtrip() {
        let ck = sample();
        assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(MoseError::Format { offset: 0, .. })
        ));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::decode(&bytes), Err(MoseError::Format { .. })));
    }
}
