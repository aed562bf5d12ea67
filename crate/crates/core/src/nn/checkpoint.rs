//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GMSF"                      magic
//! u32                         format version
//! u32 + bytes                 metadata length, UTF-8 JSON metadata
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               name length, UTF-8 name
//!   u8                        dtype tag (0 = f32, 1 = f64)
//!   u32                       rank
//!   u32 * rank                dims
//!   payload                   little-endian elements, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Bounds, Codec};
use crate::nn::{Architecture, DenoiserModel, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GMSF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected \"GMSF\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint format version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated in {section}")]
    Truncated { section: String },
    #[error("invalid checkpoint metadata: {0}")]
    Metadata(String),
    #[error("invalid tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error("trailing bytes after the tensor table")]
    TrailingBytes,
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// JSON metadata stored in the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    /// Diffusion step count `T` the model was trained for.
    pub steps: usize,
    pub beta0: f64,
    pub beta_t: f64,
    /// Capacity values of the class table rows, in row order.
    pub classes: Vec<u32>,
    pub codec: Codec,
    pub bounds: Bounds,
    #[serde(default)]
    pub human_types: usize,
    #[serde(default)]
    pub notes: serde_json::Value,
}

pub fn encode<T: Scalar>(model: &DenoiserModel<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let store = model.params();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE_TAG);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            match T::DTYPE_TAG {
                0 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                section: section.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Raw contents of a checkpoint: metadata and the named tensor table.
pub type Decoded = (CheckpointMeta, Vec<(String, Tensor<f64>)>, Vec<u8>);

/// Parse a checkpoint. Tensors come back widened to `f64` along with their dtype tags.
pub fn decode(bytes: &[u8]) -> Result<Decoded, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    let mut tags = Vec::with_capacity(count.min(4096));
    for k in 0..count {
        let section = format!("tensor table entry {k}");
        let name_len = r.u32(&section)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &section)?)
            .map_err(|_| CheckpointError::Tensor {
                name: format!("#{k}"),
                message: "name is not UTF-8".into(),
            })?
            .to_string();
        let section = format!("tensor {name}");
        let tag = r.take(1, &section)?[0];
        let width = match tag {
            0 => 4,
            1 => 8,
            other => {
                return Err(CheckpointError::Tensor {
                    name,
                    message: format!("unknown dtype tag {other}"),
                })
            }
        };
        let rank = r.u32(&section)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Tensor {
                name,
                message: format!("rank {rank} too large"),
            });
        }
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u32(&section).map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let n: usize = dims.iter().product();
        let payload = r.take(
            n.checked_mul(width).ok_or_else(|| CheckpointError::Truncated {
                section: section.clone(),
            })?,
            &format!("{section} payload"),
        )?;
        let data: Vec<f64> = if width == 4 {
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        };
        tensors.push((name, Tensor::from_vec(&dims, data)));
        tags.push(tag);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok((meta, tensors, tags))
}

/// Rebuild a model from checkpoint bytes.
pub fn load_bytes<T: Scalar>(bytes: &[u8]) -> Result<(DenoiserModel<T>, CheckpointMeta), CheckpointError> {
    let (meta, tensors, _) = decode(bytes)?;
    let mut model =
        DenoiserModel::<T>::new(meta.architecture.clone(), 0).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let cast = tensors.into_iter().map(|(n, t)| (n, t.cast::<T>())).collect();
    model
        .params_mut()
        .load_named(cast)
        .map_err(|e| CheckpointError::Tensor {
            name: "table".into(),
            message: e.to_string(),
        })?;
    Ok((model, meta))
}

pub fn save<T: Scalar>(path: &Path, model: &DenoiserModel<T>, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    fs::write(path, encode(model, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<(DenoiserModel<T>, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::CapacityClass;

    fn meta(arch: Architecture) -> CheckpointMeta {
        CheckpointMeta {
            architecture: arch,
            steps: 100,
            beta0: 1e-4,
            beta_t: 0.02,
            classes: CapacityClass::all().map(|c| c.value()).collect(),
            codec: Codec::default(),
            bounds: Bounds::default(),
            human_types: 2,
            notes: serde_json::Value::Null,
        }
    }

    fn small() -> Architecture {
        Architecture {
            grid_size: 8,
            widths: vec![2, 3, 4],
            embed_dim: 4,
            num_classes: 11,
        }
    }

    #[test]
    fn bit_exact_round_trip() {
        let model = DenoiserModel::<f32>::new(small(), 4).unwrap();
        let bytes = encode(&model, &meta(small()));
        let (back, m) = load_bytes::<f32>(&bytes).unwrap();
        assert_eq!(m, meta(small()));
        assert_eq!(encode(&back, &m), bytes);
        for ((n1, a), (n2, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn f64_payloads_are_tagged() {
        let model = DenoiserModel::<f64>::new(small(), 4).unwrap();
        let bytes = encode(&model, &meta(small()));
        let (_, tensors, tags) = decode(&bytes).unwrap();
        assert!(tags.iter().all(|&t| t == 1));
        assert_eq!(tensors.len(), model.params().len());
        let (back, _) = load_bytes::<f64>(&bytes).unwrap();
        assert_eq!(encode(&back, &meta(small())), bytes);
    }

    #[test]
    fn corruption_is_reported_by_section() {
        let model = DenoiserModel::<f32>::new(small(), 4).unwrap();
        let bytes = encode(&model, &meta(small()));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode(&bad),
            Err(CheckpointError::UnsupportedVersion { found: 9 })
        ));

        for cut in [2, 6, 10, 40, bytes.len() - 3] {
            match decode(&bytes[..cut]) {
                Err(CheckpointError::Truncated { section }) => assert!(!section.is_empty()),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(CheckpointError::TrailingBytes)));
    }
}
