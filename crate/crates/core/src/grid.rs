//! The `OAVG` grid binary format.
//!
//! ```text
//! offset  size       field
//! 0       4          magic "OAVG"
//! 4       4          version (u32 LE, must be 1)
//! 8       4          ndim (u32 LE, 3 or 4)
//! 12      4*ndim     extents (u32 LE each)
//! ...     4*count    values (f32 LE, row-major, last dimension fastest)
//! ```
//!
//! No padding and no trailing bytes. Latents hold `f64`; values are narrowed
//! to `f32` on write, so a write/read round trip is bit-exact for latents whose
//! values are representable in `f32`, and `encode(decode(bytes)) == bytes`
//! for every well-formed file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::{Latent, Shape, DEFAULT_MAX_ELEMENTS};

pub const MAGIC: [u8; 4] = *b"OAVG";
pub const VERSION: u32 = 1;

pub fn encode(latent: &Latent) -> Result<Vec<u8>> {
    let dims = latent.shape().dims();
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * latent.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::ShapeMismatch(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (index, &v) in latent.values().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite { index });
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(slice)
            }
            None => Err(Error::Parse {
                offset: self.offset,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.offset
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Latent> {
    decode_with_cap(bytes, DEFAULT_MAX_ELEMENTS)
}

pub fn decode_with_cap(bytes: &[u8], max_elements: usize) -> Result<Latent> {
    let mut r = Reader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let ndim_offset = r.offset;
    let ndim = r.u32("ndim")?;
    if ndim != 3 && ndim != 4 {
        return Err(Error::Parse {
            offset: ndim_offset,
            message: format!("ndim {ndim} is not 3 or 4"),
        });
    }
    let extents_offset = r.offset;
    let dims = (0..ndim)
        .map(|_| r.u32("extent").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let shape = Shape::with_cap(dims, max_elements).map_err(|e| Error::Parse {
        offset: extents_offset,
        message: e.to_string(),
    })?;
    let values_offset = r.offset;
    let expected = shape.len() * 4;
    if bytes.len() - values_offset != expected {
        return Err(Error::Parse {
            offset: values_offset.saturating_add(expected.min(bytes.len() - values_offset)),
            message: format!(
                "expected {expected} value bytes for shape {shape}, found {}",
                bytes.len() - values_offset
            ),
        });
    }
    let mut values = Vec::with_capacity(shape.len());
    for chunk in r.take(expected, "values")?.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Parse {
                offset: values_offset + 4 * values.len(),
                message: format!("non-finite value {v}"),
            });
        }
        values.push(f64::from(v));
    }
    Latent::new(shape, values)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Latent> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_grid(path: impl AsRef<Path>, latent: &Latent) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(latent)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
