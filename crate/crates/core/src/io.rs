//! Binary netpbm images and a small little-endian float tensor container.
//!
//! Tensor layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "WFTENSOR"
//! dtype     u32       1 = f32
//! rank      u32
//! dims      rank x u64
//! meta_len  u64       0 when absent
//! meta      meta_len bytes of UTF-8 JSON
//! payload   product(dims) x f32
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, Image};

pub const TENSOR_MAGIC: &[u8; 8] = b"WFTENSOR";
pub const DTYPE_F32: u32 = 1;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Quantizes `[0, 1]` to a byte, rounding half up.
#[inline]
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes an image as binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderCursor<'_> {
    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedHeader {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | b'\x0b' | b'\x0c' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.malformed(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.malformed(format!("{what} out of range")))
    }
}

/// Decodes a binary PGM/PPM buffer. `path` only labels diagnostics.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut cur = HeaderCursor {
        bytes,
        pos: 0,
        path,
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.malformed("missing P5/P6 magic")),
    };
    cur.pos = 2;
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.malformed("zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval {
            path: path.to_path_buf(),
            maxval,
        });
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.malformed("missing whitespace after maxval")),
    }
    let expected = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(cur.malformed(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(height, width, channels, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_pnm(&read_bytes(path)?, path)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pnm(img))
}

/// In-memory form of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
    /// Raw JSON text, kept verbatim.
    pub metadata: Option<String>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, values: Vec<f32>, metadata: Option<String>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::shape(
                format!("{n} values for dims {dims:?}"),
                values.len().to_string(),
            ));
        }
        Ok(TensorFile {
            dims,
            values,
            metadata,
        })
    }

    /// Parses the metadata blob, if any.
    pub fn metadata_json(&self) -> Result<Option<serde_json::Value>> {
        self.metadata
            .as_deref()
            .map(serde_json::from_str)
            .transpose()
            .map_err(Error::from)
    }
}

pub fn encode_tensor(t: &TensorFile) -> Vec<u8> {
    let meta = t.metadata.as_deref().unwrap_or("").as_bytes();
    let mut out = Vec::with_capacity(32 + 8 * t.dims.len() + meta.len() + 4 * t.values.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta);
    for v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    let bad = |reason: String| Error::BadTensor {
        path: path.to_path_buf(),
        reason,
    };
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("file ends inside {what}")))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8, "magic")? != TENSOR_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let dtype = u32::from_le_bytes(take(4, "dtype")?.try_into().unwrap());
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {dtype}")));
    }
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
    let mut dims = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(8, "dims")?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| bad(format!("dimension {d} too large")))?);
    }
    let meta_len = u64::from_le_bytes(take(8, "metadata length")?.try_into().unwrap());
    let meta_len = usize::try_from(meta_len).map_err(|_| bad("metadata too large".into()))?;
    let meta = take(meta_len, "metadata")?;
    let metadata = if meta_len == 0 {
        None
    } else {
        let text = std::str::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8".into()))?;
        serde_json::from_str::<serde_json::Value>(text)
            .map_err(|e| bad(format!("metadata is not JSON: {e}")))?;
        Some(text.to_string())
    };
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflows".into()))?;
    let payload = &bytes[pos..];
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| bad("payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(bad(format!(
            "payload length {} does not match dims {dims:?} ({expected} bytes)",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(TensorFile {
        dims,
        values,
        metadata,
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    decode_tensor(&read_bytes(path)?, path)
}

pub fn write_tensor(t: &TensorFile, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensor(t))
}

/// Stores a field as a `[2, H, W]` tensor (dy plane then dx plane).
pub fn field_to_tensor(field: &DisplacementField) -> TensorFile {
    let values = field
        .dy()
        .iter()
        .chain(field.dx())
        .map(|&v| v as f32)
        .collect();
    TensorFile {
        dims: vec![2, field.height(), field.width()],
        values,
        metadata: Some(r#"{"kind":"displacement_field","order":["dy","dx"]}"#.to_string()),
    }
}

pub fn tensor_to_field(t: &TensorFile) -> Result<DisplacementField> {
    let &[2, h, w] = t.dims.as_slice() else {
        return Err(Error::shape("[2, H, W]", format!("{:?}", t.dims)));
    };
    let n = h * w;
    let dy = t.values[..n].iter().map(|&v| f64::from(v)).collect();
    let dx = t.values[n..].iter().map(|&v| f64::from(v)).collect();
    DisplacementField::new(h, w, dy, dx)
}

pub fn write_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    write_tensor(&field_to_tensor(field), path)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    tensor_to_field(&read_tensor(path)?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path.as_ref(), text.as_bytes())
}
