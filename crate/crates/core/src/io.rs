//! Little-endian binary helpers and portable float maps.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&(v as f32).to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b) as f64)
}

pub(crate) fn read_f32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn write_f32_slice<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads and checks a 4-byte magic tag.
pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], path: &Path) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "file too short for magic tag".into(),
    })?;
    if &b != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&b)
            ),
        });
    }
    Ok(())
}

pub(crate) fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Greyscale (`Pf`) or RGB (`PF`) float map.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    /// 1 or 3.
    pub channels: usize,
    /// Row-major, top row first, channel-last.
    pub data: Vec<f64>,
}

impl FloatMap {
    /// Encodes as PFM. Rows are stored top-to-bottom and the negative scale
    /// marks little-endian samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(format_err(path, "truncated PFM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(format_err(path, format!("bad PFM tag {other:?}"))),
        };
        let width: usize = fields[1]
            .parse()
            .map_err(|_| format_err(path, "bad PFM width"))?;
        let height: usize = fields[2]
            .parse()
            .map_err(|_| format_err(path, "bad PFM height"))?;
        let scale: f64 = fields[3]
            .parse()
            .map_err(|_| format_err(path, "bad PFM scale"))?;
        let n = width * height * channels;
        let body = bytes
            .get(pos..pos + n * 4)
            .ok_or_else(|| format_err(path, "truncated PFM body"))?;
        let data = body
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                if scale < 0.0 {
                    f32::from_le_bytes(b) as f64
                } else {
                    f32::from_be_bytes(b) as f64
                }
            })
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_byte_exact() {
        let map = FloatMap {
            width: 3,
            height: 2,
            channels: 3,
            data: (0..18).map(|i| i as f64 * 0.25 - 1.0).collect(),
        };
        let bytes = map.to_bytes();
        assert!(bytes.starts_with(b"PF\n3 2\n-1.0\n"));
        let back = FloatMap::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn pfm_rejects_bad_tag() {
        let err = FloatMap::from_bytes(b"P6\n1 1\n255\nabc", Path::new("x.pfm")).unwrap_err();
        assert!(err.to_string().contains("x.pfm"));
    }
}
