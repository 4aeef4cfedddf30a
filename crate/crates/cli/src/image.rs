//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::fs;
use std::path::Path;

use indexnet_core::synthdata::{is_unknown, TRIMAP_UNKNOWN};

use crate::error::{io_err, CliError, Result};

/// Interleaved 8-bit pixels; `channels` is 1 (PGM) or 3 (PPM).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self { width, height, channels: 1, data }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self { width, height, channels: 3, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<&[u8], String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(&bytes[start..pos])
        };
        let channels = match token()? {
            b"P5" => 1,
            b"P6" => 3,
            other => return Err(format!("unsupported magic {:?}", String::from_utf8_lossy(other))),
        };
        let mut number = |what: &str| -> std::result::Result<usize, String> {
            let t = token()?;
            std::str::from_utf8(t)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("bad {what} {:?}", String::from_utf8_lossy(t)))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(format!("maxval {maxval} is not 255"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let len = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(channels))
            .ok_or("image dimensions overflow")?;
        let raster = bytes.get(pos..).unwrap_or_default();
        if raster.len() != len {
            return Err(format!("expected {len} raster bytes, found {}", raster.len()));
        }
        Ok(Self { width, height, channels, data: raster.to_vec() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes).map_err(|msg| CliError::Image { path: path.into(), msg })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(io_err(path))
    }

    pub fn read_expect(path: &Path, channels: usize) -> Result<Self> {
        let img = Self::read(path)?;
        if img.channels != channels {
            let kind = if channels == 3 { "an RGB (P6)" } else { "a gray (P5)" };
            return Err(CliError::Image { path: path.into(), msg: format!("expected {kind} image") });
        }
        Ok(img)
    }
}

/// Maps any stored trimap value onto the three canonical labels.
pub fn decode_trimap(data: &[u8]) -> Vec<u8> {
    data.iter().map(|&t| if is_unknown(t) { TRIMAP_UNKNOWN } else { t }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_comments_are_skipped() {
        let img = Image::decode(b"P5\n# made by hand\n2 1\n255\n\x07\x08").unwrap();
        assert_eq!(img, Image::gray(2, 1, vec![7, 8]));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(Image::decode(b"P3\n1 1\n255\n").is_err());
        assert!(Image::decode(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(Image::decode(b"P5\n2 2\n255\n\0").is_err());
        assert!(Image::decode(b"P5\n2").is_err());
    }

    #[test]
    fn trimap_middle_values_are_unknown() {
        assert_eq!(decode_trimap(&[0, 1, 127, 128, 200, 254, 255]), vec![0, 128, 128, 128, 128, 128, 255]);
    }
}
