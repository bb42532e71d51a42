//! Binary netpbm IO: P6 (RGB) and P5 (grayscale), maxval 255.
//!
//! Headers are the strict single-whitespace-delimited form: magic, width,
//! height, maxval, one whitespace byte, then raw pixel data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded file. `data_offset` is the file position of the pixel section,
/// kept so label decoding can report absolute byte offsets.
#[derive(Debug)]
pub enum Pnm {
    /// Interleaved RGB, 3 bytes per pixel.
    Rgb {
        width: usize,
        height: usize,
        data: Vec<u8>,
        #[allow(dead_code)]
        data_offset: usize,
    },
    /// One byte per pixel.
    Gray {
        width: usize,
        height: usize,
        data: Vec<u8>,
        data_offset: usize,
    },
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_ascii_uint(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(path, format!("malformed header: missing {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, format!("malformed header: bad {what}")))
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    if bytes.len() < 2 {
        return Err(format_err(path, "file too short for a netpbm header"));
    }
    let magic = &bytes[..2];
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(format_err(
                path,
                format!("wrong magic {:?}, expected P5 or P6", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut pos = 2;
    let width = parse_ascii_uint(&bytes, &mut pos, path, "width")?;
    let height = parse_ascii_uint(&bytes, &mut pos, path, "height")?;
    let maxval = parse_ascii_uint(&bytes, &mut pos, path, "maxval")?;
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "malformed header: missing whitespace before data"));
    }
    pos += 1;
    let expect = width * height * channels;
    if bytes.len() - pos < expect {
        return Err(format_err(
            path,
            format!("truncated data: expected {expect} bytes, found {}", bytes.len() - pos),
        ));
    }
    let data = bytes[pos..pos + expect].to_vec();
    Ok(if channels == 3 {
        Pnm::Rgb {
            width,
            height,
            data,
            data_offset: pos,
        }
    } else {
        Pnm::Gray {
            width,
            height,
            data,
            data_offset: pos,
        }
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io_at(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    write_atomic(path, &bytes)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    debug_assert_eq!(gray.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(gray);
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 7) as u8).collect();
        write_ppm(&path, 3, 2, &rgb).unwrap();
        match read_pnm(&path).unwrap() {
            Pnm::Rgb { width, height, data, .. } => {
                assert_eq!((width, height), (3, 2));
                assert_eq!(data, rgb);
            }
            _ => panic!("expected RGB"),
        }
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P3\n2 2\n255\n0000").unwrap();
        let err = read_pnm(&path).unwrap_err();
        assert!(err.to_string().contains("wrong magic"));

        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        let err = read_pnm(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));

        std::fs::write(&path, b"P5\n2 2\n254\n0000").unwrap();
        let err = read_pnm(&path).unwrap_err();
        assert!(err.to_string().contains("maxval"));
    }
}
