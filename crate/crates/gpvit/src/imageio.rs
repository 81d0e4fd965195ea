//! Binary PGM (P5) and PPM (P6) reading and writing, maxval 255 — bit-exact,
//! dependency-free image I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>, // row-major, one byte per pixel
}

pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>, // row-major, three bytes per pixel
}

impl RgbImage {
    /// Pixel values scaled to [0, 1] floats.
    pub fn to_unit_floats(&self) -> Vec<f64> {
        self.pixels.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

fn encode(magic: &str, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    assert_eq!(img.pixels.len(), img.width * img.height);
    fs::write(path, encode("P5", img.width, img.height, &img.pixels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    assert_eq!(img.pixels.len(), img.width * img.height * 3);
    fs::write(path, encode("P6", img.width, img.height, &img.pixels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Netpbm header tokenizer: whitespace-separated tokens, `#` comments to end
/// of line. Returns (width, height, offset of first pixel byte).
fn parse_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let err = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(err(&format!("not a {magic} file")));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(err("truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        fields.push(text.parse::<usize>().map_err(|_| err("bad header field"))?);
    }
    if fields[2] != 255 {
        return Err(err(&format!("unsupported maxval {} (only 255)", fields[2])));
    }
    // exactly one whitespace byte separates the header from pixel data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing pixel data"));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (width, height, offset) = parse_header(&bytes, "P5", path)?;
    let need = width * height;
    if bytes.len() < offset + need {
        return Err(Error::Config(format!("{}: truncated pixel data", path.display())));
    }
    Ok(GrayImage { width, height, pixels: bytes[offset..offset + need].to_vec() })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (width, height, offset) = parse_header(&bytes, "P6", path)?;
    let need = width * height * 3;
    if bytes.len() < offset + need {
        return Err(Error::Config(format!("{}: truncated pixel data", path.display())));
    }
    Ok(RgbImage { width, height, pixels: bytes[offset..offset + need].to_vec() })
}
