//! Grayscale portable float maps (PFM, magic `Pf`).
//!
//! Header: `Pf\n<w> <h>\n-1.0\n`, then `h` rows of `w` little-endian 32-bit
//! floats stored bottom-to-top. The scale line's sign encodes endianness;
//! positive (big-endian) files are rejected. In-memory maps are top-down.
//!
//! By filename convention, `.disp.pfm` carries disparity in pixels and
//! `.depth.pfm` depth in meters.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, row 0 at the top.
    pub values: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self, PfmError> {
        if values.len() != width * height {
            return Err(PfmError::BadHeader(format!(
                "value count {} does not match {width}x{height}",
                values.len()
            )));
        }
        Ok(FloatMap {
            width,
            height,
            values,
        })
    }
}

#[derive(Debug)]
pub enum PfmError {
    BadMagic,
    BadHeader(String),
    UnsupportedEndianness(f64),
    Truncated { expected: usize, got: usize },
    Io(io::Error),
}

impl fmt::Display for PfmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PfmError::BadMagic => write!(f, "not a grayscale PFM file (bad magic)"),
            PfmError::BadHeader(msg) => write!(f, "malformed header: {msg}"),
            PfmError::UnsupportedEndianness(s) => {
                write!(f, "scale {s} declares big-endian data, which is unsupported")
            }
            PfmError::Truncated { expected, got } => {
                write!(f, "truncated payload: expected {expected} bytes, got {got}")
            }
            PfmError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for PfmError {}

impl From<io::Error> for PfmError {
    fn from(e: io::Error) -> Self {
        PfmError::Io(e)
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<FloatMap, PfmError> {
    let mut pos = 0usize;
    let mut token = || -> Result<&[u8], PfmError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PfmError::BadHeader(String::from("unexpected end of header")));
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"Pf" {
        return Err(PfmError::BadMagic);
    }
    let parse =
        |tok: &[u8]| -> Option<f64> { std::str::from_utf8(tok).ok()?.parse::<f64>().ok() };
    let w = parse(token()?).ok_or_else(|| PfmError::BadHeader(String::from("bad width")))?;
    let h = parse(token()?).ok_or_else(|| PfmError::BadHeader(String::from("bad height")))?;
    let scale =
        parse(token()?).ok_or_else(|| PfmError::BadHeader(String::from("bad scale")))?;
    if w < 1.0 || h < 1.0 || w.fract() != 0.0 || h.fract() != 0.0 {
        return Err(PfmError::BadHeader(format!("bad extents {w} x {h}")));
    }
    if scale > 0.0 {
        return Err(PfmError::UnsupportedEndianness(scale));
    }
    let (w, h) = (w as usize, h as usize);
    let payload = &bytes[pos + 1..];
    let expected = w * h * 4;
    if payload.len() != expected {
        return Err(PfmError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let mut values = vec![0.0f32; w * h];
    for file_row in 0..h {
        let mem_row = h - 1 - file_row; // bottom-to-top on disk
        for j in 0..w {
            let at = (file_row * w + j) * 4;
            let raw = [payload[at], payload[at + 1], payload[at + 2], payload[at + 3]];
            values[mem_row * w + j] = f32::from_le_bytes(raw);
        }
    }
    Ok(FloatMap {
        width: w,
        height: h,
        values,
    })
}

pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(map.width * map.height * 4);
    for file_row in 0..map.height {
        let mem_row = map.height - 1 - file_row;
        for j in 0..map.width {
            out.extend_from_slice(&map.values[mem_row * map.width + j].to_le_bytes());
        }
    }
    out
}

pub fn load_pfm(path: &Path) -> Result<FloatMap, PfmError> {
    decode_pfm(&fs::read(path)?)
}

pub fn save_pfm(map: &FloatMap, path: &Path) -> Result<(), PfmError> {
    Ok(fs::write(path, encode_pfm(map))?)
}
