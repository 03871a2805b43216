//! Binary PPM (P6, RGB) and PGM (P5, grayscale) with an 8-bit range.
//!
//! Files are written in canonical form — `P6\n<w> <h>\n255\n` followed by
//! the payload — so saving what was loaded reproduces canonical files
//! byte-for-byte. Values decode to `v / 255` and encode by clamping to
//! `[0, 1]` and rounding half up.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use dnm_core::stereo::Image;
use dnm_core::tensor::{idx4, Tensor};

#[derive(Debug)]
pub enum PnmError {
    BadMagic,
    BadHeader(String),
    UnsupportedMaxval(u32),
    Truncated { expected: usize, got: usize },
    BadImage(String),
    Io(io::Error),
}

impl fmt::Display for PnmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PnmError::BadMagic => write!(f, "not a binary PPM/PGM file (bad magic)"),
            PnmError::BadHeader(msg) => write!(f, "malformed header: {msg}"),
            PnmError::UnsupportedMaxval(v) => {
                write!(f, "unsupported maxval {v}, only 255 is accepted")
            }
            PnmError::Truncated { expected, got } => {
                write!(f, "truncated payload: expected {expected} bytes, got {got}")
            }
            PnmError::BadImage(msg) => write!(f, "cannot encode image: {msg}"),
            PnmError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for PnmError {}

impl From<io::Error> for PnmError {
    fn from(e: io::Error) -> Self {
        PnmError::Io(e)
    }
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Result<&'a [u8], PnmError> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::BadHeader(String::from("unexpected end of header")));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<u32, PnmError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::BadHeader(format!("expected a number, got {tok:?}")))
    }
}

/// Decode a P6 or P5 file into a `[1, c, h, w]` image with values `v/255`.
pub fn decode_image(bytes: &[u8]) -> Result<Image, PnmError> {
    let mut scan = HeaderScanner { bytes, pos: 0 };
    let magic = scan.token()?;
    let channels = match magic {
        b"P6" => 3usize,
        b"P5" => 1usize,
        _ => return Err(PnmError::BadMagic),
    };
    let w = scan.number()? as usize;
    let h = scan.number()? as usize;
    let maxval = scan.number()?;
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(PnmError::BadHeader(String::from("zero extent")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    let payload = &bytes[scan.pos + 1..];
    let expected = w * h * channels;
    if payload.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let extra = payload.len() - expected;
    if extra > 0 {
        return Err(PnmError::BadHeader(format!(
            "{extra} trailing bytes after pixel data"
        )));
    }
    let mut values = vec![0.0f64; channels * h * w];
    for i in 0..h {
        for j in 0..w {
            for c in 0..channels {
                let byte = payload[(i * w + j) * channels + c];
                values[idx4(channels, h, w, 0, c, i, j)] = byte as f64 / 255.0;
            }
        }
    }
    let tensor = Tensor::new(&[1, channels, h, w], values)
        .map_err(|e| PnmError::BadHeader(format!("{e}")))?;
    Image::new(tensor).map_err(|e| PnmError::BadHeader(format!("{e}")))
}

/// Encode to canonical P6 (3 channels) or P5 (1 channel).
pub fn encode_image(image: &Image) -> Result<Vec<u8>, PnmError> {
    let t = image.tensor();
    let (b, c, h, w) = t.dims4().map_err(|e| PnmError::BadImage(format!("{e}")))?;
    if b != 1 {
        return Err(PnmError::BadImage(format!("batch extent {b}, expected 1")));
    }
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for i in 0..h {
        for j in 0..w {
            for ci in 0..c {
                let v = t.values()[idx4(c, h, w, 0, ci, i, j)].clamp(0.0, 1.0);
                out.push((v * 255.0 + 0.5).floor() as u8);
            }
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Image, PnmError> {
    decode_image(&fs::read(path)?)
}

pub fn save_image(image: &Image, path: &Path) -> Result<(), PnmError> {
    Ok(fs::write(path, encode_image(image)?)?)
}
