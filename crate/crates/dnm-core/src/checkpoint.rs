//! Binary checkpoint format for dual models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"DNMC"
//! u32    format version (1)
//! u32    model kind (6 | 12)
//! u32    input_channels
//! u32    base_filters
//! u32    encoder_depth
//! u32    out_channels
//! f64    d_max_frac
//! u64    seed
//! u32    parameter tensor count
//! per tensor:
//!   u32      name length, then that many UTF-8 bytes ("L.enc1.weight", ...)
//!   u32      rank, then rank x u32 extents
//!   f64 x n  values, little-endian, n = product of extents
//! ```
//!
//! Left-network tensors precede right-network tensors; round trips are
//! bit-exact.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::net::{DualModel, ModelKind, NetworkConfig};
use crate::tensor::Tensor;
use crate::Result;

pub const MAGIC: [u8; 4] = *b"DNMC";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_model(model: &DualModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.kind.tag().to_le_bytes());
    out.extend_from_slice(&(model.cfg.input_channels as u32).to_le_bytes());
    out.extend_from_slice(&(model.cfg.base_filters as u32).to_le_bytes());
    out.extend_from_slice(&(model.cfg.encoder_depth as u32).to_le_bytes());
    out.extend_from_slice(&(model.cfg.out_channels as u32).to_le_bytes());
    out.extend_from_slice(&model.cfg.d_max_frac.to_le_bytes());
    out.extend_from_slice(&model.cfg.seed.to_le_bytes());

    let left = model.left.tensors();
    let right = model.right.tensors();
    out.extend_from_slice(&((left.len() + right.len()) as u32).to_le_bytes());
    for (prefix, tensors) in [("L", &left), ("R", &right)] {
        for (name, tensor) in tensors {
            let full = format!("{prefix}.{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &e in tensor.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<DualModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint(String::from("bad magic bytes")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let kind = ModelKind::from_tag(r.u32()?)
        .map_err(|e| Error::CorruptCheckpoint(format!("{e}")))?;
    let cfg = NetworkConfig {
        input_channels: r.u32()? as usize,
        base_filters: r.u32()? as usize,
        encoder_depth: r.u32()? as usize,
        out_channels: r.u32()? as usize,
        d_max_frac: r.f64()?,
        seed: r.u64()?,
    };
    if cfg.out_channels != kind.out_channels() {
        return Err(Error::CorruptCheckpoint(format!(
            "out_channels {} inconsistent with model kind {}",
            cfg.out_channels,
            kind.tag()
        )));
    }

    // Rebuild structure from the config, then overwrite every tensor.
    let mut model =
        DualModel::new(kind, cfg).map_err(|e| Error::CorruptCheckpoint(format!("{e}")))?;

    let count = r.u32()? as usize;
    let expected = model.left.tensors().len() + model.right.tensors().len();
    if count != expected {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {expected} parameter tensors, found {count}"
        )));
    }
    for idx in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from(
            core::str::from_utf8(r.take(name_len)?).map_err(|_| {
                Error::CorruptCheckpoint(format!("tensor {idx}: invalid name bytes"))
            })?,
        );
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }
        let tensor = Tensor::new(&shape, values)
            .map_err(|e| Error::CorruptCheckpoint(format!("tensor {name}: {e}")))?;

        let (side, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unprefixed tensor name {name}")))?;
        let params = match side {
            "L" => &mut model.left,
            "R" => &mut model.right,
            _ => {
                return Err(Error::CorruptCheckpoint(format!(
                    "unknown network prefix in {name}"
                )))
            }
        };
        let mut found = false;
        for (have, slot) in params.tensors_mut() {
            if have == rest {
                if slot.shape() != tensor.shape() {
                    return Err(Error::CorruptCheckpoint(format!(
                        "tensor {name}: shape {:?} does not match model {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = tensor;
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name} does not exist in this architecture"
            )));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}
