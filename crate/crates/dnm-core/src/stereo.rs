//! Differentiable image-domain primitives for rectified stereo pairs.
//!
//! Disparity is measured as a fraction of image width throughout the crate:
//! a value `v` at some pixel means a horizontal shift of `v * w` pixels.
//! Because the unit is relative, a disparity map produced at a coarser scale
//! needs no value rescaling — only coordinates change.
//!
//! Warp sign convention: in a rectified pair with positive disparity, a
//! scene point at column `x` of the left image appears at `x - d*w` in the
//! right image. Reconstructing the left view therefore samples the right
//! image leftward, `warp_horizontal(right, d_left, Leftward)`, and the right
//! view samples the left image rightward.

use alloc::vec::Vec;

use crate::error::Error;
use crate::tape::{Tape, TensorId, WarpDirection};
use crate::tensor::{idx4, Tensor};
use crate::Result;

/// SSIM stabilization constants for a `[0, 1]` dynamic range
/// (`0.01^2` and `0.03^2`).
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// A rectified camera image: `[b, c, h, w]` with `c` of 1 or 3 and values
/// in `[0, 1]` on load. Loss intermediates may leave the range; clamping
/// happens only at export time.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4()?;
        if c != 1 && c != 3 {
            return Err(Error::BadShape {
                op: "image",
                shape: tensor.shape().to_vec(),
                reason: "channel count must be 1 or 3",
            });
        }
        if tensor.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::NonFinite {
                context: "image values outside [0, 1]",
            });
        }
        Ok(Image(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// A disparity map: `[b, 1, h, w]`, non-negative, width-fraction units.
#[derive(Debug, Clone, PartialEq)]
pub struct Disparity(Tensor);

impl Disparity {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, c, _, _) = tensor.dims4()?;
        if c != 1 {
            return Err(Error::BadShape {
                op: "disparity",
                shape: tensor.shape().to_vec(),
                reason: "disparity maps are single-channel",
            });
        }
        if tensor.values().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite {
                context: "negative disparity",
            });
        }
        Ok(Disparity(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Convert to pixel units for a map of width `w`.
    pub fn to_pixels(&self) -> Tensor {
        let w = self.0.shape()[3];
        let values: Vec<f64> = self.0.values().iter().map(|v| v * w as f64).collect();
        Tensor::new(self.0.shape(), values).expect("same shape")
    }
}

/// Differentiable horizontal warp; see the module docs for the convention.
pub fn warp_horizontal(
    tape: &mut Tape,
    source: TensorId,
    disp: TensorId,
    direction: WarpDirection,
) -> Result<TensorId> {
    tape.warp_h(source, disp, direction)
}

/// Per-pixel, per-channel SSIM between two equally shaped images.
///
/// Local statistics use a 3x3 uniform box filter with edge-replicated
/// borders, so every output pixel is defined. Values lie in `[-1, 1]` and
/// the map is differentiable with respect to both inputs.
pub fn ssim_map(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "ssim_map",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let mu_a = tape.box3(a)?;
    let mu_b = tape.box3(b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let mu_aa = tape.box3(aa)?;
    let mu_bb = tape.box3(bb)?;
    let mu_ab = tape.box3(ab)?;

    let mu_a2 = tape.mul(mu_a, mu_a)?;
    let mu_b2 = tape.mul(mu_b, mu_b)?;
    let mu_a_mu_b = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(mu_aa, mu_a2)?;
    let var_b = tape.sub(mu_bb, mu_b2)?;
    let cov_ab = tape.sub(mu_ab, mu_a_mu_b)?;

    let n1 = tape.scale(mu_a_mu_b, 2.0)?;
    let n1 = tape.add_const(n1, SSIM_C1)?;
    let n2 = tape.scale(cov_ab, 2.0)?;
    let n2 = tape.add_const(n2, SSIM_C2)?;
    let num = tape.mul(n1, n2)?;

    let d1 = tape.add(mu_a2, mu_b2)?;
    let d1 = tape.add_const(d1, SSIM_C1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_const(d2, SSIM_C2)?;
    let den = tape.mul(d1, d2)?;

    tape.div(num, den)
}

/// Forward-difference spatial gradients `(gx, gy)`; the last column of `gx`
/// and last row of `gy` are zero.
pub fn image_gradients(tape: &mut Tape, x: TensorId) -> Result<(TensorId, TensorId)> {
    let gx = tape.grad_x(x)?;
    let gy = tape.grad_y(x)?;
    Ok((gx, gy))
}

/// Scale pyramid: level 1 is the input, each further level is a 2x2 mean
/// downsampling of the previous one.
pub fn build_pyramid(tape: &mut Tape, x: TensorId, levels: usize) -> Result<Vec<TensorId>> {
    if levels == 0 {
        return Err(Error::InvalidConfig(alloc::string::String::from(
            "pyramid needs at least one level",
        )));
    }
    let (_, _, h, w) = tape.tensor(x).dims4()?;
    let factor = 1usize << (levels - 1);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::BadShape {
            op: "build_pyramid",
            shape: tape.shape(x).to_vec(),
            reason: "extents must divide by 2^(levels-1); crop the input first",
        });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(x);
    let mut cur = x;
    for _ in 1..levels {
        cur = tape.avg_pool2(cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Mirror a `[b, c, h, w]` tensor along its width (plain values, no tape).
pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    let src = t.values();
    let mut out = alloc::vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                let row = &src[idx4(c, h, w, bi, ci, i, 0)..][..w];
                let dst = &mut out[idx4(c, h, w, bi, ci, i, 0)..][..w];
                for j in 0..w {
                    dst[j] = row[w - 1 - j];
                }
            }
        }
    }
    Tensor::new(t.shape(), out)
}
