//! Synthetic rectified-stereo scenes with ground-truth disparity.
//!
//! The generator builds a textured left image and derives the right image by
//! sampling the left one rightward through the ground-truth map — exactly
//! the warp used during training, so `warp(left, gt, Rightward)` reproduces
//! the right view bit-for-bit, with dis-occluded border pixels filled by
//! clamped sampling. Ground truth is attached in width-fraction units.

use alloc::vec::Vec;

use crate::error::Error;
use crate::eval::CameraRig;
use crate::net::DEFAULT_D_MAX_FRAC;
use crate::rng::Rng;
use crate::stereo::{Disparity, Image};
use crate::tape::{Tape, WarpDirection};
use crate::tensor::Tensor;
use crate::Result;

/// Ground-truth disparity layout, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisparityProfile {
    /// One fronto-parallel plane.
    Constant { px: f64 },
    /// Two planes split at mid-width.
    TwoPlane { left_px: f64, right_px: f64 },
    /// Disparity ramps linearly across columns.
    Slanted { start_px: f64, end_px: f64 },
}

impl DisparityProfile {
    fn max_px(&self) -> f64 {
        match *self {
            DisparityProfile::Constant { px } => px,
            DisparityProfile::TwoPlane { left_px, right_px } => left_px.max(right_px),
            DisparityProfile::Slanted { start_px, end_px } => start_px.max(end_px),
        }
    }

    fn at(&self, j: usize, w: usize) -> f64 {
        match *self {
            DisparityProfile::Constant { px } => px,
            DisparityProfile::TwoPlane { left_px, right_px } => {
                if j < w / 2 {
                    left_px
                } else {
                    right_px
                }
            }
            DisparityProfile::Slanted { start_px, end_px } => {
                start_px + (end_px - start_px) * j as f64 / (w as f64 - 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    RandomNoise,
    SmoothedNoise,
    Checkers,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub profile: DisparityProfile,
    pub texture: TextureKind,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            profile: DisparityProfile::Constant { px: 4.0 },
            texture: TextureKind::SmoothedNoise,
            width: 128,
            height: 64,
            channels: 3,
            seed: 0,
        }
    }
}

/// One training or evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: Image,
    pub right: Image,
    pub gt_disp: Option<Disparity>,
    pub rig: Option<CameraRig>,
}

/// Octaves of the smoothed-noise texture: `(lattice cell in pixels,
/// weight)`. Octaves coarser than the worst plausible disparity error are
/// what give the photometric loss a wide basin — without them no pyramid
/// scale sees a useful gradient far from the optimum.
const NOISE_OCTAVES: [(usize, f64); 5] =
    [(32, 0.30), (16, 0.25), (8, 0.20), (4, 0.15), (2, 0.10)];

/// Smoothstep-interpolated lattice noise ("value noise") for one plane.
/// The cubic interpolant keeps local curvature, which windowed SSIM needs
/// to notice sub-cell shifts.
fn value_noise_plane(h: usize, w: usize, cell: usize, rng: &mut Rng) -> Vec<f64> {
    let gh = h.div_ceil(cell) + 1;
    let gw = w.div_ceil(cell) + 1;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.uniform()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let u = i as f64 / cell as f64;
        let i0 = u as usize;
        let fu = smooth(u - i0 as f64);
        for j in 0..w {
            let v = j as f64 / cell as f64;
            let j0 = v as usize;
            let fv = smooth(v - j0 as f64);
            let a = lattice[i0 * gw + j0];
            let b = lattice[i0 * gw + j0 + 1];
            let c = lattice[(i0 + 1) * gw + j0];
            let d = lattice[(i0 + 1) * gw + j0 + 1];
            out.push((1.0 - fu) * ((1.0 - fv) * a + fv * b) + fu * ((1.0 - fv) * c + fv * d));
        }
    }
    out
}

fn stretch_unit_range(plane: &mut [f64]) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in plane.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if span > 1e-12 {
        for v in plane.iter_mut() {
            *v = 0.02 + 0.96 * (*v - lo) / span;
        }
    } else {
        for v in plane.iter_mut() {
            *v = 0.5;
        }
    }
}

fn texture(spec: &SceneSpec, rng: &mut Rng) -> Result<Tensor> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let n = c * h * w;
    match spec.texture {
        TextureKind::RandomNoise => {
            let values: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            Tensor::new(&[1, c, h, w], values)
        }
        TextureKind::SmoothedNoise => {
            let mut values = alloc::vec![0.0; n];
            for ci in 0..c {
                let plane = &mut values[ci * h * w..(ci + 1) * h * w];
                for (cell, weight) in NOISE_OCTAVES {
                    let octave = value_noise_plane(h, w, cell, rng);
                    for (dst, src) in plane.iter_mut().zip(&octave) {
                        *dst += weight * src;
                    }
                }
                stretch_unit_range(plane);
            }
            Tensor::new(&[1, c, h, w], values)
        }
        TextureKind::Checkers => {
            const CELL: usize = 8;
            let cells_x = w.div_ceil(CELL);
            let cells_y = h.div_ceil(CELL);
            let colors: Vec<f64> = (0..c * cells_y * cells_x)
                .map(|_| rng.range(0.05, 0.95))
                .collect();
            let mut values = alloc::vec![0.0; n];
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let cell = (ci * cells_y + i / CELL) * cells_x + j / CELL;
                        values[(ci * h + i) * w + j] = colors[cell];
                    }
                }
            }
            Tensor::new(&[1, c, h, w], values)
        }
    }
}

/// Build one rectified pair with attached ground truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<StereoSample> {
    if spec.width < 2 || spec.height < 2 {
        return Err(Error::BadShape {
            op: "generate_scene",
            shape: alloc::vec![1, spec.channels, spec.height, spec.width],
            reason: "extents must be at least 2",
        });
    }
    if spec.channels != 1 && spec.channels != 3 {
        return Err(Error::BadShape {
            op: "generate_scene",
            shape: alloc::vec![1, spec.channels, spec.height, spec.width],
            reason: "channel count must be 1 or 3",
        });
    }
    let bound_px = DEFAULT_D_MAX_FRAC * spec.width as f64;
    let max_px = spec.profile.max_px();
    if !(0.0..bound_px).contains(&max_px) {
        return Err(Error::DisparityOutOfBounds {
            requested_px: max_px,
            bound_px,
        });
    }

    let mut rng = Rng::new(spec.seed);
    let left = texture(spec, &mut rng)?;
    let (h, w) = (spec.height, spec.width);
    let gt_values: Vec<f64> = (0..h)
        .flat_map(|_| (0..w).map(|j| spec.profile.at(j, w) / w as f64))
        .collect();
    let gt = Tensor::new(&[1, 1, h, w], gt_values)?;

    // right(x) = left sampled at x + d(x) * w, clamped at the borders.
    let mut tape = Tape::new();
    let left_id = tape.leaf(left.clone());
    let gt_id = tape.leaf(gt.clone());
    let right_id = tape.warp_h(left_id, gt_id, WarpDirection::Rightward)?;
    let right = tape.tensor(right_id).clone().with_requires_grad(false);

    Ok(StereoSample {
        left: Image::new(left)?,
        right: Image::new(right)?,
        gt_disp: Some(Disparity::new(gt)?),
        rig: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::idx4;

    #[test]
    fn constant_scene_is_exact_integer_shift() {
        let spec = SceneSpec {
            profile: DisparityProfile::Constant { px: 4.0 },
            texture: TextureKind::RandomNoise,
            width: 128,
            height: 64,
            channels: 3,
            seed: 11,
        };
        let s = generate_scene(&spec).unwrap();
        let (l, r) = (s.left.tensor().values(), s.right.tensor().values());
        for ci in 0..3 {
            for i in 0..64 {
                for j in 0..128 - 4 {
                    let want = l[idx4(3, 64, 128, 0, ci, i, j + 4)];
                    let got = r[idx4(3, 64, 128, 0, ci, i, j)];
                    assert_eq!(got, want, "channel {ci} row {i} col {j}");
                }
            }
        }
    }

    #[test]
    fn zero_disparity_copies_left_bit_exactly() {
        let spec = SceneSpec {
            profile: DisparityProfile::Constant { px: 0.0 },
            texture: TextureKind::SmoothedNoise,
            width: 32,
            height: 16,
            channels: 3,
            seed: 3,
        };
        let s = generate_scene(&spec).unwrap();
        assert!(s
            .left
            .tensor()
            .values()
            .iter()
            .zip(s.right.tensor().values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn two_plane_scene_reconstructs_through_gt() {
        let spec = SceneSpec {
            profile: DisparityProfile::TwoPlane {
                left_px: 2.0,
                right_px: 6.0,
            },
            texture: TextureKind::Checkers,
            width: 64,
            height: 32,
            channels: 3,
            seed: 5,
        };
        let s = generate_scene(&spec).unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(s.left.tensor().clone());
        let g = tape.leaf(s.gt_disp.as_ref().unwrap().tensor().clone());
        let rec = tape.warp_h(l, g, WarpDirection::Rightward).unwrap();
        // The generator used the identical sampler, so the residual is zero
        // everywhere, boundary band included.
        for (a, b) in tape.values(rec).iter().zip(s.right.tensor().values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn slanted_profile_ramps() {
        let spec = SceneSpec {
            profile: DisparityProfile::Slanted {
                start_px: 1.0,
                end_px: 5.0,
            },
            texture: TextureKind::RandomNoise,
            width: 64,
            height: 16,
            channels: 1,
            seed: 1,
        };
        let s = generate_scene(&spec).unwrap();
        let gt = s.gt_disp.unwrap();
        let v = gt.tensor().values();
        assert!((v[0] * 64.0 - 1.0).abs() < 1e-12);
        assert!((v[63] * 64.0 - 5.0).abs() < 1e-12);
        assert!(v[10] < v[40]);
    }

    #[test]
    fn rejects_out_of_bound_disparity() {
        let spec = SceneSpec {
            profile: DisparityProfile::Constant { px: 40.0 },
            width: 64,
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_scene(&spec),
            Err(Error::DisparityOutOfBounds { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec {
            seed: 42,
            ..SceneSpec::default()
        };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn textures_stay_in_unit_range() {
        for texture in [
            TextureKind::RandomNoise,
            TextureKind::SmoothedNoise,
            TextureKind::Checkers,
        ] {
            let spec = SceneSpec {
                texture,
                width: 48,
                height: 24,
                ..SceneSpec::default()
            };
            let s = generate_scene(&spec).unwrap();
            assert!(s
                .left
                .tensor()
                .values()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
