//! The full finite-difference verification suite: one named check per
//! differentiable operation plus both total costs and the network forward
//! pass. Shared between the test suite and the command-line `gradcheck`
//! subcommand.
//!
//! Tolerances: 1e-6 for smooth operations, 1e-4 for kinked or composite
//! ones (absolute values, warps, the assembled costs). Inputs are seeded
//! and sit away from subgradient kinks, so results are reproducible.

use alloc::string::String;
use alloc::vec::Vec;

use crate::loss::{
    appearance_loss, lr_consistency_loss, smoothness_loss, total_cost_dnm12, total_cost_dnm6,
    LossWeights, SmoothnessWeightSource,
};
use crate::net::{forward_network, BoundNetwork, NetworkConfig};
use crate::rng::Rng;
use crate::stereo::{build_pyramid, image_gradients, ssim_map, warp_horizontal};
use crate::tape::{grad_check_multi, Tape, TensorId, WarpDirection};
use crate::tensor::Tensor;
use crate::Result;

pub const SMOOTH_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random_tensor(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.range(lo, hi)).collect();
    Tensor::new(shape, values).expect("valid random tensor")
}

/// Magnitudes bounded away from zero so |x| has no kink inside the
/// finite-difference stencil.
fn signed_away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.range(0.1, 1.0);
            if rng.flip() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, values).expect("valid tensor")
}

/// Disparities whose pixel shifts have fractional parts in [0.3, 0.7], away
/// from the bilinear sampler's kinks.
fn kink_free_disparity(shape: &[usize], rng: &mut Rng) -> Tensor {
    let w = shape[3] as f64;
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|_| (libm::floor(rng.range(0.0, 2.0)) + rng.range(0.3, 0.7)) / w)
        .collect();
    Tensor::new(shape, values).expect("valid disparity")
}

struct Check {
    name: &'static str,
    tolerance: f64,
    run: fn() -> Result<f64>,
}

fn sq_mean(t: &mut Tape, x: TensorId) -> Result<TensorId> {
    let sq = t.mul(x, x)?;
    t.mean_all(sq)
}

const EPS: f64 = 1e-6;

fn check_add() -> Result<f64> {
    let mut rng = Rng::new(101);
    let a = random_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            sq_mean(t, s)
        },
        &[a, b],
        EPS,
    )
}

fn check_sub() -> Result<f64> {
    let mut rng = Rng::new(102);
    let a = random_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let s = t.sub(ids[0], ids[1])?;
            sq_mean(t, s)
        },
        &[a, b],
        EPS,
    )
}

fn check_mul() -> Result<f64> {
    let mut rng = Rng::new(103);
    let a = random_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let s = t.mul(ids[0], ids[1])?;
            t.mean_all(s)
        },
        &[a, b],
        EPS,
    )
}

fn check_div() -> Result<f64> {
    let mut rng = Rng::new(104);
    let a = random_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[2, 5], &mut rng, 0.5, 2.0);
    grad_check_multi(
        |t, ids| {
            let s = t.div(ids[0], ids[1])?;
            t.mean_all(s)
        },
        &[a, b],
        EPS,
    )
}

fn check_abs() -> Result<f64> {
    let mut rng = Rng::new(105);
    let a = signed_away_from_zero(&[3, 6], &mut rng);
    grad_check_multi(
        |t, ids| {
            let s = t.abs(ids[0])?;
            sq_mean(t, s)
        },
        &[a],
        EPS,
    )
}

fn check_exp() -> Result<f64> {
    let mut rng = Rng::new(106);
    let a = random_tensor(&[2, 3], &mut rng, -1.5, 1.5);
    grad_check_multi(
        |t, ids| {
            let s = t.exp(ids[0])?;
            t.mean_all(s)
        },
        &[a],
        EPS,
    )
}

fn check_neg() -> Result<f64> {
    let mut rng = Rng::new(107);
    let a = random_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let s = t.neg(ids[0])?;
            sq_mean(t, s)
        },
        &[a],
        EPS,
    )
}

fn check_scale() -> Result<f64> {
    let mut rng = Rng::new(108);
    let a = random_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let s = t.scale(ids[0], -2.5)?;
            sq_mean(t, s)
        },
        &[a],
        EPS,
    )
}

fn check_add_const() -> Result<f64> {
    let mut rng = Rng::new(109);
    let a = random_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let s = t.add_const(ids[0], 0.7)?;
            sq_mean(t, s)
        },
        &[a],
        EPS,
    )
}

fn check_mean_all() -> Result<f64> {
    let mut rng = Rng::new(110);
    let a = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    grad_check_multi(|t, ids| t.mean_all(ids[0]), &[a], EPS)
}

fn check_mean_channels() -> Result<f64> {
    let mut rng = Rng::new(111);
    let a = random_tensor(&[1, 3, 3, 4], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let m = t.mean_channels(ids[0])?;
            sq_mean(t, m)
        },
        &[a],
        EPS,
    )
}

fn check_sigmoid() -> Result<f64> {
    let mut rng = Rng::new(112);
    let a = random_tensor(&[2, 4], &mut rng, -3.0, 3.0);
    grad_check_multi(
        |t, ids| {
            let s = t.sigmoid(ids[0])?;
            t.mean_all(s)
        },
        &[a],
        EPS,
    )
}

fn check_elu() -> Result<f64> {
    let mut rng = Rng::new(113);
    let a = random_tensor(&[2, 4], &mut rng, -3.0, 3.0);
    grad_check_multi(
        |t, ids| {
            let s = t.elu(ids[0])?;
            t.mean_all(s)
        },
        &[a],
        EPS,
    )
}

fn check_conv2d() -> Result<f64> {
    let mut rng = Rng::new(114);
    let img = random_tensor(&[1, 2, 6, 8], &mut rng, -1.0, 1.0);
    let ker = random_tensor(&[3, 2, 4, 4], &mut rng, -0.5, 0.5);
    let bias = random_tensor(&[3], &mut rng, -0.2, 0.2);
    grad_check_multi(
        |t, ids| {
            let c = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
            sq_mean(t, c)
        },
        &[img, ker, bias],
        EPS,
    )
}

fn check_avg_pool2() -> Result<f64> {
    let mut rng = Rng::new(115);
    let a = random_tensor(&[1, 2, 4, 6], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let p = t.avg_pool2(ids[0])?;
            sq_mean(t, p)
        },
        &[a],
        EPS,
    )
}

fn check_upsample2() -> Result<f64> {
    let mut rng = Rng::new(116);
    let a = random_tensor(&[1, 2, 3, 4], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let u = t.upsample2(ids[0])?;
            sq_mean(t, u)
        },
        &[a],
        EPS,
    )
}

fn check_box3() -> Result<f64> {
    let mut rng = Rng::new(117);
    let a = random_tensor(&[1, 1, 5, 6], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let b = t.box3(ids[0])?;
            sq_mean(t, b)
        },
        &[a],
        EPS,
    )
}

fn check_image_gradients() -> Result<f64> {
    let mut rng = Rng::new(118);
    let a = random_tensor(&[1, 1, 5, 6], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let (gx, gy) = image_gradients(t, ids[0])?;
            let sx = t.mul(gx, gx)?;
            let sy = t.mul(gy, gy)?;
            let s = t.add(sx, sy)?;
            t.mean_all(s)
        },
        &[a],
        EPS,
    )
}

fn check_concat_slice() -> Result<f64> {
    let mut rng = Rng::new(119);
    let a = random_tensor(&[1, 2, 3, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[1, 1, 3, 4], &mut rng, -1.0, 1.0);
    grad_check_multi(
        |t, ids| {
            let cat = t.concat_c(ids[0], ids[1])?;
            let s = t.slice_c(cat, 1, 2)?;
            sq_mean(t, s)
        },
        &[a, b],
        EPS,
    )
}

fn check_warp(dir: WarpDirection) -> Result<f64> {
    let mut rng = Rng::new(match dir {
        WarpDirection::Leftward => 120,
        WarpDirection::Rightward => 121,
    });
    let src = random_tensor(&[1, 2, 3, 8], &mut rng, 0.0, 1.0);
    let disp = kink_free_disparity(&[1, 1, 3, 8], &mut rng);
    grad_check_multi(
        |t, ids| {
            let wpd = warp_horizontal(t, ids[0], ids[1], dir)?;
            sq_mean(t, wpd)
        },
        &[src, disp],
        EPS,
    )
}

fn check_ssim() -> Result<f64> {
    let mut rng = Rng::new(122);
    let a = random_tensor(&[1, 1, 5, 5], &mut rng, 0.1, 0.9);
    let b = random_tensor(&[1, 1, 5, 5], &mut rng, 0.1, 0.9);
    grad_check_multi(
        |t, ids| {
            let s = ssim_map(t, ids[0], ids[1])?;
            t.mean_all(s)
        },
        &[a, b],
        EPS,
    )
}

fn check_appearance() -> Result<f64> {
    let mut rng = Rng::new(123);
    let a = random_tensor(&[1, 3, 5, 6], &mut rng, 0.1, 0.9);
    let b = random_tensor(&[1, 3, 5, 6], &mut rng, 0.1, 0.9);
    grad_check_multi(
        |t, ids| appearance_loss(t, ids[0], ids[1], &LossWeights::default()),
        &[a, b],
        EPS,
    )
}

fn check_smoothness() -> Result<f64> {
    let mut rng = Rng::new(124);
    let d = random_tensor(&[1, 1, 5, 6], &mut rng, 0.01, 0.25);
    let img = random_tensor(&[1, 3, 5, 6], &mut rng, 0.0, 1.0);
    grad_check_multi(
        |t, ids| smoothness_loss(t, ids[0], ids[1]),
        &[d, img],
        EPS,
    )
}

fn check_lr_consistency() -> Result<f64> {
    let mut rng = Rng::new(125);
    let a = kink_free_disparity(&[1, 1, 4, 8], &mut rng);
    let b = kink_free_disparity(&[1, 1, 4, 8], &mut rng);
    grad_check_multi(
        |t, ids| lr_consistency_loss(t, ids[0], ids[1], WarpDirection::Leftward),
        &[a, b],
        EPS,
    )
}

/// Pyramid scale count used for the batched total-cost checks: an 8x16 base
/// supports three halvings before the gradient operators' minimum extents.
const COST_SCALES: usize = 3;

fn cost_points(rng: &mut Rng, maps: usize) -> Vec<Tensor> {
    let mut points = Vec::new();
    for _ in 0..maps {
        points.push(kink_free_disparity(&[2, 1, 8, 16], rng));
        points.push(kink_free_disparity(&[2, 1, 4, 8], rng));
        points.push(kink_free_disparity(&[2, 1, 2, 4], rng));
    }
    points
}

fn check_total_dnm6() -> Result<f64> {
    let mut rng = Rng::new(126);
    let img_l = random_tensor(&[2, 3, 8, 16], &mut rng, 0.0, 1.0);
    let img_r = random_tensor(&[2, 3, 8, 16], &mut rng, 0.0, 1.0);
    let points = cost_points(&mut rng, 2);
    grad_check_multi(
        |t, ids| {
            let il = t.leaf(img_l.clone());
            let ir = t.leaf(img_r.clone());
            let pyr_l = build_pyramid(t, il, COST_SCALES)?;
            let pyr_r = build_pyramid(t, ir, COST_SCALES)?;
            let (total, _) = total_cost_dnm6(
                t,
                &pyr_l,
                &pyr_r,
                &ids[0..COST_SCALES],
                &ids[COST_SCALES..2 * COST_SCALES],
                &LossWeights::default(),
            )?;
            Ok(total)
        },
        &points,
        EPS,
    )
}

fn check_total_dnm12() -> Result<f64> {
    let mut rng = Rng::new(127);
    let img_l = random_tensor(&[2, 3, 8, 16], &mut rng, 0.0, 1.0);
    let img_r = random_tensor(&[2, 3, 8, 16], &mut rng, 0.0, 1.0);
    let points = cost_points(&mut rng, 4);
    grad_check_multi(
        |t, ids| {
            let il = t.leaf(img_l.clone());
            let ir = t.leaf(img_r.clone());
            let pyr_l = build_pyramid(t, il, COST_SCALES)?;
            let pyr_r = build_pyramid(t, ir, COST_SCALES)?;
            let (total, _) = total_cost_dnm12(
                t,
                &pyr_l,
                &pyr_r,
                &ids[0..COST_SCALES],
                &ids[COST_SCALES..2 * COST_SCALES],
                &ids[2 * COST_SCALES..3 * COST_SCALES],
                &ids[3 * COST_SCALES..4 * COST_SCALES],
                &LossWeights::default(),
                SmoothnessWeightSource::NetworkInput,
            )?;
            Ok(total)
        },
        &points,
        EPS,
    )
}

fn check_network_forward() -> Result<f64> {
    let cfg = NetworkConfig {
        input_channels: 1,
        base_filters: 2,
        encoder_depth: 4,
        out_channels: 1,
        d_max_frac: 0.3,
        seed: 128,
    };
    let params = crate::net::init_params(&cfg)?;
    let mut rng = Rng::new(129);
    let image = random_tensor(&[1, 1, 16, 32], &mut rng, 0.0, 1.0);
    let points: Vec<Tensor> = params.tensors().iter().map(|(_, t)| (*t).clone()).collect();
    grad_check_multi(
        |tape, ids| {
            let img = tape.leaf(image.clone());
            let net = BoundNetwork::from_flat(cfg.encoder_depth, ids)?;
            let scales = forward_network(tape, &cfg, &net, img)?;
            let m1 = tape.mean_all(scales[0])?;
            let m2 = tape.mean_all(scales[1])?;
            let m3 = tape.mean_all(scales[2])?;
            let m4 = tape.mean_all(scales[3])?;
            let a = tape.add(m1, m2)?;
            let b = tape.add(a, m3)?;
            tape.add(b, m4)
        },
        &points,
        1e-5,
    )
}

const CHECKS: &[Check] = &[
    Check { name: "add", tolerance: SMOOTH_TOLERANCE, run: check_add },
    Check { name: "sub", tolerance: SMOOTH_TOLERANCE, run: check_sub },
    Check { name: "mul", tolerance: SMOOTH_TOLERANCE, run: check_mul },
    Check { name: "div", tolerance: SMOOTH_TOLERANCE, run: check_div },
    Check { name: "abs", tolerance: SMOOTH_TOLERANCE, run: check_abs },
    Check { name: "exp", tolerance: SMOOTH_TOLERANCE, run: check_exp },
    Check { name: "neg", tolerance: SMOOTH_TOLERANCE, run: check_neg },
    Check { name: "scale_by_constant", tolerance: SMOOTH_TOLERANCE, run: check_scale },
    Check { name: "add_constant", tolerance: SMOOTH_TOLERANCE, run: check_add_const },
    Check { name: "mean_all", tolerance: SMOOTH_TOLERANCE, run: check_mean_all },
    Check { name: "mean_channels", tolerance: SMOOTH_TOLERANCE, run: check_mean_channels },
    Check { name: "sigmoid", tolerance: SMOOTH_TOLERANCE, run: check_sigmoid },
    Check { name: "elu", tolerance: SMOOTH_TOLERANCE, run: check_elu },
    Check { name: "conv2d", tolerance: SMOOTH_TOLERANCE, run: check_conv2d },
    Check { name: "avg_pool2", tolerance: SMOOTH_TOLERANCE, run: check_avg_pool2 },
    Check { name: "upsample2", tolerance: SMOOTH_TOLERANCE, run: check_upsample2 },
    Check { name: "box3", tolerance: SMOOTH_TOLERANCE, run: check_box3 },
    Check { name: "image_gradients", tolerance: SMOOTH_TOLERANCE, run: check_image_gradients },
    Check { name: "concat_slice", tolerance: SMOOTH_TOLERANCE, run: check_concat_slice },
    Check {
        name: "warp_leftward",
        tolerance: COMPOSITE_TOLERANCE,
        run: || check_warp(WarpDirection::Leftward),
    },
    Check {
        name: "warp_rightward",
        tolerance: COMPOSITE_TOLERANCE,
        run: || check_warp(WarpDirection::Rightward),
    },
    Check { name: "ssim", tolerance: SMOOTH_TOLERANCE, run: check_ssim },
    Check { name: "appearance_loss", tolerance: COMPOSITE_TOLERANCE, run: check_appearance },
    Check { name: "smoothness_loss", tolerance: COMPOSITE_TOLERANCE, run: check_smoothness },
    Check { name: "lr_consistency_loss", tolerance: COMPOSITE_TOLERANCE, run: check_lr_consistency },
    Check { name: "total_cost_dnm6", tolerance: COMPOSITE_TOLERANCE, run: check_total_dnm6 },
    Check { name: "total_cost_dnm12", tolerance: COMPOSITE_TOLERANCE, run: check_total_dnm12 },
    Check { name: "network_forward", tolerance: COMPOSITE_TOLERANCE, run: check_network_forward },
];

/// Run every check and collect the reports.
pub fn run_suite() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::with_capacity(CHECKS.len());
    for check in CHECKS {
        let max_rel_err = (check.run)()?;
        out.push(GradCheckReport {
            name: check.name,
            max_rel_err,
            tolerance: check.tolerance,
        });
    }
    Ok(out)
}

/// Render the suite as an aligned text table.
pub fn format_reports(reports: &[GradCheckReport]) -> String {
    use core::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "{:<22} {:>14} {:>10} result", "op", "max_rel_err", "tol");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<22} {:>14.3e} {:>10.0e} {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    out
}
