//! Training objectives: appearance matching, edge-aware disparity smoothness
//! and left-right consistency, assembled into per-scale and total costs for
//! the six-loss and twelve-loss dual-network models.
//!
//! Every loss is a mean over all summed elements (pixels x channels for
//! image losses, pixels for disparity losses), which makes the costs
//! resolution-independent across pyramid scales.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::Error;
use crate::stereo::{image_gradients, ssim_map, warp_horizontal};
use crate::tape::{Tape, TensorId, WarpDirection};
use crate::Result;

/// Objective weights. `alpha` mixes SSIM against L1 inside the appearance
/// term; the other three weight the per-scale cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub alpha_ap: f64,
    pub alpha_ds: f64,
    pub alpha_lr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.85,
            alpha_ap: 1.0,
            alpha_ds: 0.1,
            alpha_lr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(alloc::format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("alpha_ap", self.alpha_ap),
            ("alpha_ds", self.alpha_ds),
            ("alpha_lr", self.alpha_lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(alloc::format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which image supplies the edge weights for the smoothness term of a
/// cross-view disparity map in the twelve-loss model.
///
/// `NetworkInput` weights both outputs of a network by that network's input
/// image; `DisparityView` weights each map by the image of the view the map
/// describes. The two readings coincide for the six-loss model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothnessWeightSource {
    #[default]
    NetworkInput,
    DisparityView,
}

/// Photometric reconstruction error: `alpha * (1 - SSIM)/2 + (1-alpha) * L1`,
/// averaged over pixels and channels.
pub fn appearance_loss(
    tape: &mut Tape,
    target: TensorId,
    recon: TensorId,
    w: &LossWeights,
) -> Result<TensorId> {
    if tape.shape(target) != tape.shape(recon) {
        return Err(Error::ShapeMismatch {
            op: "appearance_loss",
            lhs: tape.shape(target).to_vec(),
            rhs: tape.shape(recon).to_vec(),
        });
    }
    let s = ssim_map(tape, target, recon)?;
    let neg_s = tape.neg(s)?;
    let one_minus = tape.add_const(neg_s, 1.0)?;
    let ssim_term = tape.scale(one_minus, w.alpha * 0.5)?;
    let diff = tape.sub(target, recon)?;
    let l1 = tape.abs(diff)?;
    let l1_term = tape.scale(l1, 1.0 - w.alpha)?;
    let combined = tape.add(ssim_term, l1_term)?;
    tape.mean_all(combined)
}

/// Edge-aware smoothness: `|dx d| * exp(-||dx I||) + |dy d| * exp(-||dy I||)`
/// averaged over pixels, where `||.||` is the mean over channels of the
/// absolute image gradient.
pub fn smoothness_loss(tape: &mut Tape, disp: TensorId, img: TensorId) -> Result<TensorId> {
    let ds = tape.shape(disp).to_vec();
    let is = tape.shape(img).to_vec();
    if ds.len() != 4 || is.len() != 4 || ds[0] != is[0] || ds[2] != is[2] || ds[3] != is[3] || ds[1] != 1 {
        return Err(Error::ShapeMismatch {
            op: "smoothness_loss",
            lhs: ds,
            rhs: is,
        });
    }
    let (gx_d, gy_d) = image_gradients(tape, disp)?;
    let abs_gx_d = tape.abs(gx_d)?;
    let abs_gy_d = tape.abs(gy_d)?;

    let (gx_i, gy_i) = image_gradients(tape, img)?;
    let wx = edge_weight(tape, gx_i)?;
    let wy = edge_weight(tape, gy_i)?;

    let term_x = tape.mul(abs_gx_d, wx)?;
    let term_y = tape.mul(abs_gy_d, wy)?;
    let sum = tape.add(term_x, term_y)?;
    tape.mean_all(sum)
}

fn edge_weight(tape: &mut Tape, grad: TensorId) -> Result<TensorId> {
    let mag = tape.abs(grad)?;
    let mean_c = tape.mean_channels(mag)?;
    let neg = tape.neg(mean_c)?;
    tape.exp(neg)
}

/// Left-right consistency: mean `|d_a - d_b(projected through d_a)|`, where
/// the projection is the horizontal warp of `d_b` by `d_a` in the given
/// direction. The two six-loss terms are
/// `lr_consistency_loss(d_l, d_r, Leftward)` and
/// `lr_consistency_loss(d_r, d_l, Rightward)`.
pub fn lr_consistency_loss(
    tape: &mut Tape,
    d_a: TensorId,
    d_b: TensorId,
    direction: WarpDirection,
) -> Result<TensorId> {
    if tape.shape(d_a) != tape.shape(d_b) {
        return Err(Error::ShapeMismatch {
            op: "lr_consistency_loss",
            lhs: tape.shape(d_a).to_vec(),
            rhs: tape.shape(d_b).to_vec(),
        });
    }
    let projected = warp_horizontal(tape, d_b, d_a, direction)?;
    let diff = tape.sub(d_a, projected)?;
    let abs = tape.abs(diff)?;
    tape.mean_all(abs)
}

/// Per-scale component values of the six-loss cost.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dnm6Components {
    pub ap_l: f64,
    pub ap_r: f64,
    pub ds_l: f64,
    pub ds_r: f64,
    pub lr: f64,
    pub rl: f64,
    pub total: f64,
}

impl Dnm6Components {
    pub const NAMES: [&'static str; 6] = ["ap_l", "ap_r", "ds_l", "ds_r", "lr", "rl"];

    pub fn component_values(&self) -> [f64; 6] {
        [self.ap_l, self.ap_r, self.ds_l, self.ds_r, self.lr, self.rl]
    }

    /// Recompute the weighted per-scale total from the stored components.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let ap = w.alpha_ap * (self.ap_l + self.ap_r);
        let ds = w.alpha_ds * (self.ds_l + self.ds_r);
        let lr = w.alpha_lr * (self.lr + self.rl);
        (ap + ds) + lr
    }
}

/// Per-scale component values of the twelve-loss cost.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dnm12Components {
    pub ap_ll: f64,
    pub ap_lr: f64,
    pub ap_rl: f64,
    pub ap_rr: f64,
    pub ds_ll: f64,
    pub ds_lr: f64,
    pub ds_rl: f64,
    pub ds_rr: f64,
    pub lr_l: f64,
    pub rl_l: f64,
    pub lr_r: f64,
    pub rl_r: f64,
    pub total: f64,
}

impl Dnm12Components {
    pub const NAMES: [&'static str; 12] = [
        "ap_ll", "ap_lr", "ap_rl", "ap_rr", "ds_ll", "ds_lr", "ds_rl", "ds_rr", "lr_l", "rl_l",
        "lr_r", "rl_r",
    ];

    pub fn component_values(&self) -> [f64; 12] {
        [
            self.ap_ll, self.ap_lr, self.ap_rl, self.ap_rr, self.ds_ll, self.ds_lr, self.ds_rl,
            self.ds_rr, self.lr_l, self.rl_l, self.lr_r, self.rl_r,
        ]
    }

    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let ap = w.alpha_ap * (((self.ap_ll + self.ap_lr) + self.ap_rl) + self.ap_rr);
        let ds = w.alpha_ds * (((self.ds_ll + self.ds_lr) + self.ds_rl) + self.ds_rr);
        let lr = w.alpha_lr * (((self.lr_l + self.rl_l) + self.lr_r) + self.rl_r);
        (ap + ds) + lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleComponents {
    Six(Dnm6Components),
    Twelve(Dnm12Components),
}

impl ScaleComponents {
    pub fn total(&self) -> f64 {
        match self {
            ScaleComponents::Six(c) => c.total,
            ScaleComponents::Twelve(c) => c.total,
        }
    }

    pub fn recompose(&self, w: &LossWeights) -> f64 {
        match self {
            ScaleComponents::Six(c) => c.recompose(w),
            ScaleComponents::Twelve(c) => c.recompose(w),
        }
    }
}

/// Every component scalar of one training step, per scale, plus the grand
/// total. The total always equals the weighted recomposition of the parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub scales: Vec<ScaleComponents>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recompute the grand total from the stored per-scale components.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let mut acc = 0.0;
        for s in &self.scales {
            acc += s.recompose(w);
        }
        acc
    }

    /// CSV column names matching [`LossBreakdown::csv_row`]:
    /// `step,lr,total` followed per scale by each component and the
    /// per-scale total.
    pub fn csv_header(&self) -> String {
        let mut out = String::from("step,lr,total");
        for (i, scale) in self.scales.iter().enumerate() {
            let s = i + 1;
            let names: &[&str] = match scale {
                ScaleComponents::Six(_) => &Dnm6Components::NAMES,
                ScaleComponents::Twelve(_) => &Dnm12Components::NAMES,
            };
            for name in names {
                let _ = write!(out, ",s{s}_{name}");
            }
            let _ = write!(out, ",s{s}_total");
        }
        out
    }

    /// One CSV row for a training step.
    pub fn csv_row(&self, step: usize, lr: f64) -> String {
        let mut out = String::new();
        let _ = write!(out, "{step},{lr},{}", self.total);
        for scale in &self.scales {
            match scale {
                ScaleComponents::Six(c) => {
                    for v in c.component_values() {
                        let _ = write!(out, ",{v}");
                    }
                }
                ScaleComponents::Twelve(c) => {
                    for v in c.component_values() {
                        let _ = write!(out, ",{v}");
                    }
                }
            }
            let _ = write!(out, ",{}", scale.total());
        }
        out
    }
}

/// Six-loss cost at one scale. Reconstructs each view from the other
/// through its own disparity map, then combines two appearance terms, two
/// smoothness terms and the two consistency terms under the weights.
pub fn scale_cost_dnm6(
    tape: &mut Tape,
    img_l: TensorId,
    img_r: TensorId,
    d_l: TensorId,
    d_r: TensorId,
    w: &LossWeights,
) -> Result<(TensorId, Dnm6Components)> {
    let recon_l = warp_horizontal(tape, img_r, d_l, WarpDirection::Leftward)?;
    let recon_r = warp_horizontal(tape, img_l, d_r, WarpDirection::Rightward)?;

    let ap_l = appearance_loss(tape, img_l, recon_l, w)?;
    let ap_r = appearance_loss(tape, img_r, recon_r, w)?;
    let ds_l = smoothness_loss(tape, d_l, img_l)?;
    let ds_r = smoothness_loss(tape, d_r, img_r)?;
    let lr = lr_consistency_loss(tape, d_l, d_r, WarpDirection::Leftward)?;
    let rl = lr_consistency_loss(tape, d_r, d_l, WarpDirection::Rightward)?;

    let sum_ap = tape.add(ap_l, ap_r)?;
    let sum_ds = tape.add(ds_l, ds_r)?;
    let sum_lr = tape.add(lr, rl)?;
    let w_ap = tape.scale(sum_ap, w.alpha_ap)?;
    let w_ds = tape.scale(sum_ds, w.alpha_ds)?;
    let w_lr = tape.scale(sum_lr, w.alpha_lr)?;
    let partial = tape.add(w_ap, w_ds)?;
    let total = tape.add(partial, w_lr)?;

    let components = Dnm6Components {
        ap_l: tape.scalar(ap_l)?,
        ap_r: tape.scalar(ap_r)?,
        ds_l: tape.scalar(ds_l)?,
        ds_r: tape.scalar(ds_r)?,
        lr: tape.scalar(lr)?,
        rl: tape.scalar(rl)?,
        total: tape.scalar(total)?,
    };
    Ok((total, components))
}

/// Total six-loss cost: the sum of the per-scale costs over matching
/// image/disparity pyramids.
pub fn total_cost_dnm6(
    tape: &mut Tape,
    pyr_l: &[TensorId],
    pyr_r: &[TensorId],
    disp_l: &[TensorId],
    disp_r: &[TensorId],
    w: &LossWeights,
) -> Result<(TensorId, LossBreakdown)> {
    check_scales(pyr_l.len(), &[pyr_r.len(), disp_l.len(), disp_r.len()])?;
    let mut total: Option<TensorId> = None;
    let mut scales = Vec::with_capacity(pyr_l.len());
    for s in 0..pyr_l.len() {
        let (cs, comps) = scale_cost_dnm6(tape, pyr_l[s], pyr_r[s], disp_l[s], disp_r[s], w)?;
        scales.push(ScaleComponents::Six(comps));
        total = Some(match total {
            None => cs,
            Some(acc) => tape.add(acc, cs)?,
        });
    }
    let total = total.expect("at least one scale");
    let breakdown = LossBreakdown {
        scales,
        total: tape.scalar(total)?,
    };
    Ok((total, breakdown))
}

/// Twelve-loss cost at one scale. Each network contributes a same-view and
/// a cross-view disparity map; four bilinear samplers produce four
/// reconstructions, smoothness weights come from `sws`, and the consistency
/// terms pair each network's two maps.
#[allow(clippy::too_many_arguments)]
pub fn scale_cost_dnm12(
    tape: &mut Tape,
    img_l: TensorId,
    img_r: TensorId,
    d_ll: TensorId,
    d_lr: TensorId,
    d_rl: TensorId,
    d_rr: TensorId,
    w: &LossWeights,
    sws: SmoothnessWeightSource,
) -> Result<(TensorId, Dnm12Components)> {
    let recon_ll = warp_horizontal(tape, img_r, d_ll, WarpDirection::Leftward)?;
    let recon_lr = warp_horizontal(tape, img_l, d_lr, WarpDirection::Rightward)?;
    let recon_rl = warp_horizontal(tape, img_r, d_rl, WarpDirection::Leftward)?;
    let recon_rr = warp_horizontal(tape, img_l, d_rr, WarpDirection::Rightward)?;

    let ap_ll = appearance_loss(tape, img_l, recon_ll, w)?;
    let ap_lr = appearance_loss(tape, img_r, recon_lr, w)?;
    let ap_rl = appearance_loss(tape, img_l, recon_rl, w)?;
    let ap_rr = appearance_loss(tape, img_r, recon_rr, w)?;

    // Edge weights: by the producing network's input image, or by the image
    // of the view each disparity map describes.
    let (w_ll, w_lr, w_rl, w_rr) = match sws {
        SmoothnessWeightSource::NetworkInput => (img_l, img_l, img_r, img_r),
        SmoothnessWeightSource::DisparityView => (img_l, img_r, img_l, img_r),
    };
    let ds_ll = smoothness_loss(tape, d_ll, w_ll)?;
    let ds_lr = smoothness_loss(tape, d_lr, w_lr)?;
    let ds_rl = smoothness_loss(tape, d_rl, w_rl)?;
    let ds_rr = smoothness_loss(tape, d_rr, w_rr)?;

    let lr_l = lr_consistency_loss(tape, d_ll, d_lr, WarpDirection::Leftward)?;
    let rl_l = lr_consistency_loss(tape, d_lr, d_ll, WarpDirection::Rightward)?;
    let lr_r = lr_consistency_loss(tape, d_rl, d_rr, WarpDirection::Leftward)?;
    let rl_r = lr_consistency_loss(tape, d_rr, d_rl, WarpDirection::Rightward)?;

    let ap_a = tape.add(ap_ll, ap_lr)?;
    let ap_b = tape.add(ap_a, ap_rl)?;
    let sum_ap = tape.add(ap_b, ap_rr)?;
    let ds_a = tape.add(ds_ll, ds_lr)?;
    let ds_b = tape.add(ds_a, ds_rl)?;
    let sum_ds = tape.add(ds_b, ds_rr)?;
    let lr_a = tape.add(lr_l, rl_l)?;
    let lr_b = tape.add(lr_a, lr_r)?;
    let sum_lr = tape.add(lr_b, rl_r)?;

    let w_ap = tape.scale(sum_ap, w.alpha_ap)?;
    let w_ds = tape.scale(sum_ds, w.alpha_ds)?;
    let w_lr = tape.scale(sum_lr, w.alpha_lr)?;
    let partial = tape.add(w_ap, w_ds)?;
    let total = tape.add(partial, w_lr)?;

    let components = Dnm12Components {
        ap_ll: tape.scalar(ap_ll)?,
        ap_lr: tape.scalar(ap_lr)?,
        ap_rl: tape.scalar(ap_rl)?,
        ap_rr: tape.scalar(ap_rr)?,
        ds_ll: tape.scalar(ds_ll)?,
        ds_lr: tape.scalar(ds_lr)?,
        ds_rl: tape.scalar(ds_rl)?,
        ds_rr: tape.scalar(ds_rr)?,
        lr_l: tape.scalar(lr_l)?,
        rl_l: tape.scalar(rl_l)?,
        lr_r: tape.scalar(lr_r)?,
        rl_r: tape.scalar(rl_r)?,
        total: tape.scalar(total)?,
    };
    Ok((total, components))
}

/// Total twelve-loss cost over matching pyramids.
#[allow(clippy::too_many_arguments)]
pub fn total_cost_dnm12(
    tape: &mut Tape,
    pyr_l: &[TensorId],
    pyr_r: &[TensorId],
    d_ll: &[TensorId],
    d_lr: &[TensorId],
    d_rl: &[TensorId],
    d_rr: &[TensorId],
    w: &LossWeights,
    sws: SmoothnessWeightSource,
) -> Result<(TensorId, LossBreakdown)> {
    check_scales(
        pyr_l.len(),
        &[
            pyr_r.len(),
            d_ll.len(),
            d_lr.len(),
            d_rl.len(),
            d_rr.len(),
        ],
    )?;
    let mut total: Option<TensorId> = None;
    let mut scales = Vec::with_capacity(pyr_l.len());
    for s in 0..pyr_l.len() {
        let (cs, comps) = scale_cost_dnm12(
            tape, pyr_l[s], pyr_r[s], d_ll[s], d_lr[s], d_rl[s], d_rr[s], w, sws,
        )?;
        scales.push(ScaleComponents::Twelve(comps));
        total = Some(match total {
            None => cs,
            Some(acc) => tape.add(acc, cs)?,
        });
    }
    let total = total.expect("at least one scale");
    let breakdown = LossBreakdown {
        scales,
        total: tape.scalar(total)?,
    };
    Ok((total, breakdown))
}

fn check_scales(expected: usize, others: &[usize]) -> Result<()> {
    if expected == 0 {
        return Err(Error::EmptyInput {
            what: "total cost needs at least one scale",
        });
    }
    for &got in others {
        if got != expected {
            return Err(Error::ScaleCountMismatch { expected, got });
        }
    }
    Ok(())
}
