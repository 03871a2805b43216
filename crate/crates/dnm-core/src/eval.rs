//! Depth evaluation: disparity-to-depth conversion, flip-and-blend
//! post-processing and the standard error/accuracy metric suite.
//!
//! Depth evaluation uses the customary range `[1e-3, 80]` meters:
//! predictions are clamped into the range, ground-truth pixels outside it
//! are excluded. Aggregation over a test set is a uniform mean over images.

use alloc::vec::Vec;

use crate::error::Error;
use crate::net::{predict_disparity_channel, DispChannel, DualModel, View};
use crate::scene::StereoSample;
use crate::stereo::{flip_horizontal, Disparity, Image};
use crate::tensor::Tensor;
use crate::Result;

/// Depth range over which metrics are computed, in meters.
pub const DEPTH_MIN: f64 = 1e-3;
pub const DEPTH_CAP: f64 = 80.0;

/// Default disparity floor (pixels) guarding the depth division.
pub const DEFAULT_MIN_DISP_PX: f64 = 0.01;

/// Stereo camera geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub focal_px: f64,
    pub baseline_m: f64,
}

impl CameraRig {
    pub fn new(focal_px: f64, baseline_m: f64) -> Result<Self> {
        if !focal_px.is_finite() || focal_px <= 0.0 || !baseline_m.is_finite() || baseline_m <= 0.0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "camera rig values must be strictly positive, got f={focal_px}, B={baseline_m}"
            )));
        }
        Ok(CameraRig {
            focal_px,
            baseline_m,
        })
    }
}

/// Per-pixel depth in meters with a validity mask; `clamped` flags pixels
/// whose disparity sat below the floor during conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub clamped: Vec<bool>,
}

/// `depth = focal * baseline / max(disparity, min_disp_px)`.
///
/// The input map must be in pixel units (`Disparity::to_pixels` converts
/// the in-memory width-fraction representation).
pub fn disparity_to_depth(
    disp_px: &Tensor,
    rig: &CameraRig,
    min_disp_px: f64,
) -> Result<DepthMap> {
    CameraRig::new(rig.focal_px, rig.baseline_m)?;
    if !min_disp_px.is_finite() || min_disp_px <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!(
            "min_disp_px must be positive, got {min_disp_px}"
        )));
    }
    let (b, c, h, w) = disp_px.dims4()?;
    if b != 1 || c != 1 {
        return Err(Error::BadShape {
            op: "disparity_to_depth",
            shape: disp_px.shape().to_vec(),
            reason: "expected a single-image single-channel map",
        });
    }
    let fb = rig.focal_px * rig.baseline_m;
    let mut depth = Vec::with_capacity(h * w);
    let mut clamped = Vec::with_capacity(h * w);
    for &d in disp_px.values() {
        let hit_floor = d < min_disp_px;
        depth.push(fb / d.max(min_disp_px));
        clamped.push(hit_floor);
    }
    Ok(DepthMap {
        height: h,
        width: w,
        depth,
        valid: alloc::vec![true; h * w],
        clamped,
    })
}

/// Standard depth metric suite over one or many images.
///
/// `d1_all` is disparity-domain and therefore filled by the set-level
/// evaluation, not by [`compute_metrics`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub d1_all: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub pixel_count: usize,
}

/// Error and accuracy metrics over pixels where the ground truth is valid
/// and inside `[DEPTH_MIN, DEPTH_CAP]`; predictions are clamped into that
/// range first.
pub fn compute_metrics(d: &DepthMap, g: &DepthMap) -> Result<MetricsReport> {
    if d.height != g.height || d.width != g.width {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            lhs: alloc::vec![d.height, d.width],
            rhs: alloc::vec![g.height, g.width],
        });
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut a1, mut a2, mut a3) = (0usize, 0usize, 0usize);
    for i in 0..d.depth.len() {
        let gt = g.depth[i];
        if !g.valid[i] || !(DEPTH_MIN..=DEPTH_CAP).contains(&gt) {
            continue;
        }
        let pred = d.depth[i].clamp(DEPTH_MIN, DEPTH_CAP);
        let err = pred - gt;
        abs_rel += err.abs() / gt;
        sq_rel += err * err / gt;
        se += err * err;
        let log_err = libm::log(pred) - libm::log(gt);
        se_log += log_err * log_err;
        let ratio = (pred / gt).max(gt / pred);
        if ratio < 1.25 {
            a1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            a2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            a3 += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput {
            what: "no valid pixels for metric computation",
        });
    }
    let nf = n as f64;
    Ok(MetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: libm::sqrt(se / nf),
        rmse_log: libm::sqrt(se_log / nf),
        d1_all: 0.0,
        a1: a1 as f64 / nf,
        a2: a2 as f64 / nf,
        a3: a3 as f64 / nf,
        pixel_count: n,
    })
}

/// Percentage of valid pixels whose disparity error exceeds both 3 px and
/// 5 percent of the ground truth. Pixels with non-positive ground truth are
/// treated as invalid.
pub fn d1_all(d_pred_px: &Tensor, d_gt_px: &Tensor) -> Result<f64> {
    if d_pred_px.shape() != d_gt_px.shape() {
        return Err(Error::ShapeMismatch {
            op: "d1_all",
            lhs: d_pred_px.shape().to_vec(),
            rhs: d_gt_px.shape().to_vec(),
        });
    }
    let mut n = 0usize;
    let mut bad = 0usize;
    for (&p, &g) in d_pred_px.values().iter().zip(d_gt_px.values()) {
        if g <= 0.0 {
            continue;
        }
        n += 1;
        let err = (p - g).abs();
        if err > 3.0 && err > 0.05 * g {
            bad += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput {
            what: "no valid pixels for d1-all",
        });
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// Flip-and-blend post-processing around an arbitrary predictor.
///
/// `d1` is the plain prediction, `d2` the mirrored prediction of the
/// mirrored image. Near the left border (5 percent of width, clamped linear
/// ramp) the output follows `d2`, near the right border `d1`, and in the
/// interior the plain average of the two; this suppresses the dis-occluded
/// bands warping cannot explain.
pub fn post_process_with<F>(predict: F, image: &Image) -> Result<Disparity>
where
    F: Fn(&Image) -> Result<Disparity>,
{
    let d1 = predict(image)?.into_tensor();
    let flipped = Image::new(flip_horizontal(image.tensor())?)?;
    let d2 = flip_horizontal(predict(&flipped)?.tensor())?;
    if d1.shape() != d2.shape() {
        return Err(Error::ShapeMismatch {
            op: "post_process",
            lhs: d1.shape().to_vec(),
            rhs: d2.shape().to_vec(),
        });
    }
    let (b, _, h, w) = d1.dims4()?;
    let ramp = 0.05 * w as f64;
    let mut out = Vec::with_capacity(d1.numel());
    let (v1, v2) = (d1.values(), d2.values());
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let at = (bi * h + i) * w + j;
                let w_l = (1.0 - j as f64 / ramp).clamp(0.0, 1.0);
                let w_r = (1.0 - (w - 1 - j) as f64 / ramp).clamp(0.0, 1.0);
                let blend =
                    w_l * v2[at] + w_r * v1[at] + (1.0 - w_l - w_r) * 0.5 * (v1[at] + v2[at]);
                out.push(blend);
            }
        }
    }
    Disparity::new(Tensor::new(d1.shape(), out)?)
}

/// Post-processed prediction from a trained model.
pub fn post_process(
    model: &DualModel,
    image: &Image,
    view: View,
    channel: DispChannel,
) -> Result<Disparity> {
    post_process_with(
        |img| predict_disparity_channel(model, img.tensor(), view, channel),
        image,
    )
}

/// Evaluation options for a sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub use_pp: bool,
    pub view: View,
    pub channel: DispChannel,
    pub min_disp_px: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            use_pp: false,
            view: View::Left,
            channel: DispChannel::SameView,
            min_disp_px: DEFAULT_MIN_DISP_PX,
        }
    }
}

/// Per-image reports plus their uniform mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub per_image: Vec<MetricsReport>,
    pub aggregate: MetricsReport,
}

/// Metrics of one prediction against one ground-truth disparity map.
pub fn image_report(
    pred: &Disparity,
    gt: &Disparity,
    rig: &CameraRig,
    min_disp_px: f64,
) -> Result<MetricsReport> {
    let pred_px = pred.to_pixels();
    let gt_px = gt.to_pixels();
    let d1 = d1_all(&pred_px, &gt_px)?;
    let d = disparity_to_depth(&pred_px, rig, min_disp_px)?;
    let g = disparity_to_depth(&gt_px, rig, min_disp_px)?;
    let mut report = compute_metrics(&d, &g)?;
    report.d1_all = d1;
    Ok(report)
}

/// Evaluate an arbitrary predictor against ground-truth disparities.
pub fn evaluate_set_with<F>(
    predict: F,
    samples: &[StereoSample],
    rig: &CameraRig,
    use_pp: bool,
    view: View,
    min_disp_px: f64,
) -> Result<EvalOutcome>
where
    F: Fn(&Image) -> Result<Disparity>,
{
    if samples.is_empty() {
        return Err(Error::EmptyInput {
            what: "evaluation needs at least one sample",
        });
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for sample in samples {
        let gt = sample.gt_disp.as_ref().ok_or(Error::EmptyInput {
            what: "evaluation sample is missing ground-truth disparity",
        })?;
        let image = match view {
            View::Left => &sample.left,
            View::Right => &sample.right,
        };
        let pred = if use_pp {
            post_process_with(&predict, image)?
        } else {
            predict(image)?
        };
        per_image.push(image_report(&pred, gt, rig, min_disp_px)?);
    }
    Ok(EvalOutcome {
        aggregate: aggregate_reports(&per_image),
        per_image,
    })
}

/// Evaluate already-computed disparity maps (for example maps reloaded from
/// exported prediction files) against the samples' ground truth.
pub fn evaluate_predictions(
    preds: &[Disparity],
    samples: &[StereoSample],
    rig: &CameraRig,
    min_disp_px: f64,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyInput {
            what: "evaluation needs at least one sample",
        });
    }
    if preds.len() != samples.len() {
        return Err(Error::ScaleCountMismatch {
            expected: samples.len(),
            got: preds.len(),
        });
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for (pred, sample) in preds.iter().zip(samples) {
        let gt = sample.gt_disp.as_ref().ok_or(Error::EmptyInput {
            what: "evaluation sample is missing ground-truth disparity",
        })?;
        per_image.push(image_report(pred, gt, rig, min_disp_px)?);
    }
    Ok(EvalOutcome {
        aggregate: aggregate_reports(&per_image),
        per_image,
    })
}

/// Evaluate a trained model; metrics are averaged uniformly over images.
pub fn evaluate_set(
    model: &DualModel,
    samples: &[StereoSample],
    rig: &CameraRig,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    evaluate_set_with(
        |img| predict_disparity_channel(model, img.tensor(), opts.view, opts.channel),
        samples,
        rig,
        opts.use_pp,
        opts.view,
        opts.min_disp_px,
    )
}

/// Uniform mean over per-image reports; pixel counts accumulate.
pub fn aggregate_reports(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    let mut agg = MetricsReport::default();
    for r in reports {
        agg.abs_rel += r.abs_rel / n;
        agg.sq_rel += r.sq_rel / n;
        agg.rmse += r.rmse / n;
        agg.rmse_log += r.rmse_log / n;
        agg.d1_all += r.d1_all / n;
        agg.a1 += r.a1 / n;
        agg.a2 += r.a2 / n;
        agg.a3 += r.a3 / n;
        agg.pixel_count += r.pixel_count;
    }
    agg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::scene::{generate_scene, DisparityProfile, SceneSpec, TextureKind};

    fn depth_map(h: usize, w: usize, values: Vec<f64>) -> DepthMap {
        DepthMap {
            height: h,
            width: w,
            valid: alloc::vec![true; values.len()],
            clamped: alloc::vec![false; values.len()],
            depth: values,
        }
    }

    #[test]
    fn depth_formula_direct_case() {
        let rig = CameraRig::new(10.0, 2.0).unwrap();
        let d = Tensor::full(&[1, 1, 2, 2], 4.0).unwrap();
        let out = disparity_to_depth(&d, &rig, 0.01).unwrap();
        assert!(out.depth.iter().all(|&v| v == 5.0));
        assert!(out.clamped.iter().all(|&c| !c));
    }

    #[test]
    fn doubling_disparity_halves_depth() {
        let rig = CameraRig::new(100.0, 0.5).unwrap();
        let a = disparity_to_depth(&Tensor::full(&[1, 1, 1, 4], 3.0).unwrap(), &rig, 0.01)
            .unwrap();
        let b = disparity_to_depth(&Tensor::full(&[1, 1, 1, 4], 6.0).unwrap(), &rig, 0.01)
            .unwrap();
        for (x, y) in a.depth.iter().zip(&b.depth) {
            assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn disparity_floor_engages() {
        let rig = CameraRig::new(10.0, 2.0).unwrap();
        let d = Tensor::full(&[1, 1, 1, 1], 0.001).unwrap();
        let out = disparity_to_depth(&d, &rig, 0.01).unwrap();
        assert_eq!(out.depth[0], 10.0 * 2.0 / 0.01);
        assert!(out.clamped[0]);
    }

    #[test]
    fn rig_must_be_positive() {
        assert!(CameraRig::new(0.0, 1.0).is_err());
        assert!(CameraRig::new(10.0, -1.0).is_err());
    }

    #[test]
    fn depth_to_disparity_round_trip() {
        // Above the clamp threshold the conversion inverts exactly.
        let rig = CameraRig::new(50.0, 0.4).unwrap();
        let mut rng = Rng::new(4);
        let disp: Vec<f64> = (0..32).map(|_| rng.range(0.5, 12.0)).collect();
        let t = Tensor::new(&[1, 1, 4, 8], disp.clone()).unwrap();
        let depth = disparity_to_depth(&t, &rig, 0.01).unwrap();
        for (d0, z) in disp.iter().zip(&depth.depth) {
            let back = rig.focal_px * rig.baseline_m / z;
            assert!((back - d0).abs() / d0 < 1e-12);
        }
    }

    #[test]
    fn metrics_perfect_prediction() {
        let g = depth_map(2, 2, alloc::vec![1.0, 5.0, 10.0, 50.0]);
        let m = compute_metrics(&g.clone(), &g).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.sq_rel, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.rmse_log, 0.0);
        assert_eq!((m.a1, m.a2, m.a3), (1.0, 1.0, 1.0));
        assert_eq!(m.pixel_count, 4);
    }

    #[test]
    fn metrics_uniform_ten_percent_error() {
        let g = depth_map(2, 2, alloc::vec![1.0, 5.0, 10.0, 50.0]);
        let d = depth_map(2, 2, g.depth.iter().map(|v| 1.1 * v).collect());
        let m = compute_metrics(&d, &g).unwrap();
        assert!((m.abs_rel - 0.1).abs() < 1e-12);
        assert_eq!(m.a1, 1.0);
    }

    #[test]
    fn metrics_threshold_arithmetic() {
        let g = depth_map(1, 4, alloc::vec![1.0, 2.0, 4.0, 8.0]);
        let d = depth_map(1, 4, g.depth.iter().map(|v| 1.3 * v).collect());
        let m = compute_metrics(&d, &g).unwrap();
        assert_eq!(m.a1, 0.0, "1.3 >= 1.25");
        assert_eq!(m.a2, 1.0, "1.3 < 1.5625");
        assert_eq!(m.a3, 1.0);
    }

    #[test]
    fn metrics_reject_empty_mask() {
        let mut g = depth_map(1, 2, alloc::vec![1.0, 2.0]);
        g.valid = alloc::vec![false, false];
        let d = depth_map(1, 2, alloc::vec![1.0, 2.0]);
        assert!(matches!(
            compute_metrics(&d, &g),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn metrics_mask_out_of_range_ground_truth() {
        let g = depth_map(1, 3, alloc::vec![0.0001, 5.0, 200.0]);
        let d = depth_map(1, 3, alloc::vec![1.0, 5.0, 100.0]);
        let m = compute_metrics(&d, &g).unwrap();
        // Only the middle pixel participates.
        assert_eq!(m.pixel_count, 1);
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn multiplicative_error_is_monotone() {
        let mut rng = Rng::new(5);
        let g = depth_map(4, 4, (0..16).map(|_| rng.range(1.0, 60.0)).collect());
        let mut prev_abs = -1.0;
        let mut prev_log = -1.0;
        for rho in [1.0, 1.05, 1.2, 1.5, 2.0] {
            let d = depth_map(4, 4, g.depth.iter().map(|v| rho * v).collect());
            let m = compute_metrics(&d, &g).unwrap();
            assert!(m.abs_rel >= prev_abs);
            assert!(m.rmse_log >= prev_log);
            prev_abs = m.abs_rel;
            prev_log = m.rmse_log;
        }
    }

    #[test]
    fn d1_all_threshold_cases() {
        let same = Tensor::full(&[1, 1, 2, 2], 10.0).unwrap();
        assert_eq!(d1_all(&same, &same).unwrap(), 0.0);

        // 4 px absolute error at gt = 10: above both thresholds.
        let gt = Tensor::full(&[1, 1, 2, 2], 10.0).unwrap();
        let pred = Tensor::full(&[1, 1, 2, 2], 14.0).unwrap();
        assert_eq!(d1_all(&pred, &gt).unwrap(), 100.0);

        // 4 px at gt = 100: 4 percent misses the relative threshold.
        let gt = Tensor::full(&[1, 1, 2, 2], 100.0).unwrap();
        let pred = Tensor::full(&[1, 1, 2, 2], 104.0).unwrap();
        assert_eq!(d1_all(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn d1_all_requires_valid_pixels() {
        let gt = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let pred = Tensor::full(&[1, 1, 2, 2], 1.0).unwrap();
        assert!(matches!(
            d1_all(&pred, &gt),
            Err(Error::EmptyInput { .. })
        ));
    }

    fn constant_predictor(value: f64) -> impl Fn(&Image) -> crate::Result<Disparity> {
        move |img: &Image| {
            let (b, _, h, w) = img.tensor().dims4()?;
            Disparity::new(Tensor::full(&[b, 1, h, w], value)?)
        }
    }

    #[test]
    fn post_process_constant_stub_is_identity() {
        let img = Image::new(Tensor::full(&[1, 3, 8, 40], 0.5).unwrap()).unwrap();
        let out = post_process_with(constant_predictor(0.07), &img).unwrap();
        assert!(out.tensor().values().iter().all(|&v| (v - 0.07).abs() < 1e-15));
    }

    #[test]
    fn post_process_interior_is_plain_average() {
        // A stub that depends on pixel values: symmetric image makes the
        // flipped prediction equal the plain one in the interior.
        let mut rng = Rng::new(6);
        let w = 40;
        let half: Vec<f64> = (0..w / 2).map(|_| rng.uniform()).collect();
        let mut row: Vec<f64> = half.clone();
        row.extend(half.iter().rev());
        let mut values = Vec::new();
        for _ in 0..4 {
            values.extend_from_slice(&row);
        }
        let img = Image::new(Tensor::new(&[1, 1, 4, w], values).unwrap()).unwrap();
        let predict = |img: &Image| {
            let vals: Vec<f64> = img.tensor().values().iter().map(|v| 0.2 * v).collect();
            Disparity::new(Tensor::new(img.tensor().shape(), vals).unwrap())
        };
        let d1 = predict(&img).unwrap();
        let out = post_process_with(predict, &img).unwrap();
        for (o, p) in out
            .tensor()
            .values()
            .iter()
            .zip(d1.tensor().values())
            .skip(2)
        {
            assert!((o - p).abs() < 1e-12);
        }
    }

    #[test]
    fn post_process_matches_loop_oracle() {
        // Predictor keyed off the image so d1 != d2, compared against an
        // independent per-pixel blend.
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let (h, w) = (3, 30);
            let values: Vec<f64> = (0..3 * h * w).map(|_| rng.uniform()).collect();
            let img = Image::new(Tensor::new(&[1, 3, h, w], values).unwrap()).unwrap();
            let predict = |img: &Image| {
                let t = img.tensor();
                let (_, _, h, w) = t.dims4()?;
                let mut vals = Vec::with_capacity(h * w);
                for i in 0..h {
                    for j in 0..w {
                        // Channel 0 with a horizontal lean.
                        vals.push(0.1 * t.values()[i * w + j] + 0.001 * j as f64);
                    }
                }
                Disparity::new(Tensor::new(&[1, 1, h, w], vals)?)
            };
            let out = post_process_with(predict, &img).unwrap();

            let d1 = predict(&img).unwrap().into_tensor();
            let flipped = Image::new(flip_horizontal(img.tensor()).unwrap()).unwrap();
            let d2 = flip_horizontal(predict(&flipped).unwrap().tensor()).unwrap();
            let ramp = 0.05 * w as f64;
            for i in 0..h {
                for j in 0..w {
                    let at = i * w + j;
                    let wl = (1.0 - j as f64 / ramp).clamp(0.0, 1.0);
                    let wr = (1.0 - (w - 1 - j) as f64 / ramp).clamp(0.0, 1.0);
                    let want = wl * d2.values()[at]
                        + wr * d1.values()[at]
                        + (1.0 - wl - wr) * 0.5 * (d1.values()[at] + d2.values()[at]);
                    let got = out.tensor().values()[at];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn post_process_flips_with_flip_equivariant_stub() {
        let mut rng = Rng::new(8);
        let values: Vec<f64> = (0..3 * 4 * 24).map(|_| rng.uniform()).collect();
        let img = Image::new(Tensor::new(&[1, 3, 4, 24], values).unwrap()).unwrap();
        // Pointwise predictor: flip-equivariant by construction.
        let predict = |img: &Image| {
            let t = img.tensor();
            let (_, _, h, w) = t.dims4()?;
            let vals: Vec<f64> = t.values()[..h * w].iter().map(|v| 0.25 * v).collect();
            Disparity::new(Tensor::new(&[1, 1, h, w], vals)?)
        };
        let out = post_process_with(predict, &img).unwrap();
        let flipped_img = Image::new(flip_horizontal(img.tensor()).unwrap()).unwrap();
        let out_flipped = post_process_with(predict, &flipped_img).unwrap();
        let mirrored = flip_horizontal(out.tensor()).unwrap();
        for (a, b) in out_flipped.tensor().values().iter().zip(mirrored.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn gt_scene(seed: u64) -> StereoSample {
        generate_scene(&SceneSpec {
            profile: DisparityProfile::Constant { px: 4.0 },
            texture: TextureKind::SmoothedNoise,
            width: 64,
            height: 32,
            channels: 3,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn evaluate_set_perfect_predictor() {
        let samples = alloc::vec![gt_scene(1)];
        let rig = CameraRig::new(100.0, 0.5).unwrap();
        let outcome = evaluate_set_with(
            |_| {
                Disparity::new(Tensor::full(&[1, 1, 32, 64], 4.0 / 64.0).unwrap())
            },
            &samples,
            &rig,
            false,
            View::Left,
            DEFAULT_MIN_DISP_PX,
        )
        .unwrap();
        let m = outcome.aggregate;
        assert!(m.abs_rel < 1e-12);
        assert_eq!(m.a1, 1.0);
        assert_eq!(m.d1_all, 0.0);
    }

    #[test]
    fn evaluate_set_aggregates_uniformly() {
        // Two samples with abs_rel of exactly 0.1 and 0.3: predictors scale
        // the ground truth disparity down so depth scales up.
        let samples = alloc::vec![gt_scene(2), gt_scene(3)];
        let rig = CameraRig::new(100.0, 0.5).unwrap();
        let mut call = core::cell::Cell::new(0usize);
        let outcome = evaluate_set_with(
            |_| {
                let factor = if call.get() == 0 { 1.1 } else { 1.3 };
                call.set(call.get() + 1);
                Disparity::new(Tensor::full(&[1, 1, 32, 64], 4.0 / 64.0 / factor).unwrap())
            },
            &samples,
            &rig,
            false,
            View::Left,
            DEFAULT_MIN_DISP_PX,
        )
        .unwrap();
        assert!((outcome.per_image[0].abs_rel - 0.1).abs() < 1e-12);
        assert!((outcome.per_image[1].abs_rel - 0.3).abs() < 1e-12);
        assert!((outcome.aggregate.abs_rel - 0.2).abs() < 1e-12);

        // Aggregate equals an independent recomputation from per-image rows.
        let by_hand = aggregate_reports(&outcome.per_image);
        assert_eq!(outcome.aggregate, by_hand);
        let _ = &mut call;
    }

    #[test]
    fn evaluate_set_respects_view_selection() {
        // A predictor keyed off image content: the two views of a nonzero
        // disparity scene differ, so the selected view shows through.
        let samples = alloc::vec![gt_scene(4)];
        let rig = CameraRig::new(100.0, 0.5).unwrap();
        let predict = |img: &Image| {
            let t = img.tensor();
            let (_, _, h, w) = t.dims4()?;
            let mean = t.values().iter().sum::<f64>() / t.numel() as f64;
            Disparity::new(Tensor::full(&[1, 1, h, w], 0.02 + 0.01 * mean)?)
        };
        let left = evaluate_set_with(predict, &samples, &rig, false, View::Left, 0.01).unwrap();
        let right = evaluate_set_with(predict, &samples, &rig, false, View::Right, 0.01).unwrap();
        // Means of the two views differ (border clamping skews the right
        // image), so the reports must differ too.
        assert_ne!(left.aggregate.abs_rel, right.aggregate.abs_rel);
    }

    #[test]
    fn accuracy_thresholds_nest() {
        let mut rng = Rng::new(9);
        for _ in 0..10 {
            let g = depth_map(4, 4, (0..16).map(|_| rng.range(1.0, 70.0)).collect());
            let d = depth_map(
                4,
                4,
                g.depth.iter().map(|v| v * rng.range(0.5, 2.0)).collect(),
            );
            let m = compute_metrics(&d, &g).unwrap();
            assert!(m.a1 <= m.a2 && m.a2 <= m.a3 && m.a3 <= 1.0);
        }
    }
}
