//! Training loop: batching, on-the-fly augmentation, the three-phase
//! learning-rate schedule and Adam updates of both networks from the shared
//! total cost.
//!
//! Every source of randomness is seeded from the config, so a fixed seed
//! reproduces the loss history and the final parameters bit-for-bit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::loss::{
    total_cost_dnm6, total_cost_dnm12, LossBreakdown, LossWeights, SmoothnessWeightSource,
};
use crate::net::{bind_network, forward_network, DualModel, ModelKind, NetworkConfig};
use crate::rng::{derive_seed, Rng};
use crate::scene::{generate_scene, SceneSpec, StereoSample};
use crate::stereo::{build_pyramid, flip_horizontal, Disparity, Image};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Result;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub lr_phase3: f64,
    pub phase_boundary1: usize,
    pub phase_boundary2: usize,
    pub augment_photometric: bool,
    pub augment_flip: bool,
    pub smoothness_weight_source: SmoothnessWeightSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_kind: ModelKind::Dnm6,
            epochs: 50,
            steps_per_epoch: 100,
            batch_size: 2,
            weights: LossWeights::default(),
            lr_phase1: 1e-4,
            lr_phase2: 0.5e-4,
            lr_phase3: 0.25e-4,
            phase_boundary1: 30,
            phase_boundary2: 40,
            augment_photometric: true,
            augment_flip: true,
            smoothness_weight_source: SmoothnessWeightSource::NetworkInput,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Validation for externally supplied configurations. Tests may build
    /// off-range configs (zero learning rate, short phases) directly.
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, lr) in [
            ("lr_phase1", self.lr_phase1),
            ("lr_phase2", self.lr_phase2),
            ("lr_phase3", self.lr_phase3),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {lr}"
                )));
            }
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig(String::from(
                "steps_per_epoch must be positive",
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig(String::from(
                "batch_size must be positive",
            )));
        }
        if self.phase_boundary1 >= self.phase_boundary2 {
            return Err(Error::InvalidConfig(format!(
                "phase boundaries must ascend, got {} then {}",
                self.phase_boundary1, self.phase_boundary2
            )));
        }
        if self.epochs > 0 && self.phase_boundary2 > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "phase boundary {} exceeds epoch count {}",
                self.phase_boundary2, self.epochs
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `lr_phase1` before the first boundary,
/// `lr_phase2` before the second, `lr_phase3` afterwards.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} out of range for {} training epochs",
            cfg.epochs
        )));
    }
    Ok(if epoch < cfg.phase_boundary1 {
        cfg.lr_phase1
    } else if epoch < cfg.phase_boundary2 {
        cfg.lr_phase2
    } else {
        cfg.lr_phase3
    })
}

// ---- augmentation ----------------------------------------------------------

/// One set of augmentation decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub gamma: f64,
    pub brightness: f64,
    pub color: [f64; 3],
    pub flip: bool,
}

impl AugmentDraw {
    /// Draw that leaves the sample unchanged.
    pub fn identity() -> Self {
        AugmentDraw {
            gamma: 1.0,
            brightness: 1.0,
            color: [1.0; 3],
            flip: false,
        }
    }
}

/// Sample augmentation parameters: gamma and brightness in `[0.8, 1.2]`,
/// per-channel color scale in `[0.95, 1.05]`, horizontal flip with p = 0.5.
pub fn draw_augment(rng: &mut Rng, photometric: bool, flip: bool) -> AugmentDraw {
    let mut draw = AugmentDraw::identity();
    if photometric {
        draw.gamma = rng.range(0.8, 1.2);
        draw.brightness = rng.range(0.8, 1.2);
        for c in draw.color.iter_mut() {
            *c = rng.range(0.95, 1.05);
        }
    }
    if flip {
        draw.flip = rng.flip();
    }
    draw
}

fn apply_photometric(img: &Image, draw: &AugmentDraw) -> Result<Image> {
    let t = img.tensor();
    let (b, c, h, w) = t.dims4()?;
    let mut values = t.values().to_vec();
    for bi in 0..b {
        for ci in 0..c {
            let gain = draw.brightness * draw.color[ci % 3];
            let plane = &mut values[((bi * c) + ci) * h * w..][..h * w];
            for v in plane.iter_mut() {
                *v = (libm::pow(*v, draw.gamma) * gain).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(Tensor::new(t.shape(), values)?)
}

/// Apply a fixed draw: gamma, brightness and color identically on both
/// views, then an optional flip that mirrors both images, exchanges their
/// roles and mirrors the ground truth.
pub fn apply_augment(sample: &StereoSample, draw: &AugmentDraw) -> Result<StereoSample> {
    let mut left = apply_photometric(&sample.left, draw)?;
    let mut right = apply_photometric(&sample.right, draw)?;
    let mut gt = sample.gt_disp.clone();
    if draw.flip {
        let new_left = Image::new(flip_horizontal(right.tensor())?)?;
        let new_right = Image::new(flip_horizontal(left.tensor())?)?;
        left = new_left;
        right = new_right;
        if let Some(d) = gt {
            gt = Some(Disparity::new(flip_horizontal(d.tensor())?)?);
        }
    }
    Ok(StereoSample {
        left,
        right,
        gt_disp: gt,
        rig: sample.rig,
    })
}

/// Draw parameters from `rng` and apply them.
pub fn augment(
    sample: &StereoSample,
    rng: &mut Rng,
    photometric: bool,
    flip: bool,
) -> Result<StereoSample> {
    let draw = draw_augment(rng, photometric, flip);
    apply_augment(sample, &draw)
}

// ---- optimizer -------------------------------------------------------------

/// First/second moment buffers per parameter tensor, plus the shared step
/// counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Rejects the whole step if any gradient
/// is non-finite, leaving parameters and moments untouched.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [(String, &mut Tensor)],
    grads: &[Vec<f64>],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            expected: state.m.len(),
            got: params.len(),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::LengthMismatch {
                expected: p.numel(),
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let corr1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
    let corr2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = &grads[i];
        for (k, value) in p.values_mut().iter_mut().enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = m[k] / corr1;
            let v_hat = v[k] / corr2;
            *value -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPSILON);
        }
    }
    Ok(())
}

// ---- sample sources ---------------------------------------------------------

/// Anything that yields training samples.
pub trait SampleSource {
    fn next_sample(&mut self) -> Result<StereoSample>;
}

/// Endless stream of freshly generated scenes with per-scene seeds drawn
/// from one master stream.
pub struct SceneStream {
    base: SceneSpec,
    rng: Rng,
}

impl SceneStream {
    pub fn new(base: SceneSpec, seed: u64) -> Self {
        SceneStream {
            base,
            rng: Rng::new(seed),
        }
    }
}

impl SampleSource for SceneStream {
    fn next_sample(&mut self) -> Result<StereoSample> {
        let spec = SceneSpec {
            seed: self.rng.next_u64(),
            ..self.base
        };
        generate_scene(&spec)
    }
}

/// Cycles over a fixed in-memory sample set.
pub struct CycleSource {
    samples: Vec<StereoSample>,
    next: usize,
}

impl CycleSource {
    pub fn new(samples: Vec<StereoSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput {
                what: "empty training sample set",
            });
        }
        Ok(CycleSource { samples, next: 0 })
    }
}

impl SampleSource for CycleSource {
    fn next_sample(&mut self) -> Result<StereoSample> {
        let s = self.samples[self.next].clone();
        self.next = (self.next + 1) % self.samples.len();
        Ok(s)
    }
}

// ---- trainer ----------------------------------------------------------------

/// Loss record of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

/// Drives optimization of a [`DualModel`]. The caller decides how many
/// epochs to run (checkpointing between them); [`Trainer::step`] exposes
/// single steps for diagnostics.
pub struct Trainer<S: SampleSource> {
    cfg: TrainConfig,
    model: DualModel,
    adam: AdamState,
    source: S,
    rng: Rng,
    history: Vec<StepRecord>,
    steps_done: usize,
}

impl<S: SampleSource> Trainer<S> {
    pub fn new(cfg: TrainConfig, source: S) -> Result<Self> {
        let model = DualModel::new(
            cfg.model_kind,
            NetworkConfig {
                seed: cfg.seed,
                ..NetworkConfig::default()
            },
        )?;
        Self::with_model(cfg, source, model)
    }

    /// Resume or fine-tune from an existing model; the optimizer state
    /// starts fresh.
    pub fn with_model(cfg: TrainConfig, source: S, model: DualModel) -> Result<Self> {
        if model.kind != cfg.model_kind {
            return Err(Error::InvalidConfig(format!(
                "model kind {:?} does not match configuration {:?}",
                model.kind, cfg.model_kind
            )));
        }
        let sizes: Vec<usize> = model
            .left
            .tensors()
            .iter()
            .chain(model.right.tensors().iter())
            .map(|(_, t)| t.numel())
            .collect();
        let rng = Rng::new(derive_seed(cfg.seed, 3));
        Ok(Trainer {
            cfg,
            model,
            adam: AdamState::new(&sizes),
            source,
            rng,
            history: Vec::new(),
            steps_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DualModel {
        &self.model
    }

    pub fn into_model(self) -> DualModel {
        self.model
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn epochs_done(&self) -> usize {
        self.steps_done / self.cfg.steps_per_epoch.max(1)
    }

    /// One optimization step at the learning rate of the current epoch.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let epoch = self.steps_done / self.cfg.steps_per_epoch.max(1);
        let lr = lr_at(&self.cfg, epoch)?;
        self.step_at(lr)
    }

    fn step_at(&mut self, lr: f64) -> Result<&StepRecord> {
        let step = self.steps_done;
        let mut lefts = Vec::with_capacity(self.cfg.batch_size);
        let mut rights = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size.max(1) {
            let raw = self.source.next_sample()?;
            let sample = if self.cfg.augment_photometric || self.cfg.augment_flip {
                augment(
                    &raw,
                    &mut self.rng,
                    self.cfg.augment_photometric,
                    self.cfg.augment_flip,
                )?
            } else {
                raw
            };
            lefts.push(sample.left.into_tensor());
            rights.push(sample.right.into_tensor());
        }
        let left_refs: Vec<&Tensor> = lefts.iter().collect();
        let right_refs: Vec<&Tensor> = rights.iter().collect();
        let batch_l = Tensor::stack_batch(&left_refs)?;
        let batch_r = Tensor::stack_batch(&right_refs)?;

        let mut tape = Tape::new();
        let img_l = tape.leaf(batch_l);
        let img_r = tape.leaf(batch_r);
        let pyr_l = build_pyramid(&mut tape, img_l, 4)?;
        let pyr_r = build_pyramid(&mut tape, img_r, 4)?;

        let bound_l = bind_network(&mut tape, &self.model.left, true);
        let bound_r = bind_network(&mut tape, &self.model.right, true);
        let scales_l = forward_network(&mut tape, &self.model.cfg, &bound_l, img_l)?;
        let scales_r = forward_network(&mut tape, &self.model.cfg, &bound_r, img_r)?;

        let (total, breakdown) = match self.cfg.model_kind {
            ModelKind::Dnm6 => total_cost_dnm6(
                &mut tape,
                &pyr_l,
                &pyr_r,
                &scales_l,
                &scales_r,
                &self.cfg.weights,
            )?,
            ModelKind::Dnm12 => {
                let mut d_ll = Vec::new();
                let mut d_lr = Vec::new();
                let mut d_rl = Vec::new();
                let mut d_rr = Vec::new();
                for s in 0..4 {
                    // Channel 0 is the producing network's own view.
                    d_ll.push(tape.slice_c(scales_l[s], 0, 1)?);
                    d_lr.push(tape.slice_c(scales_l[s], 1, 1)?);
                    d_rr.push(tape.slice_c(scales_r[s], 0, 1)?);
                    d_rl.push(tape.slice_c(scales_r[s], 1, 1)?);
                }
                total_cost_dnm12(
                    &mut tape,
                    &pyr_l,
                    &pyr_r,
                    &d_ll,
                    &d_lr,
                    &d_rl,
                    &d_rr,
                    &self.cfg.weights,
                    self.cfg.smoothness_weight_source,
                )?
            }
        };

        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        tape.backward(total)?;

        let mut grads = Vec::new();
        for id in bound_l.flat_ids().into_iter().chain(bound_r.flat_ids()) {
            grads.push(tape.grad(id).expect("parameters require grad").to_vec());
        }
        drop(tape);

        let mut params: Vec<(String, &mut Tensor)> = Vec::new();
        for (name, t) in self.model.left.tensors_mut() {
            params.push((format!("L.{name}"), t));
        }
        for (name, t) in self.model.right.tensors_mut() {
            params.push((format!("R.{name}"), t));
        }
        adam_step(&mut self.adam, &mut params, &grads, lr)?;

        self.history.push(StepRecord {
            step,
            lr,
            breakdown,
        });
        self.steps_done += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Run `steps_per_epoch` steps.
    pub fn run_epoch(&mut self) -> Result<()> {
        for _ in 0..self.cfg.steps_per_epoch {
            self.step()?;
        }
        Ok(())
    }

    /// Run every configured epoch.
    pub fn train_all(&mut self) -> Result<()> {
        for _ in 0..self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{predict_disparity, View};
    use crate::scene::{DisparityProfile, TextureKind};
    use crate::tape::Tape;

    fn quick_scene(seed: u64) -> StereoSample {
        generate_scene(&SceneSpec {
            profile: DisparityProfile::Constant { px: 3.0 },
            texture: TextureKind::SmoothedNoise,
            width: 32,
            height: 16,
            channels: 3,
            seed,
        })
        .unwrap()
    }

    fn short_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            steps_per_epoch: 4,
            batch_size: 1,
            augment_photometric: false,
            augment_flip: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_matches_phase_anchors() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0).unwrap(), 1e-4);
        assert_eq!(lr_at(&cfg, 29).unwrap(), 1e-4);
        assert_eq!(lr_at(&cfg, 30).unwrap(), 0.5e-4);
        assert_eq!(lr_at(&cfg, 39).unwrap(), 0.5e-4);
        assert_eq!(lr_at(&cfg, 40).unwrap(), 0.25e-4);
        assert_eq!(lr_at(&cfg, 49).unwrap(), 0.25e-4);
        assert!(lr_at(&cfg, 50).is_err());
    }

    #[test]
    fn lr_schedule_is_non_increasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for epoch in 0..cfg.epochs {
            let lr = lr_at(&cfg, epoch).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lr_phase1: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            phase_boundary1: 40,
            phase_boundary2: 30,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        // Degenerate zero-epoch runs skip the boundary/epoch comparison.
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn identity_draw_leaves_sample_unchanged() {
        let s = quick_scene(1);
        let out = apply_augment(&s, &AugmentDraw::identity()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn double_flip_restores_sample() {
        let s = quick_scene(2);
        let draw = AugmentDraw {
            flip: true,
            ..AugmentDraw::identity()
        };
        let once = apply_augment(&s, &draw).unwrap();
        let twice = apply_augment(&once, &draw).unwrap();
        for (a, b) in s
            .left
            .tensor()
            .values()
            .iter()
            .zip(twice.left.tensor().values())
        {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.gt_disp, twice.gt_disp);
    }

    #[test]
    fn photometric_augment_keeps_ground_truth() {
        let s = quick_scene(3);
        let draw = AugmentDraw {
            gamma: 1.1,
            brightness: 0.9,
            color: [1.02, 0.98, 1.01],
            flip: false,
        };
        let out = apply_augment(&s, &draw).unwrap();
        assert_eq!(out.gt_disp, s.gt_disp);
        assert_ne!(out.left, s.left);
    }

    #[test]
    fn flip_mirrors_ground_truth() {
        let s = generate_scene(&SceneSpec {
            profile: DisparityProfile::Slanted {
                start_px: 1.0,
                end_px: 5.0,
            },
            texture: TextureKind::RandomNoise,
            width: 32,
            height: 16,
            channels: 3,
            seed: 9,
        })
        .unwrap();
        let draw = AugmentDraw {
            flip: true,
            ..AugmentDraw::identity()
        };
        let out = apply_augment(&s, &draw).unwrap();
        let orig = s.gt_disp.unwrap();
        let flipped = out.gt_disp.unwrap();
        let w = 32;
        for i in 0..16 {
            for j in 0..w {
                assert_eq!(
                    flipped.tensor().values()[i * w + j],
                    orig.tensor().values()[i * w + (w - 1 - j)]
                );
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::new(&[2], alloc::vec![1.0, -2.0]).unwrap();
        let mut state = AdamState::new(&[2]);
        let mut params = alloc::vec![(String::from("p"), &mut p)];
        adam_step(&mut state, &mut params, &[alloc::vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // p = 0, g = 1, lr = 0.1: bias-corrected first step is
        // -lr * 1 / (1 + eps) which is -0.1 up to the epsilon regularizer.
        let mut p = Tensor::new(&[1], alloc::vec![0.0]).unwrap();
        let mut state = AdamState::new(&[1]);
        let mut params = alloc::vec![(String::from("p"), &mut p)];
        adam_step(&mut state, &mut params, &[alloc::vec![1.0]], 0.1).unwrap();
        assert!((p.values()[0] + 0.1).abs() < 1e-8, "{}", p.values()[0]);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut p = Tensor::new(&[1], alloc::vec![0.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&[1]);
        let mut params = alloc::vec![(String::from("p"), &mut p)];
        let err = adam_step(&mut state, &mut params, &[alloc::vec![f64::NAN]], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn adam_runs_are_deterministic() {
        let run = || {
            let mut p = Tensor::new(&[3], alloc::vec![0.5, -0.25, 1.5]).unwrap();
            let mut state = AdamState::new(&[3]);
            for k in 0..20 {
                let g = alloc::vec![0.1 * k as f64, -0.2, 0.05];
                let mut params = alloc::vec![(String::from("p"), &mut p)];
                adam_step(&mut state, &mut params, &[g], 1e-2).unwrap();
            }
            p.values().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig {
            lr_phase1: 0.0,
            ..short_cfg()
        };
        let source = CycleSource::new(alloc::vec![quick_scene(4)]).unwrap();
        let mut trainer = Trainer::new(cfg, source).unwrap();
        let before: Vec<Vec<f64>> = trainer
            .model()
            .left
            .tensors()
            .iter()
            .map(|(_, t)| t.values().to_vec())
            .collect();
        trainer.step().unwrap();
        let after: Vec<Vec<f64>> = trainer
            .model()
            .left
            .tensors()
            .iter()
            .map(|(_, t)| t.values().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_descends_on_fixed_scene() {
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 200,
            batch_size: 1,
            augment_photometric: false,
            augment_flip: false,
            ..TrainConfig::default()
        };
        let source = CycleSource::new(alloc::vec![quick_scene(5)]).unwrap();
        let mut trainer = Trainer::new(cfg, source).unwrap();
        trainer.run_epoch().unwrap();
        let history = trainer.history();
        let first = history.first().unwrap().breakdown.total;
        let last = history.last().unwrap().breakdown.total;
        assert!(
            last < first,
            "loss failed to descend: {first} -> {last}"
        );
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let run = || {
            let cfg = TrainConfig {
                augment_photometric: true,
                augment_flip: true,
                ..short_cfg()
            };
            let source = SceneStream::new(
                SceneSpec {
                    width: 32,
                    height: 16,
                    ..SceneSpec::default()
                },
                77,
            );
            let mut trainer = Trainer::new(cfg, source).unwrap();
            trainer.run_epoch().unwrap();
            let totals: Vec<u64> = trainer
                .history()
                .iter()
                .map(|r| r.breakdown.total.to_bits())
                .collect();
            let params: Vec<u64> = trainer
                .model()
                .left
                .tensors()
                .iter()
                .flat_map(|(_, t)| t.values().iter().map(|v| v.to_bits()))
                .collect();
            (totals, params)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dnm12_training_steps_run() {
        let cfg = TrainConfig {
            model_kind: ModelKind::Dnm12,
            ..short_cfg()
        };
        let source = CycleSource::new(alloc::vec![quick_scene(6)]).unwrap();
        let mut trainer = Trainer::new(cfg, source).unwrap();
        trainer.run_epoch().unwrap();
        assert_eq!(trainer.history().len(), 4);
        match &trainer.history()[0].breakdown.scales[0] {
            crate::loss::ScaleComponents::Twelve(_) => {}
            other => panic!("expected twelve components, got {other:?}"),
        }
    }

    #[test]
    fn with_model_resumes_and_checks_kind() {
        let cfg = short_cfg();
        let source = CycleSource::new(alloc::vec![quick_scene(8)]).unwrap();
        let mut first = Trainer::new(cfg, source).unwrap();
        first.step().unwrap();
        let model = first.into_model();

        // Continuing from the trained weights works...
        let source = CycleSource::new(alloc::vec![quick_scene(8)]).unwrap();
        let mut resumed = Trainer::with_model(cfg, source, model.clone()).unwrap();
        resumed.step().unwrap();
        assert_eq!(resumed.steps_done(), 1);

        // ...but a kind mismatch is rejected.
        let source = CycleSource::new(alloc::vec![quick_scene(8)]).unwrap();
        let wrong = TrainConfig {
            model_kind: ModelKind::Dnm12,
            ..cfg
        };
        assert!(matches!(
            Trainer::with_model(wrong, source, model),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn smoothness_only_training_flattens_disparity() {
        // With only the smoothness term active the predictions drift toward
        // spatial constancy on a fixed batch.
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 40,
            batch_size: 1,
            weights: LossWeights {
                alpha_ap: 0.0,
                alpha_lr: 0.0,
                ..LossWeights::default()
            },
            augment_photometric: false,
            augment_flip: false,
            ..TrainConfig::default()
        };
        let sample = quick_scene(7);
        let source = CycleSource::new(alloc::vec![sample.clone()]).unwrap();
        let mut trainer = Trainer::new(cfg, source).unwrap();

        let roughness = |model: &DualModel| {
            let pred = predict_disparity(model, sample.left.tensor(), View::Left).unwrap();
            let mut tape = Tape::new();
            let d = tape.leaf(pred.into_tensor());
            let gx = tape.grad_x(d).unwrap();
            let a = tape.abs(gx).unwrap();
            let m = tape.mean_all(a).unwrap();
            tape.scalar(m).unwrap()
        };

        let mut values = alloc::vec![roughness(trainer.model())];
        for _ in 0..cfg.steps_per_epoch {
            trainer.step().unwrap();
            values.push(roughness(trainer.model()));
        }
        let violations = values
            .windows(2)
            .filter(|pair| pair[1] >= pair[0])
            .count();
        let allowed = values.len() / 20; // 5 percent non-monotone steps
        assert!(
            violations <= allowed.max(1),
            "{violations} non-monotone steps out of {}",
            values.len() - 1
        );
        assert!(values.last().unwrap() < values.first().unwrap());
    }
}
