//! JSON training configuration: exactly the `TrainConfig` fields, unknown
//! keys rejected. Every field has a default, so `{}` is a valid file.

use serde::Deserialize;

use dnm_core::loss::{LossWeights, SmoothnessWeightSource};
use dnm_core::net::ModelKind;
use dnm_core::train::TrainConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    #[serde(default = "d_alpha")]
    alpha: f64,
    #[serde(default = "d_alpha_ap")]
    alpha_ap: f64,
    #[serde(default = "d_alpha_ds")]
    alpha_ds: f64,
    #[serde(default = "d_alpha_lr")]
    alpha_lr: f64,
}

fn d_alpha() -> f64 {
    0.85
}
fn d_alpha_ap() -> f64 {
    1.0
}
fn d_alpha_ds() -> f64 {
    0.1
}
fn d_alpha_lr() -> f64 {
    1.0
}

impl Default for WeightsFile {
    fn default() -> Self {
        WeightsFile {
            alpha: d_alpha(),
            alpha_ap: d_alpha_ap(),
            alpha_ds: d_alpha_ds(),
            alpha_lr: d_alpha_lr(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default = "d_model_kind")]
    model_kind: String,
    #[serde(default = "d_epochs")]
    epochs: usize,
    #[serde(default = "d_steps_per_epoch")]
    steps_per_epoch: usize,
    #[serde(default = "d_batch_size")]
    batch_size: usize,
    #[serde(default)]
    weights: WeightsFile,
    #[serde(default = "d_lr1")]
    lr_phase1: f64,
    #[serde(default = "d_lr2")]
    lr_phase2: f64,
    #[serde(default = "d_lr3")]
    lr_phase3: f64,
    #[serde(default = "d_boundary1")]
    phase_boundary1: usize,
    #[serde(default = "d_boundary2")]
    phase_boundary2: usize,
    #[serde(default = "d_true")]
    augment_photometric: bool,
    #[serde(default = "d_true")]
    augment_flip: bool,
    #[serde(default = "d_sws")]
    smoothness_weight_source: String,
    #[serde(default)]
    seed: u64,
}

fn d_model_kind() -> String {
    String::from("dnm6")
}
fn d_epochs() -> usize {
    50
}
fn d_steps_per_epoch() -> usize {
    100
}
fn d_batch_size() -> usize {
    2
}
fn d_lr1() -> f64 {
    1e-4
}
fn d_lr2() -> f64 {
    0.5e-4
}
fn d_lr3() -> f64 {
    0.25e-4
}
fn d_boundary1() -> usize {
    30
}
fn d_boundary2() -> usize {
    40
}
fn d_true() -> bool {
    true
}
fn d_sws() -> String {
    String::from("network-input")
}

/// Parse and validate a JSON training configuration.
pub fn parse_train_config(text: &str) -> Result<TrainConfig, String> {
    let file: ConfigFile =
        serde_json::from_str(text).map_err(|e| format!("config parse error: {e}"))?;
    let model_kind = match file.model_kind.as_str() {
        "dnm6" => ModelKind::Dnm6,
        "dnm12" => ModelKind::Dnm12,
        other => return Err(format!("model_kind must be dnm6 or dnm12, got {other:?}")),
    };
    let smoothness_weight_source = match file.smoothness_weight_source.as_str() {
        "network-input" => SmoothnessWeightSource::NetworkInput,
        "disparity-view" => SmoothnessWeightSource::DisparityView,
        other => {
            return Err(format!(
                "smoothness_weight_source must be network-input or disparity-view, got {other:?}"
            ))
        }
    };
    let cfg = TrainConfig {
        model_kind,
        epochs: file.epochs,
        steps_per_epoch: file.steps_per_epoch,
        batch_size: file.batch_size,
        weights: LossWeights {
            alpha: file.weights.alpha,
            alpha_ap: file.weights.alpha_ap,
            alpha_ds: file.weights.alpha_ds,
            alpha_lr: file.weights.alpha_lr,
        },
        lr_phase1: file.lr_phase1,
        lr_phase2: file.lr_phase2,
        lr_phase3: file.lr_phase3,
        phase_boundary1: file.phase_boundary1,
        phase_boundary2: file.phase_boundary2,
        augment_photometric: file.augment_photometric,
        augment_flip: file.augment_flip,
        smoothness_weight_source,
        seed: file.seed,
    };
    cfg.validate().map_err(|e| format!("{e}"))?;
    Ok(cfg)
}
