//! `dnm` — synthetic-stereo training and evaluation of dual-network
//! unsupervised depth estimation.
//!
//! Subcommands: `synth` (generate a scene set), `train` (config to
//! checkpoints plus a loss CSV), `infer` (checkpoint plus image to a
//! `.disp.pfm`), `eval` (checkpoint plus ground-truth set to a metrics CSV)
//! and `gradcheck` (the finite-difference verification suite).
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use dnm_cli::{config, dataset, pfm, pnm, report};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use dnm_core::checkpoint::{decode_model, encode_model};
use dnm_core::error::Error as CoreError;
use dnm_core::eval::{evaluate_set, CameraRig, EvalOptions, DEFAULT_MIN_DISP_PX};
use dnm_core::gradsuite;
use dnm_core::net::{predict_disparity_channel, DispChannel, DualModel, ModelKind, View};
use dnm_core::rng::derive_seed;
use dnm_core::scene::{generate_scene, DisparityProfile, SceneSpec, TextureKind};
use dnm_core::train::{CycleSource, Trainer};

use dnm_cli::pfm::FloatMap;

const USAGE: &str = "usage: dnm <subcommand> [flags]

subcommands:
  synth      --out DIR [--count N] [--width W] [--height H] [--channels C]
             [--profile constant|two-plane|slanted] [--disp PX | --disp A,B]
             [--texture smoothed-noise|random-noise|checkers] [--seed S]
  train      --config FILE.json --data DIR --out DIR
  infer      --checkpoint FILE --image FILE.ppm --out FILE.disp.pfm
             [--pp] [--view left|right] [--channel same|cross]
  eval       --checkpoint FILE --data DIR --out FILE.csv [--pp]
             [--view left|right] [--channel same|cross]
             [--focal PX] [--baseline M] [--min-disp PX] [--method NAME]
             (or --pred DIR to evaluate exported .disp.pfm predictions)
  gradcheck  (no flags; prints per-op max gradient errors)";

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

fn core_error(e: CoreError) -> CliError {
    match e {
        CoreError::NonFinite { .. }
        | CoreError::NonFiniteGradient { .. }
        | CoreError::NonFiniteLoss { .. } => CliError::Numerical(format!("{e}")),
        other => CliError::Data(format!("{other}")),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dnm: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(args: &[String]) -> Result<(), CliError> {
    let Some(cmd) = args.first() else {
        return Err(CliError::Usage(format!("missing subcommand\n{USAGE}")));
    };
    let rest = &args[1..];
    match cmd.as_str() {
        "synth" => cmd_synth(rest),
        "train" => cmd_train(rest),
        "infer" => cmd_infer(rest),
        "eval" => cmd_eval(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!(
            "unknown subcommand {other:?}\n{USAGE}"
        ))),
    }
}

/// Minimal flag parser: `--name value` pairs plus boolean `--name` switches.
fn parse_flags(
    args: &[String],
    valued: &[&str],
    switches: &[&str],
) -> Result<HashMap<String, String>, CliError> {
    let mut out = HashMap::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument {arg:?}")));
        };
        if switches.contains(&name) {
            out.insert(name.to_string(), String::from("true"));
        } else if valued.contains(&name) {
            let value = it.next().ok_or_else(|| {
                CliError::Usage(format!("flag --{name} expects a value"))
            })?;
            out.insert(name.to_string(), value.clone());
        } else {
            return Err(CliError::Usage(format!("unknown flag --{name}")));
        }
    }
    Ok(out)
}

fn required<'a>(flags: &'a HashMap<String, String>, name: &str) -> Result<&'a str, CliError> {
    flags
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| CliError::Usage(format!("missing required flag --{name}")))
}

fn parse_number<T: std::str::FromStr>(value: &str, name: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("flag --{name}: cannot parse {value:?}")))
}

fn parse_view(flags: &HashMap<String, String>) -> Result<View, CliError> {
    match flags.get("view").map(String::as_str) {
        None | Some("left") => Ok(View::Left),
        Some("right") => Ok(View::Right),
        Some(other) => Err(CliError::Usage(format!(
            "flag --view: expected left or right, got {other:?}"
        ))),
    }
}

fn parse_channel(flags: &HashMap<String, String>) -> Result<DispChannel, CliError> {
    match flags.get("channel").map(String::as_str) {
        None | Some("same") => Ok(DispChannel::SameView),
        Some("cross") => Ok(DispChannel::CrossView),
        Some(other) => Err(CliError::Usage(format!(
            "flag --channel: expected same or cross, got {other:?}"
        ))),
    }
}

// ---- synth -----------------------------------------------------------------

fn cmd_synth(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(
        args,
        &[
            "out", "count", "width", "height", "channels", "profile", "disp", "texture", "seed",
        ],
        &[],
    )?;
    let out_dir = PathBuf::from(required(&flags, "out")?);
    let count: usize = match flags.get("count") {
        Some(v) => parse_number(v, "count")?,
        None => 8,
    };
    let width: usize = match flags.get("width") {
        Some(v) => parse_number(v, "width")?,
        None => 128,
    };
    let height: usize = match flags.get("height") {
        Some(v) => parse_number(v, "height")?,
        None => 64,
    };
    let channels: usize = match flags.get("channels") {
        Some(v) => parse_number(v, "channels")?,
        None => 3,
    };
    let seed: u64 = match flags.get("seed") {
        Some(v) => parse_number(v, "seed")?,
        None => 0,
    };
    let disp = flags.get("disp").map(String::as_str).unwrap_or("4.0");
    let parts: Vec<f64> = disp
        .split(',')
        .map(|p| parse_number(p.trim(), "disp"))
        .collect::<Result<_, _>>()?;
    let pair = |name: &str| -> Result<(f64, f64), CliError> {
        match parts.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(CliError::Usage(format!(
                "profile {name} expects --disp A,B"
            ))),
        }
    };
    let profile = match flags.get("profile").map(String::as_str) {
        None | Some("constant") => {
            if parts.len() != 1 {
                return Err(CliError::Usage(String::from(
                    "profile constant expects a single --disp value",
                )));
            }
            DisparityProfile::Constant { px: parts[0] }
        }
        Some("two-plane") => {
            let (left_px, right_px) = pair("two-plane")?;
            DisparityProfile::TwoPlane { left_px, right_px }
        }
        Some("slanted") => {
            let (start_px, end_px) = pair("slanted")?;
            DisparityProfile::Slanted { start_px, end_px }
        }
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown profile {other:?}, expected constant, two-plane or slanted"
            )))
        }
    };
    let texture = match flags.get("texture").map(String::as_str) {
        None | Some("smoothed-noise") => TextureKind::SmoothedNoise,
        Some("random-noise") => TextureKind::RandomNoise,
        Some("checkers") => TextureKind::Checkers,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown texture {other:?}, expected smoothed-noise, random-noise or checkers"
            )))
        }
    };

    fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
    for k in 0..count {
        let spec = SceneSpec {
            profile,
            texture,
            width,
            height,
            channels,
            seed: derive_seed(seed, k as u64),
        };
        let sample = generate_scene(&spec).map_err(core_error)?;
        dataset::save_sample(&out_dir, k, &sample)
            .map_err(|e| CliError::Data(format!("{e}")))?;
    }
    println!("wrote {count} samples to {}", out_dir.display());
    Ok(())
}

// ---- train -----------------------------------------------------------------

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(args, &["config", "data", "out"], &[])?;
    let config_path = PathBuf::from(required(&flags, "config")?);
    let data_dir = PathBuf::from(required(&flags, "data")?);
    let out_dir = PathBuf::from(required(&flags, "out")?);

    let config_text =
        fs::read_to_string(&config_path).map_err(|e| io_error(&config_path, e))?;
    let cfg = config::parse_train_config(&config_text)
        .map_err(|e| CliError::Data(format!("{}: {e}", config_path.display())))?;

    let samples =
        dataset::load_dataset(&data_dir, false).map_err(|e| CliError::Data(format!("{e}")))?;
    let sample_count = samples.len();
    let source = CycleSource::new(samples).map_err(core_error)?;
    let mut trainer = Trainer::new(cfg, source).map_err(core_error)?;

    fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
    let write_checkpoint = |name: String, model: &DualModel| -> Result<(), CliError> {
        let path = out_dir.join(name);
        fs::write(&path, encode_model(model)).map_err(|e| io_error(&path, e))
    };
    let write_history = |trainer: &Trainer<CycleSource>| -> Result<(), CliError> {
        let path = out_dir.join("loss.csv");
        let csv = report::loss_history_csv(cfg.model_kind, trainer.history());
        fs::write(&path, csv).map_err(|e| io_error(&path, e))
    };

    write_checkpoint(String::from("init.dnmc"), trainer.model())?;
    for epoch in 0..cfg.epochs {
        if let Err(e) = trainer.run_epoch() {
            // Keep what we have: checkpoints already on disk plus the loss
            // history up to the failing step.
            write_history(&trainer)?;
            return Err(core_error(e));
        }
        write_checkpoint(format!("epoch_{:04}.dnmc", epoch + 1), trainer.model())?;
    }
    write_checkpoint(String::from("final.dnmc"), trainer.model())?;
    write_history(&trainer)?;
    println!(
        "trained {:?} for {} epochs x {} steps on {} samples; checkpoints and loss.csv in {}",
        cfg.model_kind,
        cfg.epochs,
        cfg.steps_per_epoch,
        sample_count,
        out_dir.display()
    );
    Ok(())
}

// ---- infer -----------------------------------------------------------------

fn load_checkpoint(path: &Path) -> Result<DualModel, CliError> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    decode_model(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_infer(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(
        args,
        &["checkpoint", "image", "out", "view", "channel"],
        &["pp"],
    )?;
    let ckpt_path = PathBuf::from(required(&flags, "checkpoint")?);
    let image_path = PathBuf::from(required(&flags, "image")?);
    let out_path = PathBuf::from(required(&flags, "out")?);
    let view = parse_view(&flags)?;
    let channel = parse_channel(&flags)?;
    let use_pp = flags.contains_key("pp");

    let model = load_checkpoint(&ckpt_path)?;
    let image = pnm::load_image(&image_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", image_path.display())))?;

    let disp = if use_pp {
        dnm_core::eval::post_process(&model, &image, view, channel).map_err(core_error)?
    } else {
        predict_disparity_channel(&model, image.tensor(), view, channel).map_err(core_error)?
    };
    let px = disp.to_pixels();
    let (_, _, h, w) = px.dims4().map_err(core_error)?;
    let values: Vec<f32> = px.values().iter().map(|&v| v as f32).collect();
    let map = FloatMap::new(w, h, values).map_err(|e| CliError::Data(format!("{e}")))?;
    pfm::save_pfm(&map, &out_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_path.display())))?;
    println!("wrote {}", out_path.display());
    Ok(())
}

// ---- eval ------------------------------------------------------------------

/// Width-fraction disparity maps from `*.disp.pfm` files (pixels on disk),
/// sorted by file name.
fn load_prediction_dir(dir: &Path) -> Result<Vec<dnm_core::stereo::Disparity>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().ends_with(".disp.pfm"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no .disp.pfm files found",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let map = pfm::load_pfm(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let values: Vec<f64> = map
            .values
            .iter()
            .map(|&v| v as f64 / map.width as f64)
            .collect();
        let tensor = dnm_core::tensor::Tensor::new(&[1, 1, map.height, map.width], values)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        out.push(
            dnm_core::stereo::Disparity::new(tensor)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        );
    }
    Ok(out)
}

fn cmd_eval(args: &[String]) -> Result<(), CliError> {
    let flags = parse_flags(
        args,
        &[
            "checkpoint",
            "data",
            "pred",
            "out",
            "view",
            "channel",
            "focal",
            "baseline",
            "min-disp",
            "method",
        ],
        &["pp"],
    )?;
    let data_dir = PathBuf::from(required(&flags, "data")?);
    let out_path = PathBuf::from(required(&flags, "out")?);
    let view = parse_view(&flags)?;
    let channel = parse_channel(&flags)?;
    let use_pp = flags.contains_key("pp");
    let focal: f64 = match flags.get("focal") {
        Some(v) => parse_number(v, "focal")?,
        None => 100.0,
    };
    let baseline: f64 = match flags.get("baseline") {
        Some(v) => parse_number(v, "baseline")?,
        None => 0.5,
    };
    let min_disp_px: f64 = match flags.get("min-disp") {
        Some(v) => parse_number(v, "min-disp")?,
        None => DEFAULT_MIN_DISP_PX,
    };

    let samples =
        dataset::load_dataset(&data_dir, true).map_err(|e| CliError::Data(format!("{e}")))?;
    let rig = CameraRig::new(focal, baseline)
        .map_err(|e| CliError::Usage(format!("{e}")))?;

    let (outcome, default_method) = match flags.get("pred") {
        Some(pred_dir) => {
            // Evaluate exported prediction files instead of a checkpoint.
            let preds = load_prediction_dir(Path::new(pred_dir))?;
            let outcome = dnm_core::eval::evaluate_predictions(
                &preds,
                &samples,
                &rig,
                min_disp_px,
            )
            .map_err(core_error)?;
            (outcome, String::from("pred"))
        }
        None => {
            let ckpt_path = PathBuf::from(required(&flags, "checkpoint")?);
            let model = load_checkpoint(&ckpt_path)?;
            let opts = EvalOptions {
                use_pp,
                view,
                channel,
                min_disp_px,
            };
            let outcome = evaluate_set(&model, &samples, &rig, &opts).map_err(core_error)?;
            let base = match model.kind {
                ModelKind::Dnm6 => "dnm6",
                ModelKind::Dnm12 => "dnm12",
            };
            let name = if use_pp {
                format!("{base}+pp")
            } else {
                String::from(base)
            };
            (outcome, name)
        }
    };

    let method = flags.get("method").cloned().unwrap_or(default_method);
    let csv = report::metrics_csv(&[(method, outcome.aggregate)]);
    fs::write(&out_path, &csv).map_err(|e| io_error(&out_path, e))?;
    print!("{csv}");
    Ok(())
}

// ---- gradcheck ---------------------------------------------------------------

fn cmd_gradcheck(args: &[String]) -> Result<(), CliError> {
    parse_flags(args, &[], &[])?;
    let reports = gradsuite::run_suite()
        .map_err(|e| CliError::Numerical(format!("gradient suite aborted: {e}")))?;
    print!("{}", gradsuite::format_reports(&reports));
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!(
            "{failed} gradient check(s) exceeded tolerance"
        )));
    }
    Ok(())
}
