//! Scene sets on disk: `sample_NNNN_left.ppm`, `sample_NNNN_right.ppm` and
//! optionally `sample_NNNN_gt.disp.pfm` (ground-truth disparity in pixels).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use dnm_core::scene::StereoSample;
use dnm_core::stereo::Disparity;
use dnm_core::tensor::Tensor;

use crate::pfm::{self, FloatMap};
use crate::pnm;

#[derive(Debug)]
pub enum DatasetError {
    Io(PathBuf, std::io::Error),
    Format(PathBuf, String),
    Empty(PathBuf),
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            DatasetError::Format(p, msg) => write!(f, "{}: {msg}", p.display()),
            DatasetError::Empty(p) => {
                write!(f, "{}: no sample_*_left.ppm files found", p.display())
            }
        }
    }
}

impl std::error::Error for DatasetError {}

fn left_name(index: usize) -> String {
    format!("sample_{index:04}_left.ppm")
}

fn right_name(index: usize) -> String {
    format!("sample_{index:04}_right.ppm")
}

fn gt_name(index: usize) -> String {
    format!("sample_{index:04}_gt.disp.pfm")
}

/// Write one sample; ground truth, when present, is stored in pixels.
pub fn save_sample(dir: &Path, index: usize, sample: &StereoSample) -> Result<(), DatasetError> {
    let write_img = |name: String, img| {
        let path = dir.join(name);
        pnm::save_image(img, &path).map_err(|e| DatasetError::Format(path, format!("{e}")))
    };
    write_img(left_name(index), &sample.left)?;
    write_img(right_name(index), &sample.right)?;
    if let Some(gt) = &sample.gt_disp {
        let px = gt.to_pixels();
        let (_, _, h, w) = px.dims4().expect("disparity is rank 4");
        let values: Vec<f32> = px.values().iter().map(|&v| v as f32).collect();
        let map = FloatMap::new(w, h, values)
            .map_err(|e| DatasetError::Format(dir.join(gt_name(index)), format!("{e}")))?;
        let path = dir.join(gt_name(index));
        pfm::save_pfm(&map, &path).map_err(|e| DatasetError::Format(path, format!("{e}")))?;
    }
    Ok(())
}

/// Load every sample in index order. Ground truth is attached when its file
/// exists; `require_gt` turns a missing map into an error.
pub fn load_dataset(dir: &Path, require_gt: bool) -> Result<Vec<StereoSample>, DatasetError> {
    let entries =
        fs::read_dir(dir).map_err(|e| DatasetError::Io(dir.to_path_buf(), e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DatasetError::Io(dir.to_path_buf(), e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name
            .strip_prefix("sample_")
            .and_then(|r| r.strip_suffix("_left.ppm"))
        {
            if let Ok(idx) = rest.parse::<usize>() {
                indices.push(idx);
            }
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(DatasetError::Empty(dir.to_path_buf()));
    }

    let mut samples = Vec::with_capacity(indices.len());
    for idx in indices {
        let left_path = dir.join(left_name(idx));
        let right_path = dir.join(right_name(idx));
        let left = pnm::load_image(&left_path)
            .map_err(|e| DatasetError::Format(left_path.clone(), format!("{e}")))?;
        let right = pnm::load_image(&right_path)
            .map_err(|e| DatasetError::Format(right_path.clone(), format!("{e}")))?;

        let gt_path = dir.join(gt_name(idx));
        let gt_disp = if gt_path.exists() {
            let map = pfm::load_pfm(&gt_path)
                .map_err(|e| DatasetError::Format(gt_path.clone(), format!("{e}")))?;
            let w = map.width;
            let values: Vec<f64> = map
                .values
                .iter()
                .map(|&v| v as f64 / w as f64) // pixels on disk, width fractions in memory
                .collect();
            let tensor = Tensor::new(&[1, 1, map.height, map.width], values)
                .map_err(|e| DatasetError::Format(gt_path.clone(), format!("{e}")))?;
            Some(
                Disparity::new(tensor)
                    .map_err(|e| DatasetError::Format(gt_path.clone(), format!("{e}")))?,
            )
        } else if require_gt {
            return Err(DatasetError::Format(
                gt_path,
                String::from("missing ground-truth disparity"),
            ));
        } else {
            None
        };
        samples.push(StereoSample {
            left,
            right,
            gt_disp,
            rig: None,
        });
    }
    Ok(samples)
}
