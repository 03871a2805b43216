//! File formats and reporting around `dnm-core`: binary PPM/PGM images,
//! grayscale PFM float maps, the JSON training configuration, scene-set
//! directory layout and CSV reports. The `dnm` binary drives these.

pub mod config;
pub mod dataset;
pub mod pfm;
pub mod pnm;
pub mod report;
