//! Non-neural building blocks for nuclei segmentation and counting
//! pipelines on H&E tiles: Macenko stain normalization, label-preserving
//! augmentation, stratified dataset splits, multi-scale instance fusion, and
//! panoptic-quality / R² evaluation.
//!
//! Per-pixel and per-sample work runs on rayon when the `parallel` feature
//! is enabled (the default) and sequentially otherwise; outputs are
//! identical in both modes.

pub mod augment;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod label_maps;
pub mod metrics;
pub mod par;
pub mod raster;
pub mod stain_norm;

pub use error::{Error, Result};
pub use label_maps::{ClassMap, Composition, InstanceMap, NucleusClass};
pub use raster::{Orientation, Raster, RgbImage};

/// The five square input sizes the fusion stage expects by default.
pub const DEFAULT_SCALES: [usize; 5] = [256, 512, 800, 1024, 1152];

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
