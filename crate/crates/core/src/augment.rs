//! Label-preserving augmentation of (tile, instance map, class map) triples:
//! mirrors, quarter-turn rotations, resizing and stain normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_maps::{ClassMap, InstanceMap};
use crate::raster::{Orientation, RgbImage};
use crate::stain_norm::{normalize_to_reference, MacenkoParams, StainModel};
use crate::DEFAULT_SCALES;

/// A tile with its instance and class maps, all the same size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub instances: InstanceMap,
    pub classes: ClassMap,
}

impl Sample {
    pub fn new(image: RgbImage, instances: InstanceMap, classes: ClassMap) -> Result<Self> {
        if image.dims() != instances.dims() || image.dims() != classes.dims() {
            return Err(Error::Dimension(format!(
                "sample layers differ in size: image {:?}, instances {:?}, classes {:?}",
                image.dims(),
                instances.dims(),
                classes.dims()
            )));
        }
        Ok(Sample {
            image,
            instances,
            classes,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Clockwise quarter turns, `0..=3`.
    pub rot90_quarter_turns: u8,
    /// Square output side; `None` keeps the input size.
    pub target_size: Option<usize>,
    pub stain_normalize: bool,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rot90_quarter_turns > 3 {
            return Err(Error::Config(format!(
                "quarter turns must be 0..=3, got {}",
                self.rot90_quarter_turns
            )));
        }
        if self.target_size == Some(0) {
            return Err(Error::Config("target size must be positive".into()));
        }
        Ok(())
    }

    pub fn orientation(&self) -> Orientation {
        Orientation {
            flip_h: self.flip_h,
            flip_v: self.flip_v,
            quarter_turns: self.rot90_quarter_turns,
        }
    }

    /// Output file stem: `<stem>__f<h|v|hv|n>r<k>s<size>[_sn]`. `size` is the
    /// output width and `_sn` marks an image that was actually normalized.
    pub fn file_stem(&self, stem: &str, output_width: usize, normalized: bool) -> String {
        let flips = match (self.flip_h, self.flip_v) {
            (false, false) => "n",
            (true, false) => "h",
            (false, true) => "v",
            (true, true) => "hv",
        };
        let sn = if normalized { "_sn" } else { "" };
        format!(
            "{stem}__f{flips}r{}s{output_width}{sn}",
            self.rot90_quarter_turns
        )
    }
}

/// Per-operation probabilities for [`sample_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    /// Chance of a non-trivial rotation; the turn count is then uniform in 1..=3.
    pub p_rotate: f64,
    /// Chance of resizing to a size drawn uniformly from `sizes`.
    pub p_resize: f64,
    pub sizes: Vec<usize>,
    pub p_stain_normalize: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            p_rotate: 0.5,
            p_resize: 0.0,
            sizes: DEFAULT_SCALES.to_vec(),
            p_stain_normalize: 0.0,
        }
    }
}

impl AugmentPolicy {
    /// Every probability zero.
    pub fn never() -> Self {
        AugmentPolicy {
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            p_rotate: 0.0,
            p_resize: 0.0,
            sizes: DEFAULT_SCALES.to_vec(),
            p_stain_normalize: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_flip_h", self.p_flip_h),
            ("p_flip_v", self.p_flip_v),
            ("p_rotate", self.p_rotate),
            ("p_resize", self.p_resize),
            ("p_stain_normalize", self.p_stain_normalize),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.p_resize > 0.0 && (self.sizes.is_empty() || self.sizes.contains(&0)) {
            return Err(Error::Config("resize needs a non-empty list of positive sizes".into()));
        }
        Ok(())
    }
}

/// Generator for the random stream `stream` under `seed`. ChaCha streams are
/// independent, so draws for one sample never depend on how many other
/// samples were processed first.
pub fn keyed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a spec for stream `stream` of `seed`. Every draw is made even when
/// unused, so changing one probability never shifts the others.
pub fn sample_spec(seed: u64, stream: u64, policy: &AugmentPolicy) -> AugmentSpec {
    let mut rng = keyed_rng(seed, stream);
    let flip_h = rng.random::<f64>() < policy.p_flip_h;
    let flip_v = rng.random::<f64>() < policy.p_flip_v;
    let rotate = rng.random::<f64>() < policy.p_rotate;
    let turns: u8 = rng.random_range(1..=3);
    let resize = rng.random::<f64>() < policy.p_resize;
    let size_pick = rng.random::<u64>();
    let stain = rng.random::<f64>() < policy.p_stain_normalize;
    AugmentSpec {
        flip_h,
        flip_v,
        rot90_quarter_turns: if rotate { turns } else { 0 },
        target_size: (resize && !policy.sizes.is_empty())
            .then(|| policy.sizes[(size_pick % policy.sizes.len() as u64) as usize]),
        stain_normalize: stain,
    }
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub sample: Sample,
    /// False when normalization was requested but skipped.
    pub stain_normalized: bool,
    pub warnings: Vec<String>,
}

/// Applies `spec` to all three layers. Stain normalization touches only the
/// image and is skipped (with a warning) on tiles without enough tissue.
pub fn apply(
    sample: &Sample,
    spec: &AugmentSpec,
    reference_stain: Option<&StainModel>,
    params: &MacenkoParams,
) -> Result<Augmented> {
    spec.validate()?;
    let mut warnings = Vec::new();
    let mut image = sample.image.clone();
    let mut stain_normalized = false;
    if spec.stain_normalize {
        let reference = reference_stain
            .ok_or_else(|| Error::Config("stain normalization requested without a reference".into()))?;
        match normalize_to_reference(&image, params, reference) {
            Ok(n) => {
                image = n;
                stain_normalized = true;
            }
            Err(e @ (Error::InsufficientTissue { .. } | Error::DegenerateStain(_))) => {
                log::warn!("stain normalization skipped: {e}");
                warnings.push(format!("stain normalization skipped: {e}"));
            }
            Err(e) => return Err(e),
        }
    }

    let o = spec.orientation();
    let mut image = o.apply(&image);
    let mut instances = sample.instances.orient(o);
    let mut classes = sample.classes.orient(o);
    if let Some(side) = spec.target_size {
        image = image.resize_bilinear(side, side)?;
        instances = instances.resize_nearest(side, side)?;
        classes = classes.resize_nearest(side, side)?;
    }
    Ok(Augmented {
        sample: Sample::new(image, instances, classes)?,
        stain_normalized,
        warnings,
    })
}
