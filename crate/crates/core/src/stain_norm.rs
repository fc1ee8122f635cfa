//! Macenko stain estimation and normalization for H&E tiles.
//!
//! Intensities are mapped to optical density (OD), where the two stains mix
//! linearly: `od = S · c` with `S` a 3×2 matrix of unit stain directions.
//! `S` is estimated from the robust angular extremes of tissue OD vectors
//! projected on their principal plane, concentrations are recovered by
//! per-pixel least squares, and a tile is normalized by swapping its stain
//! matrix and concentration scale for a reference one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::par;
use crate::raster::{Raster, RgbImage};

pub type OdImage = Raster<[f64; 3]>;

/// Per-pixel `(haematoxylin, eosin)` concentrations.
pub type ConcentrationMap = Raster<[f64; 2]>;

/// Smallest angle accepted between the two stain columns.
pub const MIN_STAIN_ANGLE_DEG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacenkoParams {
    /// Transmitted-light intensity.
    pub io: f64,
    /// Pixels with OD below this in any channel are treated as background.
    pub beta: f64,
    /// Robust angle percentile, in percent.
    pub alpha: f64,
    /// Concentration percentile used as the per-stain scale, in percent.
    pub max_c_percentile: f64,
    pub min_tissue_pixels: usize,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        MacenkoParams {
            io: 255.0,
            beta: 0.15,
            alpha: 1.0,
            max_c_percentile: 99.0,
            min_tissue_pixels: 100,
        }
    }
}

impl MacenkoParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.io > 0.0 && self.io.is_finite()) {
            return bad(format!("io must be positive, got {}", self.io));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.alpha > 0.0 && self.alpha < 50.0) {
            return bad(format!("alpha must be in (0, 50), got {}", self.alpha));
        }
        if !(self.max_c_percentile > 50.0 && self.max_c_percentile <= 100.0) {
            return bad(format!(
                "max_c_percentile must be in (50, 100], got {}",
                self.max_c_percentile
            ));
        }
        Ok(())
    }
}

/// Stain directions in OD space plus the per-stain concentration scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainModel {
    /// Rows are R, G, B; column 0 is haematoxylin, column 1 eosin.
    pub stain_matrix: [[f64; 2]; 3],
    pub max_concentrations: [f64; 2],
}

impl StainModel {
    /// Builds a model from two stain directions, normalizing each to unit
    /// length.
    pub fn new(h: [f64; 3], e: [f64; 3], max_concentrations: [f64; 2]) -> Result<Self> {
        let h = unit(h).ok_or_else(|| Error::DegenerateStain("zero haematoxylin vector".into()))?;
        let e = unit(e).ok_or_else(|| Error::DegenerateStain("zero eosin vector".into()))?;
        let m = StainModel {
            stain_matrix: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
            max_concentrations,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn haematoxylin(&self) -> [f64; 3] {
        self.column(0)
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.column(1)
    }

    fn column(&self, j: usize) -> [f64; 3] {
        [self.stain_matrix[0][j], self.stain_matrix[1][j], self.stain_matrix[2][j]]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.stain_matrix.iter().flatten().chain(&self.max_concentrations);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateStain("non-finite entry".into()));
        }
        for (name, col) in [("haematoxylin", self.haematoxylin()), ("eosin", self.eosin())] {
            if col.iter().any(|&v| v < 0.0) {
                return Err(Error::DegenerateStain(format!("{name} column has a negative entry")));
            }
            if (norm(col) - 1.0).abs() > 1e-6 {
                return Err(Error::DegenerateStain(format!("{name} column is not unit length")));
            }
        }
        let angle = angle_deg(self.haematoxylin(), self.eosin());
        if angle <= MIN_STAIN_ANGLE_DEG {
            return Err(Error::DegenerateStain(format!(
                "stain columns are {angle:.3}° apart"
            )));
        }
        if self.max_concentrations.iter().any(|&c| c <= 0.0) {
            return Err(Error::DegenerateStain("max concentrations must be positive".into()));
        }
        Ok(())
    }

    /// Maps a concentration pair to OD.
    #[inline]
    pub fn mix(&self, c: [f64; 2]) -> [f64; 3] {
        let s = &self.stain_matrix;
        [
            s[0][0] * c[0] + s[0][1] * c[1],
            s[1][0] * c[0] + s[1][1] * c[1],
            s[2][0] * c[0] + s[2][1] * c[1],
        ]
    }

    /// Least-squares projector `(SᵀS)⁻¹Sᵀ`, 2×3.
    fn pseudo_inverse(&self) -> [[f64; 3]; 2] {
        let (h, e) = (self.haematoxylin(), self.eosin());
        let (hh, he, ee) = (dot(h, h), dot(h, e), dot(e, e));
        let det = hh * ee - he * he;
        let mut p = [[0.0; 3]; 2];
        for k in 0..3 {
            p[0][k] = (ee * h[k] - he * e[k]) / det;
            p[1][k] = (hh * e[k] - he * h[k]) / det;
        }
        p
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: StainModel = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

/// `od = −log10(max(I, 1) / io)` per channel.
pub fn rgb_to_od(img: &RgbImage, io: f64) -> OdImage {
    let lut: Vec<f64> = (0..=255u16).map(|v| -((v.max(1) as f64) / io).log10()).collect();
    let data = par::map(img.as_slice(), |p| [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]]);
    Raster::from_vec(img.width(), img.height(), data).expect("same dimensions")
}

/// `I = io · 10^(−od)`, rounded and clamped to 8 bits.
pub fn od_to_rgb(od: &OdImage, io: f64) -> RgbImage {
    let data = par::map(od.as_slice(), |v| v.map(|d| od_to_intensity(d, io)));
    Raster::from_vec(od.width(), od.height(), data).expect("same dimensions")
}

#[inline]
fn od_to_intensity(od: f64, io: f64) -> u8 {
    let v = io * 10f64.powf(-od);
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Estimates the stain model of a tile.
pub fn estimate_stain_model(img: &RgbImage, p: &MacenkoParams) -> Result<StainModel> {
    p.validate()?;
    let od = rgb_to_od(img, p.io);
    let tissue: Vec<[f64; 3]> = od
        .as_slice()
        .iter()
        .copied()
        .filter(|v| v.iter().all(|&c| c >= p.beta))
        .collect();
    if tissue.len() < p.min_tissue_pixels.max(2) {
        return Err(Error::InsufficientTissue {
            found: tissue.len(),
            required: p.min_tissue_pixels.max(2),
        });
    }

    let cov = covariance(&tissue);
    let (values, vectors) = symmetric_eigen3(cov);
    let scale = values[0].abs().max(f64::MIN_POSITIVE);
    if values[1] <= 1e-12 * scale {
        return Err(Error::DegenerateStain(format!(
            "OD covariance has rank < 2 (eigenvalues {values:?})"
        )));
    }
    let mut v1 = vectors[0];
    if v1.iter().sum::<f64>() < 0.0 {
        v1 = v1.map(|x| -x);
    }
    let mut v2 = vectors[1];
    let pivot = v2.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
    if pivot < 0.0 {
        v2 = v2.map(|x| -x);
    }

    let mut phi = par::map(&tissue, |od| dot(*od, v2).atan2(dot(*od, v1)));
    par::sort_f64(&mut phi);
    let lo = percentile_sorted(&phi, p.alpha);
    let hi = percentile_sorted(&phi, 100.0 - p.alpha);

    let direction = |angle: f64| -> Result<[f64; 3]> {
        let (s, c) = angle.sin_cos();
        let mut v = [0.0; 3];
        for k in 0..3 {
            v[k] = v1[k] * c + v2[k] * s;
        }
        if v.iter().sum::<f64>() < 0.0 {
            v = v.map(|x| -x);
        }
        unit(v.map(|x| x.max(0.0)))
            .ok_or_else(|| Error::DegenerateStain("extreme stain direction has no positive part".into()))
    };
    let (a, b) = (direction(lo)?, direction(hi)?);
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };
    let angle = angle_deg(h, e);
    if angle <= MIN_STAIN_ANGLE_DEG {
        return Err(Error::DegenerateStain(format!(
            "estimated stain directions are {angle:.3}° apart"
        )));
    }

    let mut model = StainModel {
        stain_matrix: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
        max_concentrations: [1.0, 1.0],
    };
    let conc = od_concentrations(&od, &model);
    model.max_concentrations = percentile_concentrations(&conc, p.max_c_percentile);
    if model.max_concentrations.iter().any(|&c| c <= 0.0) {
        return Err(Error::DegenerateStain(format!(
            "percentile concentrations {:?} are not positive",
            model.max_concentrations
        )));
    }
    Ok(model)
}

/// Per-pixel least-squares concentrations, clamped at zero.
pub fn compute_concentrations(img: &RgbImage, model: &StainModel, p: &MacenkoParams) -> ConcentrationMap {
    od_concentrations(&rgb_to_od(img, p.io), model)
}

/// Least-squares concentrations of an OD image, clamped at zero.
pub fn od_concentrations(od: &OdImage, model: &StainModel) -> ConcentrationMap {
    let pinv = model.pseudo_inverse();
    let data = par::map(od.as_slice(), |v| {
        [dot(pinv[0], *v).max(0.0), dot(pinv[1], *v).max(0.0)]
    });
    Raster::from_vec(od.width(), od.height(), data).expect("same dimensions")
}

/// Per-stain nearest-rank percentile of a concentration map.
pub fn percentile_concentrations(conc: &ConcentrationMap, percentile: f64) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut v: Vec<f64> = conc.as_slice().iter().map(|c| c[j]).collect();
        par::sort_f64(&mut v);
        *slot = percentile_sorted(&v, percentile);
    }
    out
}

/// Re-renders `img` with the reference stain matrix and concentration scale.
pub fn normalize_to_reference(img: &RgbImage, p: &MacenkoParams, reference: &StainModel) -> Result<RgbImage> {
    let source = estimate_stain_model(img, p)?;
    Ok(normalize_with_models(img, p, &source, reference))
}

/// Normalization with an already-estimated source model.
pub fn normalize_with_models(
    img: &RgbImage,
    p: &MacenkoParams,
    source: &StainModel,
    reference: &StainModel,
) -> RgbImage {
    let conc = compute_concentrations(img, source, p);
    let ratio = [
        reference.max_concentrations[0] / source.max_concentrations[0],
        reference.max_concentrations[1] / source.max_concentrations[1],
    ];
    let io = p.io;
    let data = par::map(conc.as_slice(), |c| {
        reference
            .mix([c[0] * ratio[0], c[1] * ratio[1]])
            .map(|d| od_to_intensity(d, io))
    });
    Raster::from_vec(img.width(), img.height(), data).expect("same dimensions")
}

/// Nearest-rank percentile of ascending data: the smallest value with at
/// least `q%` of the data at or below it. Unchanged when every sample is
/// repeated the same number of times.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Population covariance of OD vectors, summed in fixed-size blocks.
#[allow(clippy::needless_range_loop)]
fn covariance(samples: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let n = samples.len() as f64;
    let sums = par::map_blocks(samples, par::REDUCE_BLOCK, |block| {
        let mut s = [0.0; 3];
        for v in block {
            for k in 0..3 {
                s[k] += v[k];
            }
        }
        s
    });
    let mut mean = [0.0; 3];
    for s in &sums {
        for k in 0..3 {
            mean[k] += s[k];
        }
    }
    let mean = mean.map(|m| m / n);
    let partials = par::map_blocks(samples, par::REDUCE_BLOCK, |block| {
        let mut c = [[0.0; 3]; 3];
        for v in block {
            let d = [v[0] - mean[0], v[1] - mean[1], v[2] - mean[2]];
            for i in 0..3 {
                for j in i..3 {
                    c[i][j] += d[i] * d[j];
                }
            }
        }
        c
    });
    let mut cov = [[0.0; 3]; 3];
    for c in &partials {
        for i in 0..3 {
            for j in i..3 {
                cov[i][j] += c[i][j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

/// Cyclic Jacobi eigen-decomposition of a symmetric 3×3 matrix. Returns
/// eigenvalues in descending order with matching unit eigenvectors.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let diag = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2);
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← Jᵀ A J with the rotation acting on rows/columns p and q.
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vkp, vkq) = (row[p], row[q]);
                row[p] = c * vkp - s * vkq;
                row[q] = s * vkp + c * vkq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (values, vectors)
}

#[inline]
fn dot<const N: usize>(a: [f64; N], b: [f64; N]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

fn norm(v: [f64; 3]) -> f64 {
    dot(v, v).sqrt()
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(v);
    (n > 1e-12 && n.is_finite()).then(|| v.map(|x| x / n))
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}
