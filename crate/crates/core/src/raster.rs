//! Row-major 2-D pixel grids and the exact geometric operations shared by
//! images and label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `width × height` grid stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// 8-bit RGB tile.
pub type RgbImage = Raster<[u8; 3]>;

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "raster must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} raster needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, f: F) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::from_vec(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let w = self.width;
        self.data[y * w + x] = value;
    }

    fn remap(&self, width: usize, height: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = src(x, y);
                data.push(self.get(sx, sy));
            }
        }
        Raster {
            width,
            height,
            data,
        }
    }

    /// Mirror left to right.
    pub fn flip_h(&self) -> Self {
        let w = self.width;
        self.remap(self.width, self.height, |x, y| (w - 1 - x, y))
    }

    /// Mirror top to bottom.
    pub fn flip_v(&self) -> Self {
        let h = self.height;
        self.remap(self.width, self.height, |x, y| (x, h - 1 - y))
    }

    /// Rotate clockwise by `quarter_turns × 90°`.
    pub fn rot90(&self, quarter_turns: u8) -> Self {
        let mut out = self.clone();
        for _ in 0..(quarter_turns % 4) {
            let h = out.height;
            out = out.remap(out.height, out.width, |x, y| (y, h - 1 - x));
        }
        out
    }

    /// Nearest-neighbour resize sampling at pixel centres. Output values are
    /// always a subset of input values.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "resize target must be non-empty, got {width}x{height}"
            )));
        }
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        let (sw, sh) = self.dims();
        let xs: Vec<usize> = (0..width).map(|x| nearest_source(x, width, sw)).collect();
        let ys: Vec<usize> = (0..height).map(|y| nearest_source(y, height, sh)).collect();
        Ok(self.remap(width, height, |x, y| (xs[x], ys[y])))
    }
}

/// Source index whose pixel centre is nearest to the centre of `dst` when a
/// line of `src_len` pixels is resampled to `dst_len`.
#[inline]
pub(crate) fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

impl RgbImage {
    /// Bilinear resize with pixel-centre alignment and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "resize target must be non-empty, got {width}x{height}"
            )));
        }
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        let taps = |dst_len: usize, src_len: usize| -> Vec<(usize, usize, f64)> {
            (0..dst_len)
                .map(|d| {
                    let s = ((d as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
                        .clamp(0.0, (src_len - 1) as f64);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(src_len - 1);
                    (lo, hi, s - lo as f64)
                })
                .collect()
        };
        let xt = taps(width, self.width);
        let yt = taps(height, self.height);
        let mut data = Vec::with_capacity(width * height);
        for &(y0, y1, fy) in &yt {
            for &(x0, x1, fx) in &xt {
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                    let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                    px[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
                }
                data.push(px);
            }
        }
        Raster::from_vec(width, height, data)
    }
}

/// The exact, label-safe geometric transforms: optional mirrors followed by
/// a clockwise rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Orientation {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
}

impl Orientation {
    pub fn apply<T: Copy>(&self, r: &Raster<T>) -> Raster<T> {
        let mut out = r.clone();
        if self.flip_h {
            out = out.flip_h();
        }
        if self.flip_v {
            out = out.flip_v();
        }
        out.rot90(self.quarter_turns)
    }
}
