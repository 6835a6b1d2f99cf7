//! Dense feature tensors and patch geometry.
//!
//! A [`FeatureMap`] stores one layer's activations as `channels x height x width`
//! 32-bit values, channel outermost, row-major inside each channel. Patches are
//! square, odd-sized and only ever centered where they fit entirely inside the
//! map (the "valid" centers).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A spatial location `(row, col)` in a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Pos { row, col }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    /// Builds a map from channel-major data. Rejects zero extents, a length
    /// mismatch and non-finite values.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "feature map extents must be positive, got ({channels}, {height}, {width})"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape ({channels}, {height}, {width}) = {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value {} at flat index {i}", data[i])));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    /// One channel as a `height * width` slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// The feature column at `pos`, one value per channel.
    pub fn column(&self, pos: Pos) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, pos.row, pos.col)).collect()
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    /// Copies `pos` of every channel from `other` (which may have any spatial
    /// size but the same channel count) into this map at `dst`.
    pub(crate) fn set_column_from(&mut self, dst: Pos, other: &FeatureMap, src: Pos) {
        for c in 0..self.channels {
            let v = other.get(c, src.row, src.col);
            let i = self.index(c, dst.row, dst.col);
            self.data[i] = v;
        }
    }

    /// Elementwise `w_self * self + w_other * other`. Weights of exactly 1 and
    /// 0 pass values through bit-for-bit.
    pub fn blend(&self, w_self: f32, other: &FeatureMap, w_other: f32) -> Result<FeatureMap> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot blend {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = if w_self == 1.0 && w_other == 0.0 {
            self.data.clone()
        } else if w_self == 0.0 && w_other == 1.0 {
            other.data.clone()
        } else {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| w_self * a + w_other * b)
                .collect()
        };
        FeatureMap::new(self.channels, self.height, self.width, data)
    }

    /// Scales every feature column to unit L2 norm; zero columns stay zero.
    pub fn normalize_columns(&self) -> FeatureMap {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let norm = (0..self.channels)
                    .map(|c| {
                        let v = f64::from(self.get(c, y, x));
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt();
                if norm > 0.0 {
                    for c in 0..self.channels {
                        let i = self.index(c, y, x);
                        out.data[i] = (f64::from(self.data[i]) / norm) as f32;
                    }
                }
            }
        }
        out
    }

    /// Copies the patch centered at `center` into `out` (length `c * R * R`),
    /// ordered channel, then row, then column.
    pub fn patch_into(&self, center: Pos, geom: PatchGeometry, out: &mut Vec<f32>) -> Result<()> {
        geom.check_center(self.height, self.width, center)?;
        let r = geom.radius();
        let size = geom.patch_size();
        out.clear();
        out.reserve(self.channels * size * size);
        for c in 0..self.channels {
            for dy in 0..size {
                let row = (c * self.height + center.row + dy - r) * self.width;
                let start = row + center.col - r;
                out.extend_from_slice(&self.data[start..start + size]);
            }
        }
        Ok(())
    }

    /// Extracts the patch centered at `center`.
    pub fn extract_patch(&self, center: Pos, geom: PatchGeometry) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        self.patch_into(center, geom, &mut out)?;
        Ok(out)
    }
}

/// Square patch footprint with odd side length and unit stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct PatchGeometry {
    patch_size: usize,
}

impl PatchGeometry {
    pub fn new(patch_size: usize) -> Result<Self> {
        if patch_size == 0 || patch_size % 2 == 0 {
            return Err(Error::Config(format!(
                "patch size must be odd and positive, got {patch_size}"
            )));
        }
        Ok(PatchGeometry { patch_size })
    }

    pub fn patch_size(self) -> usize {
        self.patch_size
    }

    /// Half width, `floor(R / 2)`.
    pub fn radius(self) -> usize {
        self.patch_size / 2
    }

    /// Number of values in one patch of a `channels`-deep map.
    pub fn patch_len(self, channels: usize) -> usize {
        channels * self.patch_size * self.patch_size
    }

    /// Valid-center grid `(rows, cols)` for a `height x width` map, or `None`
    /// if the patch does not fit at all.
    pub fn center_grid(self, height: usize, width: usize) -> Option<(usize, usize)> {
        if height < self.patch_size || width < self.patch_size {
            None
        } else {
            Some((height - self.patch_size + 1, width - self.patch_size + 1))
        }
    }

    pub fn valid_center_count(self, height: usize, width: usize) -> usize {
        self.center_grid(height, width).map_or(0, |(h, w)| h * w)
    }

    pub fn is_valid_center(self, height: usize, width: usize, center: Pos) -> bool {
        let r = self.radius();
        center.row >= r && center.col >= r && center.row + r < height && center.col + r < width
    }

    pub fn check_center(self, height: usize, width: usize, center: Pos) -> Result<()> {
        if self.is_valid_center(height, width, center) {
            Ok(())
        } else {
            Err(Error::OutOfRange(format!(
                "patch of size {} centered at ({}, {}) does not fit in a {height}x{width} map",
                self.patch_size, center.row, center.col
            )))
        }
    }

    /// Map position of the `index`-th valid center in raster order.
    pub fn center_at(self, grid_cols: usize, index: usize) -> Pos {
        let r = self.radius();
        Pos::new(r + index / grid_cols, r + index % grid_cols)
    }

    /// Raster index of a valid center within the grid.
    pub fn center_index(self, grid_cols: usize, center: Pos) -> usize {
        let r = self.radius();
        (center.row - r) * grid_cols + (center.col - r)
    }
}

impl TryFrom<usize> for PatchGeometry {
    type Error = Error;

    fn try_from(value: usize) -> Result<Self> {
        PatchGeometry::new(value)
    }
}

impl From<PatchGeometry> for usize {
    fn from(g: PatchGeometry) -> usize {
        g.patch_size
    }
}
