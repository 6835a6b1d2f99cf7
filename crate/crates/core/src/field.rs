//! Nearest-neighbor fields, per-pixel usage maps and a bank of pre-extracted
//! patches shared by the brute-force and PatchMatch searches.

use crate::error::{Error, Result};
use crate::npy::{NpyArray, NpyData};
use crate::tensor::{FeatureMap, PatchGeometry, Pos};

/// Assignment of a source patch center to every valid target patch center.
///
/// Target centers are stored in raster order over the valid-center grid;
/// assignments are map positions of source patch centers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NNField {
    geom: PatchGeometry,
    rows: usize,
    cols: usize,
    assignments: Vec<Pos>,
}

impl NNField {
    pub fn new(geom: PatchGeometry, rows: usize, cols: usize, assignments: Vec<Pos>) -> Result<Self> {
        if assignments.len() != rows * cols {
            return Err(Error::Shape(format!(
                "field grid {rows}x{cols} needs {} assignments, got {}",
                rows * cols,
                assignments.len()
            )));
        }
        Ok(NNField {
            geom,
            rows,
            cols,
            assignments,
        })
    }

    /// Field over every valid center of a `target_height x target_width` map.
    pub fn for_target(
        geom: PatchGeometry,
        target_height: usize,
        target_width: usize,
        assignments: Vec<Pos>,
    ) -> Result<Self> {
        let (rows, cols) = geom.center_grid(target_height, target_width).ok_or_else(|| {
            Error::OutOfRange(format!(
                "no valid {}x{} patch centers in a {target_height}x{target_width} map",
                geom.patch_size(),
                geom.patch_size()
            ))
        })?;
        Self::new(geom, rows, cols, assignments)
    }

    /// Field where each target center maps to the same source position.
    pub fn identity(geom: PatchGeometry, height: usize, width: usize) -> Result<Self> {
        let (rows, cols) = geom
            .center_grid(height, width)
            .ok_or_else(|| Error::OutOfRange("no valid centers".into()))?;
        let assignments = (0..rows * cols).map(|k| geom.center_at(cols, k)).collect();
        Self::new(geom, rows, cols, assignments)
    }

    pub fn geom(&self) -> PatchGeometry {
        self.geom
    }

    /// Valid-center grid `(rows, cols)` of the target.
    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Spatial size of the target map this field is defined on.
    pub fn target_extent(&self) -> (usize, usize) {
        let r = self.geom.patch_size() - 1;
        (self.rows + r, self.cols + r)
    }

    pub fn assignments(&self) -> &[Pos] {
        &self.assignments
    }

    pub fn target_center(&self, index: usize) -> Pos {
        self.geom.center_at(self.cols, index)
    }

    pub fn get(&self, index: usize) -> Pos {
        self.assignments[index]
    }

    /// `(target center, source center)` pairs in raster order.
    pub fn pairs(&self) -> impl Iterator<Item = (Pos, Pos)> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .map(|(k, &s)| (self.target_center(k), s))
    }

    /// Checks the field matches the target's center grid and lands on valid
    /// source centers.
    pub fn validate(&self, target: (usize, usize), source: (usize, usize)) -> Result<()> {
        if self.target_extent() != target {
            return Err(Error::Shape(format!(
                "field covers a {:?} target but the target is {:?}",
                self.target_extent(),
                target
            )));
        }
        if let Some(bad) = self
            .assignments
            .iter()
            .find(|p| !self.geom.is_valid_center(source.0, source.1, **p))
        {
            return Err(Error::OutOfRange(format!(
                "assignment ({}, {}) is not a valid center of a {}x{} source",
                bad.row, bad.col, source.0, source.1
            )));
        }
        Ok(())
    }

    /// Number of targets assigned to each source center, indexed by the
    /// source center's raster index.
    pub fn multiplicities(&self, source_height: usize, source_width: usize) -> Vec<usize> {
        let (rows, cols) = self
            .geom
            .center_grid(source_height, source_width)
            .unwrap_or((0, 0));
        let mut counts = vec![0; rows * cols];
        for &s in &self.assignments {
            counts[self.geom.center_index(cols, s)] += 1;
        }
        counts
    }

    pub fn max_multiplicity(&self, source_height: usize, source_width: usize) -> usize {
        self.multiplicities(source_height, source_width)
            .into_iter()
            .max()
            .unwrap_or(0)
    }

    /// True when every source center is used exactly once.
    pub fn is_bijection(&self, source_height: usize, source_width: usize) -> bool {
        let m = self.multiplicities(source_height, source_width);
        m.len() == self.assignments.len() && m.iter().all(|&c| c == 1)
    }

    /// `(2, rows, cols)` int64 tensor: source row plane then source column plane.
    pub fn to_npy(&self) -> NpyArray {
        let mut data = Vec::with_capacity(2 * self.assignments.len());
        data.extend(self.assignments.iter().map(|p| p.row as i64));
        data.extend(self.assignments.iter().map(|p| p.col as i64));
        NpyArray {
            shape: vec![2, self.rows, self.cols],
            data: NpyData::I64(data),
        }
    }

    pub fn from_npy(array: &NpyArray, geom: PatchGeometry) -> Result<Self> {
        let [2, rows, cols] = array.shape[..] else {
            return Err(Error::Shape(format!(
                "field tensors have shape (2, rows, cols), got {:?}",
                array.shape
            )));
        };
        let values = array
            .data
            .to_i64()
            .ok_or_else(|| Error::Format("field tensors must hold integers".into()))?;
        let n = rows * cols;
        let assignments = (0..n)
            .map(|k| {
                let (r, c) = (values[k], values[n + k]);
                if r < 0 || c < 0 {
                    Err(Error::Data(format!("negative field entry ({r}, {c})")))
                } else {
                    Ok(Pos::new(r as usize, c as usize))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(geom, rows, cols, assignments)
    }
}

/// Per-pixel count of how many assigned source patches cover each source pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsageMap {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

impl UsageMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        UsageMap {
            height,
            width,
            counts: vec![0; height * width],
        }
    }

    /// Builds a usage map from explicit per-pixel counts.
    pub fn from_counts(height: usize, width: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != height * width {
            return Err(Error::Shape(format!(
                "usage map {height}x{width} needs {} counts, got {}",
                height * width,
                counts.len()
            )));
        }
        Ok(UsageMap {
            height,
            width,
            counts,
        })
    }

    /// From-scratch accumulation: every assigned patch adds one to each of the
    /// `R * R` pixels it covers.
    pub fn recompute(field: &NNField, source_height: usize, source_width: usize) -> Self {
        let mut usage = UsageMap::zeros(source_height, source_width);
        for &s in field.assignments() {
            usage.add_patch(s, field.geom());
        }
        usage
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, pos: Pos) -> u32 {
        self.counts[pos.row * self.width + pos.col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    pub(crate) fn add_patch(&mut self, center: Pos, geom: PatchGeometry) {
        let r = geom.radius();
        for y in center.row - r..=center.row + r {
            let row = y * self.width;
            for c in &mut self.counts[row + center.col - r..=row + center.col + r] {
                *c += 1;
            }
        }
    }

    pub(crate) fn remove_patch(&mut self, center: Pos, geom: PatchGeometry) {
        let r = geom.radius();
        for y in center.row - r..=center.row + r {
            let row = y * self.width;
            for c in &mut self.counts[row + center.col - r..=row + center.col + r] {
                *c -= 1;
            }
        }
    }

    /// Mean per-pixel usage over the patch at `center`: the patch's usage
    /// sum divided once by `R * R`.
    pub fn patch_mean(&self, center: Pos, geom: PatchGeometry) -> f64 {
        let r = geom.radius();
        let mut sum = 0u64;
        for y in center.row - r..=center.row + r {
            let row = y * self.width;
            sum += self.counts[row + center.col - r..=row + center.col + r]
                .iter()
                .map(|&c| u64::from(c))
                .sum::<u64>();
        }
        let area = (geom.patch_size() * geom.patch_size()) as f64;
        sum as f64 / area
    }

    /// `(height, width)` float32 tensor.
    pub fn to_npy(&self) -> NpyArray {
        NpyArray {
            shape: vec![self.height, self.width],
            data: NpyData::F32(self.counts.iter().map(|&c| c as f32).collect()),
        }
    }
}

/// Every valid patch of a map, extracted once, with its L2 norm.
#[derive(Clone, Debug)]
pub struct PatchBank {
    geom: PatchGeometry,
    rows: usize,
    cols: usize,
    patch_len: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
}

impl PatchBank {
    pub fn new(map: &FeatureMap, geom: PatchGeometry) -> Result<Self> {
        let (rows, cols) = geom.center_grid(map.height(), map.width()).ok_or_else(|| {
            Error::OutOfRange(format!(
                "no valid {0}x{0} patch centers in a {1}x{2} map",
                geom.patch_size(),
                map.height(),
                map.width()
            ))
        })?;
        let patch_len = geom.patch_len(map.channels());
        let mut data = Vec::with_capacity(rows * cols * patch_len);
        let mut norms = Vec::with_capacity(rows * cols);
        let mut buf = Vec::with_capacity(patch_len);
        for k in 0..rows * cols {
            map.patch_into(geom.center_at(cols, k), geom, &mut buf)?;
            norms.push(norm(&buf));
            data.extend_from_slice(&buf);
        }
        Ok(PatchBank {
            geom,
            rows,
            cols,
            patch_len,
            data,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.data[index * self.patch_len..(index + 1) * self.patch_len]
    }

    pub fn norm(&self, index: usize) -> f64 {
        self.norms[index]
    }

    pub fn center(&self, index: usize) -> Pos {
        self.geom.center_at(self.cols, index)
    }

    pub fn index_of(&self, center: Pos) -> usize {
        self.geom.center_index(self.cols, center)
    }

    /// NCC between patch `a` of this bank and patch `b` of `other`.
    pub fn ncc_with(&self, a: usize, other: &PatchBank, b: usize) -> f64 {
        ncc_with_norms(self.patch(a), other.patch(b), self.norm(a), other.norm(b))
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Normalized cross-correlation with unsquared norms, in `[-1, 1]`.
/// A zero-norm patch scores 0 against everything.
pub fn ncc(a: &[f32], b: &[f32]) -> f64 {
    ncc_with_norms(a, b, norm(a), norm(b))
}

#[inline]
pub fn ncc_with_norms(a: &[f32], b: &[f32], norm_a: f64, norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        0.0
    } else {
        dot(a, b) / (norm_a * norm_b)
    }
}

/// Squared L2 distance accumulated in 64-bit.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(r: usize) -> PatchGeometry {
        PatchGeometry::new(r).unwrap()
    }

    #[test]
    fn single_assignment_covers_nine_pixels() {
        let g = geom(3);
        let field = NNField::new(g, 1, 1, vec![Pos::new(2, 2)]).unwrap();
        let usage = UsageMap::recompute(&field, 5, 5);
        assert_eq!(usage.total(), 9);
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(usage.get(Pos::new(y, x)), u32::from(inside));
            }
        }
        assert_eq!(usage.patch_mean(Pos::new(2, 2), g), 1.0);
        assert_eq!(usage.patch_mean(Pos::new(3, 3), g), 4.0 / 9.0);
    }

    #[test]
    fn empty_field_gives_zero_usage() {
        let field = NNField::new(geom(1), 0, 0, vec![]).unwrap();
        let usage = UsageMap::recompute(&field, 3, 4);
        assert!(usage.counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn add_then_remove_is_identity() {
        let g = geom(3);
        let mut usage = UsageMap::zeros(4, 4);
        usage.add_patch(Pos::new(1, 2), g);
        usage.add_patch(Pos::new(2, 2), g);
        usage.remove_patch(Pos::new(1, 2), g);
        let field = NNField::new(g, 1, 1, vec![Pos::new(2, 2)]).unwrap();
        assert_eq!(usage, UsageMap::recompute(&field, 4, 4));
    }

    #[test]
    fn ncc_properties() {
        assert_eq!(ncc(&[1.0, 0.0], &[2.0, 0.0]), 1.0);
        assert_eq!(ncc(&[1.0, 0.0], &[-3.0, 0.0]), -1.0);
        assert_eq!(ncc(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ncc(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn field_npy_round_trip_and_validation() {
        let g = geom(3);
        let field = NNField::for_target(g, 4, 5, vec![Pos::new(1, 1); 6]).unwrap();
        assert_eq!(field.grid(), (2, 3));
        assert_eq!(field.target_extent(), (4, 5));
        let arr = field.to_npy();
        assert_eq!(arr.shape, vec![2, 2, 3]);
        assert_eq!(NNField::from_npy(&arr, g).unwrap(), field);
        field.validate((4, 5), (3, 3)).unwrap();
        assert!(field.validate((4, 5), (2, 3)).is_err());
        assert!(field.validate((5, 5), (3, 3)).is_err());
        assert_eq!(field.max_multiplicity(3, 3), 6);
    }

    #[test]
    fn identity_field_is_bijection() {
        let field = NNField::identity(geom(3), 5, 6).unwrap();
        assert!(field.is_bijection(5, 6));
        assert!(!field.is_bijection(6, 6));
    }
}
