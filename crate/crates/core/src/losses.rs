//! Style-transfer loss functionals.
//!
//! All sums are accumulated in 64-bit. The content and global (Gram) losses
//! compare whole maps; the local and reshuffle losses sum squared patch
//! distances along a nearest-neighbor field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{squared_distance, NNField, PatchBank};
use crate::tensor::{FeatureMap, PatchGeometry};

/// Channel-correlation matrix `G(i, j) = sum_p F(i, p) F(j, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.size).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    /// `||self * a - other * b||_F^2`
    fn scaled_distance_sq(&self, a: f64, other: &GramMatrix, b: f64) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(x, y)| {
                let d = a * x - b * y;
                d * d
            })
            .sum()
    }
}

/// Upper triangle is computed, the lower triangle mirrored, so the result is
/// exactly symmetric.
pub fn gram(map: &FeatureMap) -> GramMatrix {
    let c = map.channels();
    let mut entries = vec![0.0; c * c];
    for i in 0..c {
        let ci = map.channel(i);
        for j in i..c {
            let v: f64 = ci
                .iter()
                .zip(map.channel(j))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            entries[i * c + j] = v;
            entries[j * c + i] = v;
        }
    }
    GramMatrix { size: c, entries }
}

/// `||F_o - F_c||_F^2`
pub fn content_loss(output: &FeatureMap, content: &FeatureMap) -> Result<f64> {
    if !output.same_shape(content) {
        return Err(Error::Shape(format!(
            "content loss needs equal shapes, got {:?} and {:?}",
            output.shape(),
            content.shape()
        )));
    }
    Ok(squared_distance(output.data(), content.data()))
}

/// `||G_o - G_s||_F^2`, optionally divided by `4 c^2 h^2 w^2`.
///
/// When normalized, each Gram matrix is divided by its own `h * w` before
/// differencing, which reduces to the `4 c^2 h^2 w^2` factor for equal sizes
/// and lets maps of different spatial size be compared. Unnormalized
/// comparison requires equal spatial sizes.
pub fn global_style_loss(output: &FeatureMap, style: &FeatureMap, normalized: bool) -> Result<f64> {
    if output.channels() != style.channels() {
        return Err(Error::Shape(format!(
            "global style loss needs equal channel counts, got {} and {}",
            output.channels(),
            style.channels()
        )));
    }
    let g_o = gram(output);
    let g_s = gram(style);
    if normalized {
        let c = output.channels() as f64;
        let a = 1.0 / output.plane_len() as f64;
        let b = 1.0 / style.plane_len() as f64;
        Ok(g_o.scaled_distance_sq(a, &g_s, b) / (4.0 * c * c))
    } else {
        if output.plane_len() != style.plane_len() {
            return Err(Error::Shape(format!(
                "unnormalized global style loss needs equal spatial sizes, got {:?} and {:?}",
                output.shape(),
                style.shape()
            )));
        }
        Ok(g_o.scaled_distance_sq(1.0, &g_s, 1.0))
    }
}

fn check_pair(output: &FeatureMap, style: &FeatureMap) -> Result<()> {
    if output.channels() != style.channels() {
        return Err(Error::Shape(format!(
            "patch matching needs equal channel counts, got {} and {}",
            output.channels(),
            style.channels()
        )));
    }
    Ok(())
}

/// Exhaustive NCC nearest neighbor for every valid target center. Ties go to
/// the lowest source raster index.
pub fn nn_field_bruteforce(
    output: &FeatureMap,
    style: &FeatureMap,
    geom: PatchGeometry,
) -> Result<NNField> {
    check_pair(output, style)?;
    let targets = PatchBank::new(output, geom)?;
    let sources = PatchBank::new(style, geom)?;
    let assignments = (0..targets.len())
        .map(|t| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for s in 0..sources.len() {
                let score = targets.ncc_with(t, &sources, s);
                if score > best_score {
                    best_score = score;
                    best = s;
                }
            }
            sources.center(best)
        })
        .collect();
    let (rows, cols) = targets.grid();
    NNField::new(geom, rows, cols, assignments)
}

/// Sum over valid target centers of the squared distance between the target
/// patch and its assigned source patch.
pub fn local_style_loss(output: &FeatureMap, style: &FeatureMap, field: &NNField) -> Result<f64> {
    check_pair(output, style)?;
    field.validate(
        (output.height(), output.width()),
        (style.height(), style.width()),
    )?;
    let geom = field.geom();
    let mut a = Vec::with_capacity(geom.patch_len(output.channels()));
    let mut b = Vec::with_capacity(a.capacity());
    let mut total = 0.0;
    for (t, s) in field.pairs() {
        output.patch_into(t, geom, &mut a)?;
        style.patch_into(s, geom, &mut b)?;
        total += squared_distance(&a, &b);
    }
    Ok(total)
}

/// The local style loss evaluated along a usage-constrained field.
pub fn reshuffle_loss(output: &FeatureMap, style: &FeatureMap, nnc_field: &NNField) -> Result<f64> {
    local_style_loss(output, style, nnc_field)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub content: f64,
    pub global_style: f64,
    pub local_style: f64,
    pub reshuffle: f64,
    pub normalization_used: bool,
}

impl LossReport {
    /// Evaluates all four losses of `output`. The local loss uses the
    /// brute-force NCC field; the reshuffle loss uses `nnc_field`. When
    /// `normalized`, patch losses are divided by the number of valid centers.
    pub fn evaluate(
        output: &FeatureMap,
        content: &FeatureMap,
        style: &FeatureMap,
        nnc_field: &NNField,
        normalized: bool,
    ) -> Result<Self> {
        let geom = nnc_field.geom();
        let nn = nn_field_bruteforce(output, style, geom)?;
        let mut local_style = local_style_loss(output, style, &nn)?;
        let mut reshuffle = reshuffle_loss(output, style, nnc_field)?;
        if normalized {
            let centers = nn.len() as f64;
            local_style /= centers;
            reshuffle /= centers;
        }
        Ok(LossReport {
            content: content_loss(output, content)?,
            global_style: global_style_loss(output, style, normalized)?,
            local_style,
            reshuffle,
            normalization_used: normalized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{permute_spatial, random_map, random_permutation};
    use crate::tensor::Pos;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn gram_of_zeros_is_zero() {
        let g = gram(&FeatureMap::zeros(3, 2, 2).unwrap());
        assert!(g.entries().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_of_orthogonal_one_hots_is_identity() {
        let m = FeatureMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(gram(&m).entries(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = gram(&random_map(&mut rng, 5, 3, 4));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(g.get(i, j).to_bits(), g.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn content_loss_single_difference() {
        let a = FeatureMap::zeros(2, 2, 2).unwrap();
        let mut data = vec![0.0; 8];
        data[5] = 1.5;
        let b = FeatureMap::new(2, 2, 2, data).unwrap();
        assert_eq!(content_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(content_loss(&a, &b).unwrap(), 2.25);
        let c = FeatureMap::zeros(2, 2, 3).unwrap();
        assert!(matches!(content_loss(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn global_loss_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(&mut rng, 3, 4, 4);
        assert_eq!(global_style_loss(&a, &a, false).unwrap(), 0.0);
        assert_eq!(global_style_loss(&a, &a, true).unwrap(), 0.0);
        let b = random_map(&mut rng, 2, 4, 4);
        assert!(matches!(global_style_loss(&a, &b, false), Err(Error::Shape(_))));
        let small = random_map(&mut rng, 3, 2, 3);
        assert!(global_style_loss(&a, &small, false).is_err());
        assert!(global_style_loss(&a, &small, true).is_ok());
    }

    #[test]
    fn normalized_global_loss_uses_z_factor_for_equal_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_map(&mut rng, 3, 4, 5);
        let b = random_map(&mut rng, 3, 4, 5);
        let raw = global_style_loss(&a, &b, false).unwrap();
        let z = 4.0 * 9.0 * 16.0 * 25.0;
        assert!(rel_err(global_style_loss(&a, &b, true).unwrap(), raw / z) < 1e-12);
    }

    #[test]
    fn permutation_zeroes_global_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = random_map(&mut rng, 4, 5, 6);
        let perm = random_permutation(&mut rng, 30);
        let (o, _) = permute_spatial(&s, &perm);
        let loss = global_style_loss(&o, &s, false).unwrap();
        assert!(loss <= 1e-5 * gram(&s).frobenius_sq());
    }

    #[test]
    fn self_match_is_identity_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let s = random_map(&mut rng, 3, 4, 4);
        let g = PatchGeometry::new(1).unwrap();
        let field = nn_field_bruteforce(&s, &s, g).unwrap();
        assert_eq!(field, NNField::identity(g, 4, 4).unwrap());
        assert_eq!(local_style_loss(&s, &s, &field).unwrap(), 0.0);
    }

    #[test]
    fn constant_source_ties_to_first_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let o = random_map(&mut rng, 2, 5, 5);
        let s = FeatureMap::from_fn(2, 5, 5, |_, _, _| 0.75).unwrap();
        let g = PatchGeometry::new(3).unwrap();
        let field = nn_field_bruteforce(&o, &s, g).unwrap();
        assert!(field.assignments().iter().all(|&p| p == Pos::new(1, 1)));
    }

    #[test]
    fn no_valid_centers_is_an_error() {
        let a = FeatureMap::zeros(1, 2, 2).unwrap();
        let g = PatchGeometry::new(3).unwrap();
        assert!(nn_field_bruteforce(&a, &a, g).is_err());
    }

    #[test]
    fn local_loss_rejects_mismatched_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let o = random_map(&mut rng, 2, 4, 4);
        let g = PatchGeometry::new(3).unwrap();
        let field = NNField::identity(g, 5, 5).unwrap();
        assert!(local_style_loss(&o, &o, &field).is_err());
    }

    #[test]
    fn report_divides_patch_losses_by_center_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let o = random_map(&mut rng, 2, 5, 5);
        let s = random_map(&mut rng, 2, 5, 5);
        let g = PatchGeometry::new(3).unwrap();
        let field = NNField::identity(g, 5, 5).unwrap();
        let raw = LossReport::evaluate(&o, &o, &s, &field, false).unwrap();
        let norm = LossReport::evaluate(&o, &o, &s, &field, true).unwrap();
        assert_eq!(raw.content, 0.0);
        assert!(rel_err(norm.reshuffle, raw.reshuffle / 9.0) < 1e-12);
        assert!(rel_err(norm.local_style, raw.local_style / 9.0) < 1e-12);
        let json = serde_json::to_value(&norm).unwrap();
        for key in ["content", "global_style", "local_style", "reshuffle", "normalization_used"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
