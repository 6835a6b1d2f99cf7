//! Seeded synthetic inputs: random maps, spatial permutations and pyramids.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::NNField;
use crate::pyramid::FeaturePyramid;
use crate::tensor::{FeatureMap, PatchGeometry, Pos};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values uniform in `[-1, 1)`.
pub fn random_map<R: Rng>(rng: &mut R, channels: usize, height: usize, width: usize) -> FeatureMap {
    let data = (0..channels * height * width)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    FeatureMap::new(channels, height, width, data).expect("positive extents")
}

pub fn random_permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Rearranges spatial positions: `out(p) = map(perm[p])` with positions in
/// raster order. Returns the reshuffled map and the `1 x 1` field that
/// produced it.
pub fn permute_spatial(map: &FeatureMap, perm: &[usize]) -> (FeatureMap, NNField) {
    let (c, h, w) = map.shape();
    assert_eq!(perm.len(), h * w, "permutation must cover every position");
    let mut out = FeatureMap::zeros(c, h, w).expect("positive extents");
    let mut assignments = Vec::with_capacity(h * w);
    for (p, &q) in perm.iter().enumerate() {
        let dst = Pos::new(p / w, p % w);
        let src = Pos::new(q / w, q % w);
        out.set_column_from(dst, map, src);
        assignments.push(src);
    }
    let geom = PatchGeometry::new(1).expect("1 is odd");
    let field = NNField::new(geom, h, w, assignments).expect("one assignment per position");
    (out, field)
}

/// True when no two feature columns are equal.
pub fn has_distinct_columns(map: &FeatureMap) -> bool {
    let mut cols: Vec<Vec<u32>> = (0..map.height())
        .flat_map(|y| (0..map.width()).map(move |x| Pos::new(y, x)))
        .map(|p| map.column(p).into_iter().map(f32::to_bits).collect())
        .collect();
    let n = cols.len();
    cols.sort();
    cols.dedup();
    cols.len() == n
}

/// True when no two feature columns point the same way (pairwise NCC below
/// `1 - 1e-6`), so NCC matching can tell every column apart.
pub fn has_distinct_directions(map: &FeatureMap) -> bool {
    let cols: Vec<Vec<f32>> = (0..map.height())
        .flat_map(|y| (0..map.width()).map(move |x| Pos::new(y, x)))
        .map(|p| map.column(p))
        .collect();
    cols.iter().enumerate().all(|(i, a)| {
        crate::field::norm(a) > 0.0 && cols[i + 1..].iter().all(|b| crate::field::ncc(a, b) < 1.0 - 1e-6)
    })
}

/// Random pyramid over layers 4, 3, 2 with `(4c, s, s)`, `(2c, 2s, 2s)` and
/// `(c, 4s, 4s)` shapes.
pub fn random_pyramid<R: Rng>(rng: &mut R, channels: usize, size: usize, source: &str) -> FeaturePyramid {
    FeaturePyramid::new(source, "synthetic")
        .with_layer(4, random_map(rng, channels * 4, size, size))
        .with_layer(3, random_map(rng, channels * 2, size * 2, size * 2))
        .with_layer(2, random_map(rng, channels, size * 4, size * 4))
}
