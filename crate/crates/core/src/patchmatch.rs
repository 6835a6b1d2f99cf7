//! Usage-constrained nearest-neighbor field search.
//!
//! Each target patch is matched to the source patch maximizing
//!
//! ```text
//! NCC(target, source) - lambda * mean_usage(source)
//! ```
//!
//! where `mean_usage` is the per-pixel usage count averaged over the source
//! patch footprint. The search is PatchMatch: random initialization, then
//! alternating forward/backward scans with coherence propagation and a
//! shrinking-radius random search. Usage is tracked either live (`Online`,
//! every reassignment immediately updates the counts seen by later targets) or
//! as a per-pass snapshot (`Frozen`). An optional hard cap bounds how many
//! targets may share one source patch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ncc_with_norms, NNField, PatchBank, UsageMap};
use crate::losses::nn_field_bruteforce;
use crate::synth;
use crate::tensor::{FeatureMap, PatchGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageMode {
    Online,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub lambda: f64,
    pub geom: PatchGeometry,
    pub pm_iterations: usize,
    /// Upper bound on random-search samples per target per pass.
    pub random_search_halvings: usize,
    pub seed: u64,
    pub usage_mode: UsageMode,
    /// Hard cap on targets per source patch.
    pub max_usage: Option<u32>,
    /// Replace the random search by a scan over every source patch.
    pub exhaustive_random_search: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            lambda: 0.05,
            geom: PatchGeometry::new(3).expect("3 is odd"),
            pm_iterations: 6,
            random_search_halvings: 32,
            seed: 0,
            usage_mode: UsageMode::Online,
            max_usage: None,
            exhaustive_random_search: false,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.pm_iterations == 0 {
            return Err(Error::Config("pm_iterations must be at least 1".into()));
        }
        if self.random_search_halvings == 0 {
            return Err(Error::Config("random_search_halvings must be at least 1".into()));
        }
        if self.max_usage == Some(0) {
            return Err(Error::Config("max_usage must be at least 1".into()));
        }
        Ok(())
    }
}

/// `NCC(target, source) - lambda * mean_usage`, with `mean_usage` the
/// source patch's usage already averaged over its `R * R` pixels.
pub fn score(target_patch: &[f32], source_patch: &[f32], mean_usage: f64, lambda: f64) -> f64 {
    let nt = crate::field::norm(target_patch);
    let ns = crate::field::norm(source_patch);
    ncc_with_norms(target_patch, source_patch, nt, ns) - lambda * mean_usage
}

/// Full result of a search.
#[derive(Clone, Debug)]
pub struct SearchReport {
    pub field: NNField,
    /// Usage implied by `field`, maintained incrementally.
    pub usage: UsageMap,
    /// Score of each target's final assignment when it was chosen.
    pub scores: Vec<f64>,
    /// In frozen mode, the usage snapshot the last pass scored against.
    pub frozen_usage: Option<UsageMap>,
}

pub fn nnc_search(output: &FeatureMap, style: &FeatureMap, cfg: &MatchConfig) -> Result<(NNField, UsageMap)> {
    let report = NncSearch::new(output, style, cfg)?.run(None)?;
    Ok((report.field, report.usage))
}

/// Like [`nnc_search`] but seeded with an existing field instead of a random
/// one (ignored if it does not fit the inputs or violates the cap).
pub fn nnc_search_from(
    output: &FeatureMap,
    style: &FeatureMap,
    cfg: &MatchConfig,
    init: &NNField,
) -> Result<SearchReport> {
    NncSearch::new(output, style, cfg)?.run(Some(init))
}

pub fn nnc_search_report(output: &FeatureMap, style: &FeatureMap, cfg: &MatchConfig) -> Result<SearchReport> {
    NncSearch::new(output, style, cfg)?.run(None)
}

/// Exhaustive per-target argmax of [`score`] against a fixed usage map.
/// Ties go to the lowest source raster index.
pub fn bruteforce_nnc_frozen(
    output: &FeatureMap,
    style: &FeatureMap,
    usage: &UsageMap,
    lambda: f64,
    geom: PatchGeometry,
) -> Result<NNField> {
    if lambda == 0.0 {
        return nn_field_bruteforce(output, style, geom);
    }
    if (usage.height(), usage.width()) != (style.height(), style.width()) {
        return Err(Error::Shape("usage map must match the source extent".into()));
    }
    let targets = PatchBank::new(output, geom)?;
    let sources = PatchBank::new(style, geom)?;
    let penalties: Vec<f64> = (0..sources.len())
        .map(|s| lambda * usage.patch_mean(sources.center(s), geom))
        .collect();
    let assignments = (0..targets.len())
        .map(|t| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (s, penalty) in penalties.iter().enumerate() {
                let v = targets.ncc_with(t, &sources, s) - penalty;
                if v > best_score {
                    best_score = v;
                    best = s;
                }
            }
            sources.center(best)
        })
        .collect();
    let (rows, cols) = targets.grid();
    NNField::new(geom, rows, cols, assignments)
}

pub fn recompute_usage(field: &NNField, source_height: usize, source_width: usize) -> UsageMap {
    UsageMap::recompute(field, source_height, source_width)
}

#[inline]
fn better(score: f64, index: usize, best_score: f64, best_index: usize) -> bool {
    score > best_score || (score == best_score && index < best_index)
}

struct NncSearch<'a> {
    cfg: &'a MatchConfig,
    targets: PatchBank,
    sources: PatchBank,
    source_extent: (usize, usize),
}

/// Mutable state of one search.
struct State {
    /// Source index per target.
    field: Vec<usize>,
    usage: UsageMap,
    /// Targets per source index.
    counts: Vec<u32>,
    scores: Vec<f64>,
    /// Best candidate seen per target in the latest pass, including ones
    /// rejected by the cap.
    desired: Vec<(f64, usize)>,
}

impl<'a> NncSearch<'a> {
    fn new(output: &FeatureMap, style: &FeatureMap, cfg: &'a MatchConfig) -> Result<Self> {
        cfg.validate()?;
        if output.channels() != style.channels() {
            return Err(Error::Shape(format!(
                "patch matching needs equal channel counts, got {} and {}",
                output.channels(),
                style.channels()
            )));
        }
        let targets = PatchBank::new(output, cfg.geom)?;
        let sources = PatchBank::new(style, cfg.geom)?;
        if let Some(cap) = cfg.max_usage {
            if targets.len() as u64 > u64::from(cap) * sources.len() as u64 {
                return Err(Error::Infeasible(format!(
                    "{} target patches cannot be matched to {} source patches used at most {cap} times each",
                    targets.len(),
                    sources.len()
                )));
            }
        }
        Ok(NncSearch {
            cfg,
            targets,
            sources,
            source_extent: (style.height(), style.width()),
        })
    }

    fn run(&self, init: Option<&NNField>) -> Result<SearchReport> {
        let mut rng = synth::rng(self.cfg.seed);
        let field = match init.and_then(|f| self.accept_init(f)) {
            Some(f) => f,
            None => self.random_init(&mut rng),
        };
        let mut state = self.state_from(field);

        let mut frozen_usage = None;
        for pass in 0..self.cfg.pm_iterations {
            let snapshot = match self.cfg.usage_mode {
                UsageMode::Frozen => Some(state.usage.clone()),
                UsageMode::Online => None,
            };
            self.pass(&mut state, pass, snapshot.as_ref(), &mut rng);
            frozen_usage = snapshot;
        }
        if self.cfg.max_usage.is_some() {
            self.repair(&mut state);
        }

        let geom = self.cfg.geom;
        let (rows, cols) = self.targets.grid();
        let assignments = state.field.iter().map(|&s| self.sources.center(s)).collect();
        Ok(SearchReport {
            field: NNField::new(geom, rows, cols, assignments)?,
            usage: state.usage,
            scores: state.scores,
            frozen_usage,
        })
    }

    fn accept_init(&self, init: &NNField) -> Option<Vec<usize>> {
        if init.geom() != self.cfg.geom || init.grid() != self.targets.grid() {
            return None;
        }
        let (h, w) = self.source_extent;
        init.validate(init.target_extent(), (h, w)).ok()?;
        let field: Vec<usize> = init.assignments().iter().map(|&p| self.sources.index_of(p)).collect();
        if let Some(cap) = self.cfg.max_usage {
            let mut counts = vec![0u32; self.sources.len()];
            for &s in &field {
                counts[s] += 1;
                if counts[s] > cap {
                    return None;
                }
            }
        }
        Some(field)
    }

    fn random_init<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.targets.len();
        let s = self.sources.len();
        match self.cfg.max_usage {
            None => (0..n).map(|_| rng.gen_range(0..s)).collect(),
            Some(cap) => {
                let reps = (n.div_ceil(s)).min(cap as usize).max(1);
                let pool: Vec<usize> = (0..reps).flat_map(|_| 0..s).collect();
                let perm = synth::random_permutation(rng, pool.len());
                perm.into_iter().take(n).map(|i| pool[i]).collect()
            }
        }
    }

    fn state_from(&self, field: Vec<usize>) -> State {
        let geom = self.cfg.geom;
        let (h, w) = self.source_extent;
        let mut usage = UsageMap::zeros(h, w);
        let mut counts = vec![0u32; self.sources.len()];
        for &s in &field {
            usage.add_patch(self.sources.center(s), geom);
            counts[s] += 1;
        }
        let n = field.len();
        State {
            field,
            usage,
            counts,
            scores: vec![f64::NEG_INFINITY; n],
            desired: vec![(f64::NEG_INFINITY, 0); n],
        }
    }

    fn penalty(&self, usage: &UsageMap, source: usize) -> f64 {
        if self.cfg.lambda == 0.0 {
            0.0
        } else {
            self.cfg.lambda * usage.patch_mean(self.sources.center(source), self.cfg.geom)
        }
    }

    fn pass<R: Rng>(&self, state: &mut State, pass: usize, snapshot: Option<&UsageMap>, rng: &mut R) {
        let geom = self.cfg.geom;
        let n = self.targets.len();
        let (t_rows, t_cols) = self.targets.grid();
        let (s_rows, s_cols) = self.sources.grid();
        let forward = pass % 2 == 0;
        let frozen_penalties: Option<Vec<f64>> =
            snapshot.map(|u| (0..self.sources.len()).map(|s| self.penalty(u, s)).collect());
        let mut candidates = Vec::new();

        for step in 0..n {
            let t = if forward { step } else { n - 1 - step };
            let (ty, tx) = (t / t_cols, t % t_cols);
            let current = state.field[t];

            // Take this target's own assignment out before scoring.
            state.usage.remove_patch(self.sources.center(current), geom);
            state.counts[current] -= 1;

            let eval = |state: &State, s: usize| -> f64 {
                let penalty = match &frozen_penalties {
                    Some(p) => p[s],
                    None => self.penalty(&state.usage, s),
                };
                self.targets.ncc_with(t, &self.sources, s) - penalty
            };
            let admissible = |state: &State, s: usize| -> bool {
                self.cfg.max_usage.is_none_or(|cap| state.counts[s] < cap)
            };

            let mut best = current;
            let mut best_score = eval(state, current);
            let mut desired = (best_score, best);

            candidates.clear();
            // Coherence propagation from the neighbors already visited this pass.
            let neighbors: [(bool, usize, isize, isize); 2] = if forward {
                [(tx > 0, t.wrapping_sub(1), 0, 1), (ty > 0, t.wrapping_sub(t_cols), 1, 0)]
            } else {
                [(tx + 1 < t_cols, t + 1, 0, -1), (ty + 1 < t_rows, t + t_cols, -1, 0)]
            };
            for (ok, nb, dy, dx) in neighbors {
                if !ok {
                    continue;
                }
                let s = state.field[nb];
                let y = (s / s_cols) as isize + dy;
                let x = (s % s_cols) as isize + dx;
                if y >= 0 && x >= 0 && (y as usize) < s_rows && (x as usize) < s_cols {
                    candidates.push(y as usize * s_cols + x as usize);
                }
            }
            for &s in &candidates {
                let v = eval(state, s);
                if better(v, s, desired.0, desired.1) {
                    desired = (v, s);
                }
                if admissible(state, s) && better(v, s, best_score, best) {
                    best_score = v;
                    best = s;
                }
            }

            if self.cfg.exhaustive_random_search {
                for s in 0..self.sources.len() {
                    let v = eval(state, s);
                    if better(v, s, desired.0, desired.1) {
                        desired = (v, s);
                    }
                    if admissible(state, s) && better(v, s, best_score, best) {
                        best_score = v;
                        best = s;
                    }
                }
            } else {
                let mut radius = s_rows.max(s_cols);
                let mut samples = 0;
                while radius >= 1 && samples < self.cfg.random_search_halvings {
                    let (by, bx) = ((best / s_cols) as isize, (best % s_cols) as isize);
                    let r = radius as isize;
                    let y = (by + rng.gen_range(-r..=r)).clamp(0, s_rows as isize - 1) as usize;
                    let x = (bx + rng.gen_range(-r..=r)).clamp(0, s_cols as isize - 1) as usize;
                    let s = y * s_cols + x;
                    let v = eval(state, s);
                    if better(v, s, desired.0, desired.1) {
                        desired = (v, s);
                    }
                    if admissible(state, s) && better(v, s, best_score, best) {
                        best_score = v;
                        best = s;
                    }
                    radius /= 2;
                    samples += 1;
                }
            }

            state.field[t] = best;
            state.usage.add_patch(self.sources.center(best), geom);
            state.counts[best] += 1;
            state.scores[t] = best_score;
            state.desired[t] = desired;
        }
    }

    /// One sweep over targets in descending order of their preferred score.
    /// A target whose preferred source is at the cap swaps with the holder of
    /// that source that currently scores lowest, if that holder scores below
    /// the target's preference.
    fn repair(&self, state: &mut State) {
        let cap = self.cfg.max_usage.expect("repair runs only with a cap");
        let geom = self.cfg.geom;
        let mut order: Vec<usize> = (0..state.field.len()).collect();
        order.sort_by(|&a, &b| {
            state.desired[b]
                .0
                .total_cmp(&state.desired[a].0)
                .then(a.cmp(&b))
        });

        for t in order {
            let (want_score, want) = state.desired[t];
            let current = state.field[t];
            if want == current || !(want_score > state.scores[t]) {
                continue;
            }
            if state.counts[want] < cap {
                self.reassign(state, t, want);
                continue;
            }
            let holder = (0..state.field.len())
                .filter(|&h| state.field[h] == want)
                .min_by(|&a, &b| state.scores[a].total_cmp(&state.scores[b]).then(a.cmp(&b)));
            if let Some(h) = holder {
                if state.scores[h] < want_score {
                    // Swap keeps both sources' counts unchanged.
                    state.usage.remove_patch(self.sources.center(want), geom);
                    state.usage.remove_patch(self.sources.center(current), geom);
                    state.field[t] = want;
                    state.field[h] = current;
                    state.usage.add_patch(self.sources.center(want), geom);
                    state.usage.add_patch(self.sources.center(current), geom);
                    state.scores[t] = self.live_score(state, t, want);
                    state.scores[h] = self.live_score(state, h, current);
                }
            }
        }
    }

    fn reassign(&self, state: &mut State, t: usize, to: usize) {
        let geom = self.cfg.geom;
        let from = state.field[t];
        state.usage.remove_patch(self.sources.center(from), geom);
        state.counts[from] -= 1;
        state.field[t] = to;
        state.usage.add_patch(self.sources.center(to), geom);
        state.counts[to] += 1;
        state.scores[t] = self.live_score(state, t, to);
    }

    /// Score of `t -> s` against current usage, excluding `t`'s own coverage.
    fn live_score(&self, state: &mut State, t: usize, s: usize) -> f64 {
        let geom = self.cfg.geom;
        let center = self.sources.center(s);
        state.usage.remove_patch(center, geom);
        let v = self.targets.ncc_with(t, &self.sources, s) - self.penalty(&state.usage, s);
        state.usage.add_patch(center, geom);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::reshuffle_loss;
    use crate::synth::{permute_spatial, random_map, random_permutation, rng};

    fn cfg(r: usize) -> MatchConfig {
        MatchConfig {
            geom: PatchGeometry::new(r).unwrap(),
            ..MatchConfig::default()
        }
    }

    #[test]
    fn score_formula() {
        let unit = [0.0f32, 1.0];
        assert_eq!(score(&unit, &unit, 0.0, 0.7), 1.0);
        assert_eq!(score(&unit, &unit, 2.5, 0.05), 1.0 - 0.05 * 2.5);
        let p = [0.6f32, 0.8];
        assert!((score(&p, &p, 0.0, 0.7) - 1.0).abs() < 1e-12);
        assert_eq!(score(&[0.0, 0.0], &p, 0.0, 0.05), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(3);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(3);
        c.pm_iterations = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(3);
        c.max_usage = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn strict_infeasible() {
        let mut r = rng(1);
        let o = random_map(&mut r, 2, 6, 6);
        let s = random_map(&mut r, 2, 4, 4);
        let c = MatchConfig {
            max_usage: Some(1),
            ..cfg(1)
        };
        assert!(matches!(nnc_search(&o, &s, &c), Err(Error::Infeasible(_))));
        let c = MatchConfig {
            max_usage: Some(3),
            ..cfg(1)
        };
        assert!(nnc_search(&o, &s, &c).is_ok());
    }

    #[test]
    fn usage_matches_recompute_and_seed_determinism() {
        let mut r = rng(2);
        let o = random_map(&mut r, 3, 9, 8);
        let s = random_map(&mut r, 3, 7, 10);
        for mode in [UsageMode::Online, UsageMode::Frozen] {
            for cap in [None, Some(2)] {
                let c = MatchConfig {
                    usage_mode: mode,
                    max_usage: cap,
                    seed: 99,
                    ..cfg(3)
                };
                let (f1, u1) = nnc_search(&o, &s, &c).unwrap();
                let (f2, u2) = nnc_search(&o, &s, &c).unwrap();
                assert_eq!(f1, f2);
                assert_eq!(u1, u2);
                assert_eq!(u1, recompute_usage(&f1, 7, 10));
                assert_eq!(u1.total(), (f1.len() * 9) as u64);
                f1.validate((9, 8), (7, 10)).unwrap();
                if let Some(cap) = cap {
                    assert!(f1.max_multiplicity(7, 10) <= cap as usize);
                }
            }
        }
    }

    #[test]
    fn strict_recovers_permutation() {
        let mut r = rng(3);
        let s = random_map(&mut r, 4, 5, 5);
        let perm = random_permutation(&mut r, 25);
        let (o, truth) = permute_spatial(&s, &perm);
        let c = MatchConfig {
            max_usage: Some(1),
            exhaustive_random_search: true,
            lambda: 0.0,
            ..cfg(1)
        };
        let (field, _) = nnc_search(&o, &s, &c).unwrap();
        assert_eq!(field, truth);
        assert_eq!(reshuffle_loss(&o, &s, &field).unwrap(), 0.0);
    }

    #[test]
    fn frozen_zero_usage_oracle_is_nn() {
        let mut r = rng(4);
        let o = random_map(&mut r, 2, 5, 5);
        let s = random_map(&mut r, 2, 6, 5);
        let g = PatchGeometry::new(3).unwrap();
        let usage = UsageMap::zeros(6, 5);
        let a = bruteforce_nnc_frozen(&o, &s, &usage, 0.3, g).unwrap();
        assert_eq!(a, nn_field_bruteforce(&o, &s, g).unwrap());
        assert_eq!(a, bruteforce_nnc_frozen(&o, &s, &usage, 0.3, g).unwrap());
    }

    #[test]
    fn heavy_usage_repels_assignments() {
        // Source: left half mirrors the target exactly, right half is a
        // slightly noisier copy. Heavy usage on the left pushes every match right.
        let mut r = rng(5);
        let o = random_map(&mut r, 3, 4, 4);
        let s = FeatureMap::from_fn(3, 4, 8, |c, y, x| {
            if x < 4 {
                o.get(c, y, x)
            } else {
                o.get(c, y, x - 4) * 1.01 + 0.001 * (c + y) as f32
            }
        })
        .unwrap();
        let g = PatchGeometry::new(1).unwrap();
        let mut counts = vec![0u32; 32];
        for y in 0..4 {
            for x in 0..4 {
                counts[y * 8 + x] = 100;
            }
        }
        let usage = UsageMap::from_counts(4, 8, counts).unwrap();
        let free = bruteforce_nnc_frozen(&o, &s, &UsageMap::zeros(4, 8), 0.05, g).unwrap();
        assert!(free.assignments().iter().all(|p| p.col < 4));
        let pushed = bruteforce_nnc_frozen(&o, &s, &usage, 0.05, g).unwrap();
        assert!(pushed.assignments().iter().all(|p| p.col >= 4));
    }

    #[test]
    fn warm_start_is_kept_when_optimal() {
        let mut r = rng(6);
        let s = random_map(&mut r, 3, 5, 5);
        let g = PatchGeometry::new(1).unwrap();
        let id = NNField::identity(g, 5, 5).unwrap();
        let c = MatchConfig {
            lambda: 0.0,
            ..cfg(1)
        };
        let report = nnc_search_from(&s, &s, &c, &id).unwrap();
        assert_eq!(report.field, id);
    }
}
