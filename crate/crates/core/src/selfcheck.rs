//! Built-in property suite: the reshuffle identities plus oracle
//! equivalences of the search and loss code, on seeded random instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::{ncc, UsageMap};
use crate::losses::{global_style_loss, gram, local_style_loss, nn_field_bruteforce, reshuffle_loss};
use crate::patchmatch::{nnc_search, recompute_usage, score, MatchConfig, UsageMode};
use crate::synth::{has_distinct_columns, has_distinct_directions, permute_spatial, random_map, random_permutation, rng};
use crate::tensor::{FeatureMap, PatchGeometry};

/// Deliberate faults for exercising the failure path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    #[default]
    None,
    /// Flip the sign of the usage penalty weight.
    FlipLambdaSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct Check {
    name: &'static str,
    instances: usize,
    failures: Vec<String>,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Check {
            name,
            instances: 0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.instances += 1;
        if !ok && self.failures.len() < 3 {
            self.failures.push(what());
        }
    }

    fn finish(self) -> CheckResult {
        let passed = self.failures.is_empty() && self.instances > 0;
        let detail = if passed {
            format!("{} instances ok", self.instances)
        } else {
            self.failures.join("; ")
        };
        CheckResult {
            name: self.name.to_string(),
            passed,
            instances: self.instances,
            detail,
        }
    }
}

/// Random `(F, sigma)` with `min_channels <= c <= 8`, `h, w <= 6` and
/// distinct columns; with `directions`, no two columns are parallel either.
fn permuted_instance<R: Rng>(
    r: &mut R,
    min_channels: usize,
    directions: bool,
) -> (FeatureMap, FeatureMap, crate::field::NNField) {
    loop {
        let c = r.gen_range(min_channels..=8);
        let h = r.gen_range(1..=6);
        let w = r.gen_range(1..=6);
        let s = random_map(r, c, h, w);
        let ok = if directions {
            has_distinct_directions(&s)
        } else {
            has_distinct_columns(&s)
        };
        if !ok {
            continue;
        }
        let perm = random_permutation(r, h * w);
        let (o, field) = permute_spatial(&s, &perm);
        return (s, o, field);
    }
}

fn gram_direct(m: &FeatureMap, i: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for y in 0..m.height() {
        for x in 0..m.width() {
            acc += f64::from(m.get(i, y, x)) * f64::from(m.get(j, y, x));
        }
    }
    acc
}

pub fn run_selfcheck(fault: Fault) -> SelfCheckReport {
    let mut checks = Vec::new();
    let unit = PatchGeometry::new(1).expect("1 is odd");

    let mut global = Check::new("reshuffle-global");
    let mut local = Check::new("reshuffle-local");
    let mut r = rng(0x5e1f);
    for k in 0..100 {
        let (s, o, field) = permuted_instance(&mut r, 1, false);
        let bound = 1e-5 * gram(&s).frobenius_sq();
        for normalized in [false, true] {
            let loss = global_style_loss(&o, &s, normalized).unwrap_or(f64::INFINITY);
            global.record(loss <= bound, || format!("instance {k}: loss {loss:e} > {bound:e}"));
        }
        let loss = local_style_loss(&o, &s, &field).unwrap_or(f64::INFINITY);
        local.record(loss == 0.0, || format!("instance {k}: local loss {loss:e}"));
    }
    checks.push(global.finish());
    checks.push(local.finish());

    let mut gram_check = Check::new("gram-oracle");
    let mut r = rng(0x6a4a);
    for k in 0..20 {
        let m = random_map(&mut r, 3, 4, 4);
        let g = gram(&m);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = gram_direct(&m, i, j);
                worst = worst.max((g.get(i, j) - d).abs() / d.abs().max(1e-12));
            }
        }
        gram_check.record(worst <= 1e-6, || format!("instance {k}: rel err {worst:e}"));
    }
    checks.push(gram_check.finish());

    let mut nn = Check::new("nn-oracle");
    let mut r = rng(0x4e4e);
    for k in 0..10 {
        let o = random_map(&mut r, 2, 5, 6);
        let s = random_map(&mut r, 2, 6, 5);
        let geom = PatchGeometry::new(3).expect("3 is odd");
        let cfg = MatchConfig {
            lambda: 0.0,
            geom,
            usage_mode: UsageMode::Frozen,
            exhaustive_random_search: true,
            seed: k,
            ..MatchConfig::default()
        };
        let ok = match (nnc_search(&o, &s, &cfg), nn_field_bruteforce(&o, &s, geom)) {
            (Ok((a, _)), Ok(b)) => a == b,
            _ => false,
        };
        nn.record(ok, || format!("instance {k}: search differs from brute force"));
    }
    checks.push(nn.finish());

    let mut bij = Check::new("bijection-recovery");
    let mut r = rng(0xb17e);
    for k in 0..10 {
        let (s, o, truth) = permuted_instance(&mut r, 2, true);
        let cfg = MatchConfig {
            lambda: 0.0,
            geom: unit,
            max_usage: Some(1),
            exhaustive_random_search: true,
            seed: k,
            ..MatchConfig::default()
        };
        let ok = nnc_search(&o, &s, &cfg)
            .map(|(f, _)| f == truth && reshuffle_loss(&o, &s, &f).ok() == Some(0.0))
            .unwrap_or(false);
        bij.record(ok, || format!("instance {k}: permutation not recovered"));
    }
    checks.push(bij.finish());

    let mut usage = Check::new("usage-consistency");
    let mut r = rng(0x05a6);
    for k in 0..10 {
        let o = random_map(&mut r, 2, 7, 7);
        let s = random_map(&mut r, 2, 6, 8);
        let cfg = MatchConfig {
            seed: k,
            max_usage: if k % 2 == 0 { None } else { Some(2) },
            ..MatchConfig::default()
        };
        let ok = nnc_search(&o, &s, &cfg)
            .map(|(f, u)| u == recompute_usage(&f, 6, 8))
            .unwrap_or(false);
        usage.record(ok, || format!("instance {k}: incremental usage drifted"));
    }
    checks.push(usage.finish());

    let mut sign = Check::new("usage-penalty-sign");
    let lambda = match fault {
        Fault::None => 0.05,
        Fault::FlipLambdaSign => -0.05,
    };
    let mut r = rng(0x516e);
    for k in 0..10 {
        let a = random_map(&mut r, 2, 3, 3);
        let b = random_map(&mut r, 2, 3, 3);
        let used = UsageMap::from_counts(3, 3, vec![2; 9]).expect("3x3 counts");
        let mean = used.patch_mean(crate::tensor::Pos::new(1, 1), PatchGeometry::new(3).expect("odd"));
        let plain = ncc(a.data(), b.data());
        let penalized = score(a.data(), b.data(), mean, lambda);
        sign.record(penalized < plain, || {
            format!("instance {k}: used patch scored {penalized} >= unused {plain}")
        });
    }
    checks.push(sign.finish());

    SelfCheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let report = run_selfcheck(Fault::None);
        assert!(report.passed, "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn injected_fault_names_property() {
        let report = run_selfcheck(Fault::FlipLambdaSign);
        assert!(!report.passed);
        let failed: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["usage-penalty-sign"]);
    }
}
