//! Single-layer EM optimization in the feature domain.
//!
//! The output starts at the content features. Each iteration matches the
//! current output against the style features (E-step), warps the style
//! features along that field by averaging overlapping patches, and blends the
//! result with the content features (M-step):
//!
//! ```text
//! F_o <- alpha * F_c + (1 - alpha) * warp(F_s, field)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::NNField;
use crate::patchmatch::{nnc_search_from, nnc_search_report, MatchConfig};
use crate::tensor::{FeatureMap, PatchGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderBinding {
    BuiltinTest,
    ExternalCommand {
        command_template: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_timeout_secs() -> u64 {
    600
}

/// All hyperparameters of a run. `matching.lambda` and `matching.geom` are
/// replaced per layer by `lambda` and `patch_sizes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub alpha: f32,
    pub beta: f32,
    pub lambda: f64,
    pub patch_sizes: BTreeMap<u8, usize>,
    pub em_iterations: usize,
    pub matching: MatchConfig,
    pub decoder: DecoderBinding,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 0.5,
            beta: 1.0,
            lambda: 0.05,
            patch_sizes: BTreeMap::from([(2, 5), (3, 5), (4, 3)]),
            em_iterations: 5,
            matching: MatchConfig::default(),
            decoder: DecoderBinding::BuiltinTest,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "alpha and beta must lie in [0, 1], got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.em_iterations == 0 {
            return Err(Error::Config("em_iterations must be at least 1".into()));
        }
        for (&layer, &r) in &self.patch_sizes {
            PatchGeometry::new(r)
                .map_err(|e| Error::Config(format!("patch size for layer {layer}: {e}")))?;
        }
        MatchConfig {
            lambda: self.lambda,
            ..self.matching.clone()
        }
        .validate()
    }

    pub fn geom(&self, layer: u8) -> Result<PatchGeometry> {
        let r = self
            .patch_sizes
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no patch size configured for layer {layer}")))?;
        PatchGeometry::new(*r)
    }

    /// Matching parameters for one E-step. Seeds differ per layer and
    /// iteration but derive only from the configured seed.
    pub fn match_config(&self, layer: u8, iteration: usize) -> Result<MatchConfig> {
        let cfg = MatchConfig {
            lambda: self.lambda,
            geom: self.geom(layer)?,
            seed: self.matching.seed ^ (u64::from(layer) << 32 | iteration as u64),
            ..self.matching.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Rebuilds a target-shaped map from the source patches named by `field`,
/// averaging all contributions that overlap each pixel. Pixels no patch covers
/// take their value from `fallback` (or zero without one).
pub fn warp_vote_with_fallback(
    style: &FeatureMap,
    field: &NNField,
    fallback: Option<&FeatureMap>,
) -> Result<FeatureMap> {
    if field.is_empty() {
        return Err(Error::Shape("cannot warp with an empty field".into()));
    }
    let (h, w) = field.target_extent();
    field.validate((h, w), (style.height(), style.width()))?;
    let c = style.channels();
    if let Some(f) = fallback {
        if f.shape() != (c, h, w) {
            return Err(Error::Shape(format!(
                "fallback {:?} does not match warp target ({c}, {h}, {w})",
                f.shape()
            )));
        }
    }
    let geom = field.geom();
    let r = geom.radius();
    let size = geom.patch_size();

    let mut sums = vec![0.0f64; c * h * w];
    let mut votes = vec![0u32; h * w];
    for (t, s) in field.pairs() {
        for dy in 0..size {
            let ty = t.row + dy - r;
            let sy = s.row + dy - r;
            for dx in 0..size {
                let tx = t.col + dx - r;
                let sx = s.col + dx - r;
                votes[ty * w + tx] += 1;
                for ch in 0..c {
                    sums[(ch * h + ty) * w + tx] += f64::from(style.get(ch, sy, sx));
                }
            }
        }
    }

    let mut data = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let i = ch * h * w + p;
            data[i] = match votes[p] {
                0 => fallback.map_or(0.0, |f| f.data()[i]),
                n => (sums[i] / f64::from(n)) as f32,
            };
        }
    }
    FeatureMap::new(c, h, w, data)
}

pub fn warp_vote(style: &FeatureMap, field: &NNField) -> Result<FeatureMap> {
    warp_vote_with_fallback(style, field, None)
}

/// State after one EM iteration, handed to observers.
pub struct EmStep<'a> {
    pub iteration: usize,
    pub field: &'a NNField,
    pub warped: &'a FeatureMap,
    pub output: &'a FeatureMap,
}

pub fn optimize_layer(
    content: &FeatureMap,
    style: &FeatureMap,
    layer: u8,
    cfg: &PipelineConfig,
) -> Result<(FeatureMap, NNField)> {
    optimize_layer_observed(content, style, layer, cfg, |_| {})
}

/// [`optimize_layer`] with a callback after every iteration. The first
/// E-step starts from a random field; later ones start from the previous
/// field with a fresh usage map.
pub fn optimize_layer_observed(
    content: &FeatureMap,
    style: &FeatureMap,
    layer: u8,
    cfg: &PipelineConfig,
    mut observe: impl FnMut(EmStep<'_>),
) -> Result<(FeatureMap, NNField)> {
    cfg.validate()?;
    if content.channels() != style.channels() {
        return Err(Error::Shape(format!(
            "layer {layer}: content has {} channels, style has {}",
            content.channels(),
            style.channels()
        )));
    }
    let mut output = content.clone();
    let mut field: Option<NNField> = None;
    for iteration in 1..=cfg.em_iterations {
        let mcfg = cfg.match_config(layer, iteration)?;
        let report = match &field {
            None => nnc_search_report(&output, style, &mcfg)?,
            Some(prev) => nnc_search_from(&output, style, &mcfg, prev)?,
        };
        let warped = warp_vote_with_fallback(style, &report.field, Some(content))?;
        output = content.blend(cfg.alpha, &warped, 1.0 - cfg.alpha)?;
        observe(EmStep {
            iteration,
            field: &report.field,
            warped: &warped,
            output: &output,
        });
        field = Some(report.field);
    }
    Ok((output, field.expect("at least one EM iteration")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{permute_spatial, random_map, random_permutation, rng};
    use crate::tensor::Pos;

    fn config(r: usize) -> PipelineConfig {
        PipelineConfig {
            patch_sizes: BTreeMap::from([(2, r), (3, r), (4, r)]),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn defaults_match_published_settings() {
        let d = PipelineConfig::default();
        assert_eq!(d.alpha, 0.5);
        assert_eq!(d.beta, 1.0);
        assert_eq!(d.lambda, 0.05);
        assert_eq!(d.em_iterations, 5);
        assert_eq!(d.patch_sizes, BTreeMap::from([(2, 5), (3, 5), (4, 3)]));
    }

    #[test]
    fn config_json_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"alpha": 0.25}"#).unwrap();
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.em_iterations, 5);
        let text = serde_json::to_string(&PipelineConfig::default()).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, PipelineConfig::default());
        let ext: DecoderBinding = serde_json::from_str(
            r#"{"kind": "external_command", "command_template": "dec {in} {out}"}"#,
        )
        .unwrap();
        assert_eq!(
            ext,
            DecoderBinding::ExternalCommand {
                command_template: "dec {in} {out}".into(),
                timeout_secs: 600
            }
        );
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = PipelineConfig::default();
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.patch_sizes.insert(3, 4);
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.em_iterations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unit_patch_warp_copies_columns() {
        let s = random_map(&mut rng(1), 3, 3, 4);
        let g = PatchGeometry::new(1).unwrap();
        let assignments: Vec<Pos> = (0..6).map(|k| Pos::new(k % 3, (k * 7) % 4)).collect();
        let field = NNField::for_target(g, 2, 3, assignments.clone()).unwrap();
        let out = warp_vote(&s, &field).unwrap();
        assert_eq!(out.shape(), (3, 2, 3));
        for (k, src) in assignments.iter().enumerate() {
            assert_eq!(out.column(Pos::new(k / 3, k % 3)), s.column(*src));
        }
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let s = random_map(&mut rng(2), 2, 6, 5);
        let g = PatchGeometry::new(3).unwrap();
        let out = warp_vote(&s, &NNField::identity(g, 6, 5).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(s.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn empty_field_is_rejected() {
        let s = random_map(&mut rng(3), 1, 3, 3);
        let g = PatchGeometry::new(1).unwrap();
        let field = NNField::new(g, 0, 0, vec![]).unwrap();
        assert!(warp_vote(&s, &field).is_err());
    }

    #[test]
    fn alpha_one_is_identity() {
        let mut r = rng(4);
        let c = random_map(&mut r, 3, 6, 6);
        let s = random_map(&mut r, 3, 7, 5);
        let cfg = PipelineConfig {
            alpha: 1.0,
            em_iterations: 3,
            ..config(3)
        };
        let (out, _) = optimize_layer(&c, &s, 2, &cfg).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn self_match_is_fixed_point() {
        let s = random_map(&mut rng(5), 4, 5, 5);
        let cfg = PipelineConfig {
            alpha: 0.0,
            lambda: 0.0,
            ..config(1)
        };
        let (out, field) = optimize_layer(&s, &s, 2, &cfg).unwrap();
        assert_eq!(out, s);
        assert_eq!(field, NNField::identity(PatchGeometry::new(1).unwrap(), 5, 5).unwrap());
    }

    #[test]
    fn strict_reshuffle_reproduces_permuted_content() {
        let mut r = rng(6);
        let s = random_map(&mut r, 4, 4, 5);
        let perm = random_permutation(&mut r, 20);
        let (c, _) = permute_spatial(&s, &perm);
        let mut cfg = PipelineConfig {
            alpha: 0.0,
            lambda: 0.0,
            ..config(1)
        };
        cfg.matching.max_usage = Some(1);
        cfg.matching.exhaustive_random_search = true;
        let (out, field) = optimize_layer(&c, &s, 2, &cfg).unwrap();
        assert_eq!(out, c);
        assert!(field.is_bijection(4, 5));
        let loss = crate::losses::global_style_loss(&out, &s, false).unwrap();
        assert!(loss <= 1e-5 * crate::losses::gram(&s).frobenius_sq());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut r = rng(7);
        let c = random_map(&mut r, 3, 5, 5);
        let s = random_map(&mut r, 2, 5, 5);
        assert!(optimize_layer(&c, &s, 2, &config(3)).is_err());
    }
}
