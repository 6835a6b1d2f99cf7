//! Coarse-to-fine optimization over layers 4, 3 and 2.
//!
//! Starting at layer 4, each layer's content features are first blended with
//! the decoded result of the coarser layer (`beta`), then optimized with the
//! EM loop, then decoded one layer down. The layer-2 result is returned; turning
//! it into an image is left to an external decoder.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::losses::{content_loss, global_style_loss, reshuffle_loss};
use crate::npy::save_tensor;
use crate::optimizer::{optimize_layer, PipelineConfig};
use crate::pyramid::{FeaturePyramid, PIPELINE_LAYERS};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Directory for per-layer outputs, fields and decoded features. Files
    /// written before a failure are left in place.
    pub artifacts_dir: Option<PathBuf>,
    /// Evaluate content, global style and reshuffle losses for every layer.
    pub report_losses: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLosses {
    pub content: f64,
    pub global_style: f64,
    pub reshuffle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: u8,
    pub optimize_seconds: f64,
    pub decode_seconds: f64,
    pub losses: Option<LayerLosses>,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub output: FeatureMap,
    pub layers: Vec<LayerSummary>,
    pub artifacts: Vec<PathBuf>,
}

pub fn run_pipeline(
    content: &FeaturePyramid,
    style: &FeaturePyramid,
    cfg: &PipelineConfig,
    decoder: &dyn Decoder,
) -> Result<FeatureMap> {
    run_pipeline_with(content, style, cfg, decoder, &PipelineOptions::default()).map(|r| r.output)
}

pub fn run_pipeline_with(
    content: &FeaturePyramid,
    style: &FeaturePyramid,
    cfg: &PipelineConfig,
    decoder: &dyn Decoder,
    options: &PipelineOptions,
) -> Result<PipelineRun> {
    cfg.validate()?;
    for layer in PIPELINE_LAYERS {
        cfg.geom(layer)?;
        let (c, s) = (content.layer(layer)?, style.layer(layer)?);
        if c.channels() != s.channels() {
            return Err(Error::Shape(format!(
                "layer {layer}: content has {} channels, style has {}",
                c.channels(),
                s.channels()
            )));
        }
    }
    content.validate_progression()?;

    let mut artifacts = Vec::new();
    let save = |name: String, map: &FeatureMap, artifacts: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = &options.artifacts_dir {
            let path = dir.join(name);
            save_tensor(map, &path)?;
            artifacts.push(path);
        }
        Ok(())
    };
    if let Some(dir) = &options.artifacts_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut layers = Vec::new();
    let mut decoded = content.layer(PIPELINE_LAYERS[0])?.clone();
    let mut output = None;
    for layer in PIPELINE_LAYERS {
        let style_l = style.layer(layer)?;
        let content_l = decoded.blend(cfg.beta, content.layer(layer)?, 1.0 - cfg.beta)?;

        let started = Instant::now();
        let (out, field) = optimize_layer(&content_l, style_l, layer, cfg)?;
        let optimize_seconds = started.elapsed().as_secs_f64();
        save(format!("layer{layer}_output.npy"), &out, &mut artifacts)?;
        if let Some(dir) = &options.artifacts_dir {
            let path = dir.join(format!("layer{layer}_field.npy"));
            field.to_npy().write(&path)?;
            artifacts.push(path);
        }

        let losses = if options.report_losses {
            Some(LayerLosses {
                content: content_loss(&out, &content_l)?,
                global_style: global_style_loss(&out, style_l, true)?,
                reshuffle: reshuffle_loss(&out, style_l, &field)?,
            })
        } else {
            None
        };

        let mut decode_seconds = 0.0;
        if layer > 2 {
            let started = Instant::now();
            decoded = decoder.decode(&out, layer, layer - 1)?;
            decode_seconds = started.elapsed().as_secs_f64();
            let expected = content.layer(layer - 1)?.shape();
            if decoded.shape() != expected {
                return Err(Error::Shape(format!(
                    "decoding layer {layer} gave {:?}, layer {} content is {expected:?}",
                    decoded.shape(),
                    layer - 1
                )));
            }
            save(format!("layer{}_decoded.npy", layer - 1), &decoded, &mut artifacts)?;
        }
        layers.push(LayerSummary {
            layer,
            optimize_seconds,
            decode_seconds,
            losses,
        });
        output = Some(out);
    }

    Ok(PipelineRun {
        output: output.expect("pipeline has layers"),
        layers,
        artifacts,
    })
}

/// Path helper for artifacts named by layer.
pub fn artifact_path(dir: &Path, layer: u8, kind: &str) -> PathBuf {
    dir.join(format!("layer{layer}_{kind}.npy"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::BuiltinTestDecoder;
    use crate::synth::{random_pyramid, rng};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            em_iterations: 2,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn passes_content_through_with_alpha_one_beta_zero() {
        let mut r = rng(1);
        let c = random_pyramid(&mut r, 4, 6, "c");
        let s = random_pyramid(&mut r, 4, 6, "s");
        let cfg = PipelineConfig {
            alpha: 1.0,
            beta: 0.0,
            ..small_config()
        };
        let out = run_pipeline(&c, &s, &cfg, &BuiltinTestDecoder).unwrap();
        assert_eq!(&out, c.layer(2).unwrap());
    }

    #[test]
    fn writes_artifacts_and_keeps_them_on_failure() {
        struct Failing;
        impl Decoder for Failing {
            fn decode(&self, _: &FeatureMap, _: u8, _: u8) -> Result<FeatureMap> {
                Err(Error::Decoder("nope".into()))
            }
        }
        let mut r = rng(2);
        let c = random_pyramid(&mut r, 2, 6, "c");
        let s = random_pyramid(&mut r, 2, 6, "s");
        let dir = tempfile::tempdir().unwrap();
        let options = PipelineOptions {
            artifacts_dir: Some(dir.path().to_path_buf()),
            report_losses: true,
        };
        let err = run_pipeline_with(&c, &s, &small_config(), &Failing, &options).unwrap_err();
        assert!(matches!(err, Error::Decoder(_)));
        assert!(artifact_path(dir.path(), 4, "output").exists());
        assert!(artifact_path(dir.path(), 4, "field").exists());

        let run = run_pipeline_with(&c, &s, &small_config(), &BuiltinTestDecoder, &options).unwrap();
        assert_eq!(run.layers.len(), 3);
        assert!(run.layers.iter().all(|l| l.losses.is_some()));
        assert!(artifact_path(dir.path(), 2, "output").exists());
        assert!(artifact_path(dir.path(), 3, "decoded").exists());
    }

    #[test]
    fn rejects_broken_progression() {
        let mut r = rng(3);
        let mut c = random_pyramid(&mut r, 2, 6, "c");
        let s = random_pyramid(&mut r, 2, 6, "s");
        c.layers.insert(2, FeatureMap::zeros(2, 20, 20).unwrap());
        assert!(matches!(
            run_pipeline(&c, &s, &small_config(), &BuiltinTestDecoder),
            Err(Error::Shape(_))
        ));
    }
}
