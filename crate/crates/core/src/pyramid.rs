//! Multi-layer feature pyramids and their JSON manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{load_tensor, save_tensor};
use crate::tensor::FeatureMap;

/// Layers the pipeline runs on, coarsest first.
pub const PIPELINE_LAYERS: [u8; 3] = [4, 3, 2];

/// On-disk manifest: `{"layers": {"2": path, ...}, "source": .., "extractor": ..}`.
/// Relative layer paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidManifest {
    pub layers: BTreeMap<String, PathBuf>,
    pub source: String,
    pub extractor: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub layers: BTreeMap<u8, FeatureMap>,
    pub source: String,
    pub extractor: String,
}

impl FeaturePyramid {
    pub fn new(source: impl Into<String>, extractor: impl Into<String>) -> Self {
        FeaturePyramid {
            layers: BTreeMap::new(),
            source: source.into(),
            extractor: extractor.into(),
        }
    }

    pub fn with_layer(mut self, layer: u8, map: FeatureMap) -> Self {
        self.layers.insert(layer, map);
        self
    }

    pub fn layer(&self, layer: u8) -> Result<&FeatureMap> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Shape(format!("pyramid '{}' has no layer {layer}", self.source)))
    }

    /// Checks that every pipeline layer is present and that each step from
    /// layer `l` to `l - 1` doubles the spatial size and halves the channels.
    pub fn validate_progression(&self) -> Result<()> {
        for pair in PIPELINE_LAYERS.windows(2) {
            let coarse = self.layer(pair[0])?;
            let fine = self.layer(pair[1])?;
            let (cc, ch, cw) = coarse.shape();
            if fine.shape() != (cc / 2, ch * 2, cw * 2) || cc % 2 != 0 {
                return Err(Error::Shape(format!(
                    "layer {} {:?} and layer {} {:?} break the x2 progression",
                    pair[0],
                    coarse.shape(),
                    pair[1],
                    fine.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: PyramidManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut pyramid = FeaturePyramid::new(manifest.source, manifest.extractor);
        for (key, path) in manifest.layers {
            let layer: u8 = key
                .parse()
                .map_err(|_| Error::Format(format!("layer key '{key}' is not an integer")))?;
            let path = if path.is_absolute() { path } else { base.join(path) };
            pyramid.layers.insert(layer, load_tensor(&path)?);
        }
        Ok(pyramid)
    }

    /// Writes `layer<l>.npy` per layer plus `manifest.json` into `dir`.
    /// Returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut layers = BTreeMap::new();
        for (layer, map) in &self.layers {
            let name = format!("layer{layer}.npy");
            save_tensor(map, dir.join(&name))?;
            layers.insert(layer.to_string(), PathBuf::from(name));
        }
        let manifest = PyramidManifest {
            layers,
            source: self.source.clone(),
            extractor: self.extractor.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pyramid(channels: usize, size: usize) -> FeaturePyramid {
        FeaturePyramid::new("t", "synthetic")
            .with_layer(4, FeatureMap::zeros(channels * 4, size, size).unwrap())
            .with_layer(3, FeatureMap::zeros(channels * 2, size * 2, size * 2).unwrap())
            .with_layer(2, FeatureMap::zeros(channels, size * 4, size * 4).unwrap())
    }

    #[test]
    fn progression_accepts_doubling() {
        pyramid(2, 2).validate_progression().unwrap();
    }

    #[test]
    fn progression_rejects_wrong_sizes() {
        let mut p = pyramid(2, 2);
        p.layers.insert(3, FeatureMap::zeros(4, 5, 4).unwrap());
        assert!(matches!(p.validate_progression(), Err(Error::Shape(_))));
        let mut p = pyramid(2, 2);
        p.layers.remove(&2);
        assert!(p.validate_progression().is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = pyramid(1, 2);
        let manifest = p.save(dir.path()).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(raw["layers"]["2"], "layer2.npy");
        assert_eq!(raw["extractor"], "synthetic");
        assert_eq!(FeaturePyramid::load(&manifest).unwrap(), p);
    }
}
