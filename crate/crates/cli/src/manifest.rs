use std::path::{Path, PathBuf};

use reshuffle_core::pipeline::LayerSummary;
use reshuffle_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Inputs {
    pub content_manifest: PathBuf,
    pub style_manifest: PathBuf,
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Outputs {
    pub features: PathBuf,
    pub manifest: PathBuf,
    pub image: Option<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timings {
    pub load_seconds: f64,
    pub layers: Vec<LayerSummary>,
    pub decode_image_seconds: Option<f64>,
    pub total_seconds: f64,
}

/// Record of one pipeline run. Passing it back through `--config` replays
/// the run with the same hyperparameters and seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub inputs: Inputs,
    pub outputs: Outputs,
    pub seed: u64,
    pub timings: Timings,
}

/// Reads a config file holding either a bare `PipelineConfig` or a run
/// manifest with one under `config`. Missing fields take default values.
pub fn read_config(path: &Path) -> Result<PipelineConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| format!("{} is not valid JSON: {e}", path.display()))?;
    let value = match value {
        Value::Object(mut map) if matches!(map.get("config"), Some(Value::Object(_))) => {
            map.remove("config").expect("checked above")
        }
        other => other,
    };
    serde_json::from_value(value).map_err(|e| format!("bad config in {}: {e}", path.display()))
}
