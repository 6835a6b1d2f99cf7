//! Maximum-usage sweep: how a hard cap on patch reuse trades content
//! fidelity against global style statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{content_loss, global_style_loss};
use crate::optimizer::{optimize_layer, PipelineConfig};
use crate::tensor::FeatureMap;

pub const CSV_HEADER: &str = "max_usage,content_loss,global_style_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    /// `None` is an unlimited cap.
    pub max_usage: Option<u32>,
    pub content_loss: f64,
    pub global_style_loss: f64,
}

/// Optimizes `layer` once per cap in `sweep`, everything else taken from
/// `cfg`, and measures content loss against `content` and global style loss
/// against `style`.
pub fn usage_study(
    content: &FeatureMap,
    style: &FeatureMap,
    layer: u8,
    sweep: &[Option<u32>],
    cfg: &PipelineConfig,
    normalized: bool,
) -> Result<Vec<StudyRow>> {
    sweep
        .iter()
        .map(|&cap| {
            let mut run_cfg = cfg.clone();
            run_cfg.matching.max_usage = cap;
            let (out, _) = optimize_layer(content, style, layer, &run_cfg)?;
            Ok(StudyRow {
                max_usage: cap,
                content_loss: content_loss(&out, content)?,
                global_style_loss: global_style_loss(&out, style, normalized)?,
            })
        })
        .collect()
}

/// Parses a sweep list like `1,2,3,inf`.
pub fn parse_sweep(text: &str) -> std::result::Result<Vec<Option<u32>>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "inf" | "infinity" | "unlimited" | "∞" => Ok(None),
            n => match n.parse::<u32>() {
                Ok(0) | Err(_) => Err(format!("'{n}' is not a positive usage cap or 'inf'")),
                Ok(v) => Ok(Some(v)),
            },
        })
        .collect()
}

pub fn to_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let cap = row.max_usage.map_or_else(|| "inf".to_string(), |v| v.to_string());
        writeln!(out, "{cap},{},{}", row.content_loss, row.global_style_loss).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("1, 2,3,inf").unwrap(), vec![Some(1), Some(2), Some(3), None]);
        assert!(parse_sweep("0").is_err());
        assert!(parse_sweep("x").is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            StudyRow {
                max_usage: Some(1),
                content_loss: 2.5,
                global_style_loss: 0.0,
            },
            StudyRow {
                max_usage: None,
                content_loss: 1.0,
                global_style_loss: 3.0,
            },
        ];
        assert_eq!(
            to_csv(&rows),
            "max_usage,content_loss,global_style_loss\n1,2.5,0\ninf,1,3\n"
        );
    }
}
