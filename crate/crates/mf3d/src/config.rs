//! The `key = value` configuration file shared by every command.
//!
//! Each key is optional; command-line flags override the file, and the file
//! overrides built-in defaults. Unknown keys are rejected.
//!
//! ```toml
//! seed = 3
//! count = 200
//! epochs = 10
//! lr_start = 0.05
//! lr_end = 0.005
//! conv_groups = [[2, 8], [2, 16], [2, 32]]
//! ```

use std::path::Path;

use mf3d_core::detector::DetectConfig;
use mf3d_core::training::TrainConfig;
use mf3d_core::ModelConfig;
use serde::Deserialize;

use crate::dataset::read_text;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,

    // synthetic data
    pub count: Option<usize>,
    pub canvas: Option<usize>,
    pub min_faces: Option<usize>,
    pub max_faces: Option<usize>,

    // training
    pub epochs: Option<usize>,
    pub lr_start: Option<f64>,
    pub lr_end: Option<f64>,
    pub short_edge: Option<usize>,
    pub blur_prob: Option<f64>,
    pub positive_grid: Option<usize>,
    pub match_iou: Option<f64>,

    // architecture
    pub conv_groups: Option<Vec<(usize, usize)>>,
    pub upsample_factor: Option<usize>,
    pub pooled_feature_dim: Option<usize>,
    pub fc_hidden_dim: Option<usize>,
    pub kernel_size: Option<usize>,

    // inference and evaluation
    pub keypoint_threshold: Option<f64>,
    pub nms_threshold: Option<f64>,
    pub max_detections: Option<usize>,
    pub refine: Option<bool>,
    pub iou: Option<f64>,
    pub mode: Option<String>,
}

impl Config {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            CliError::Format { path: path.to_path_buf(), line, message: e.message().to_string() }
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(p, &read_text(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn model(&self) -> ModelConfig {
        let d = ModelConfig::default();
        ModelConfig {
            conv_groups: self.conv_groups.clone().unwrap_or(d.conv_groups),
            upsample_factor: self.upsample_factor.unwrap_or(d.upsample_factor),
            pooled_feature_dim: self.pooled_feature_dim.unwrap_or(d.pooled_feature_dim),
            fc_hidden_dim: self.fc_hidden_dim.unwrap_or(d.fc_hidden_dim),
            kernel_size: self.kernel_size.unwrap_or(d.kernel_size),
        }
    }

    pub fn train(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            lr_start: self.lr_start.unwrap_or(d.lr_start),
            lr_end: self.lr_end.unwrap_or(d.lr_end),
            short_edge: self.short_edge.unwrap_or(d.short_edge),
            blur_prob: self.blur_prob.unwrap_or(d.blur_prob),
            positive_grid: self.positive_grid.unwrap_or(d.positive_grid),
            seed: self.seed.unwrap_or(d.seed),
            keypoint_threshold: self.keypoint_threshold.unwrap_or(d.keypoint_threshold),
            nms_threshold: self.nms_threshold.unwrap_or(d.nms_threshold),
            match_iou: self.match_iou.unwrap_or(d.match_iou),
        }
    }

    pub fn detect(&self) -> DetectConfig {
        let d = DetectConfig::default();
        DetectConfig {
            keypoint_threshold: self.keypoint_threshold.unwrap_or(d.keypoint_threshold),
            nms_threshold: self.nms_threshold.unwrap_or(d.nms_threshold),
            max_detections: self.max_detections.unwrap_or(d.max_detections),
            refine: self.refine.unwrap_or(d.refine),
        }
    }
}
