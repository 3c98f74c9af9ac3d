//! JSON checkpoints: architecture plus every named parameter tensor.

use std::path::Path;

use mf3d_core::{Model, ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_text, write_text};
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub conv_groups: Vec<(usize, usize)>,
    pub upsample_factor: usize,
    pub pooled_feature_dim: usize,
    pub fc_hidden_dim: usize,
    pub kernel_size: usize,
}

impl From<&ModelConfig> for Architecture {
    fn from(c: &ModelConfig) -> Self {
        Self {
            conv_groups: c.conv_groups.clone(),
            upsample_factor: c.upsample_factor,
            pooled_feature_dim: c.pooled_feature_dim,
            fc_hidden_dim: c.fc_hidden_dim,
            kernel_size: c.kernel_size,
        }
    }
}

impl From<Architecture> for ModelConfig {
    fn from(a: Architecture) -> Self {
        Self {
            conv_groups: a.conv_groups,
            upsample_factor: a.upsample_factor,
            pooled_feature_dim: a.pooled_feature_dim,
            fc_hidden_dim: a.fc_hidden_dim,
            kernel_size: a.kernel_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let tensors = model
            .params()
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorRecord { name, dims: t.dims.clone(), data: t.data.clone() })
            .collect();
        Self { format_version: FORMAT_VERSION, architecture: model.config().into(), tensors }
    }

    /// Rebuilds the model; every tensor of the architecture must be present
    /// exactly once with matching dimensions.
    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Invalid(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let config: ModelConfig = self.architecture.clone().into();
        config.validate()?;
        let mut params = ModelParams::zeros(&config);
        let expected = params.tensors().len();
        if self.tensors.len() != expected {
            return Err(CliError::Invalid(format!("checkpoint has {} tensors, expected {expected}", self.tensors.len())));
        }
        for rec in &self.tensors {
            let t = params
                .get_mut(&rec.name)
                .ok_or_else(|| CliError::Invalid(format!("unknown tensor {:?} in checkpoint", rec.name)))?;
            if t.dims != rec.dims || t.data.len() != rec.data.len() {
                return Err(CliError::Invalid(format!("tensor {:?} has dims {:?}, expected {:?}", rec.name, rec.dims, t.dims)));
            }
            t.data.copy_from_slice(&rec.data);
        }
        Ok(Model::from_params(config, params)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoints serialise");
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Format { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = Model::new(ModelConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::from_model(&model).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.config(), model.config());
    }

    #[test]
    fn version_and_shape_mismatches_are_rejected() {
        let model = Model::new(ModelConfig::default(), 3).unwrap();
        let mut c = Checkpoint::from_model(&model);
        c.format_version = 99;
        assert!(matches!(c.to_model(), Err(CliError::Invalid(_))));
        let mut c = Checkpoint::from_model(&model);
        c.tensors[0].dims[0] += 1;
        assert!(c.to_model().is_err());
        let mut c = Checkpoint::from_model(&model);
        c.tensors.pop();
        assert!(c.to_model().is_err());
    }
}
