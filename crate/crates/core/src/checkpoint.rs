//! Self-describing JSON checkpoints.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so save/load reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSchema;
use crate::error::{Error, Result};
use crate::models::{ModelParams, ModelVariant};
use crate::optim::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: ModelVariant,
    pub dim: usize,
    /// Fingerprint of the training configuration; empty for planted models.
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    pub dataset: DatasetSchema,
    pub model: ModelParams,
}

impl Checkpoint {
    pub fn new(model: ModelParams, dataset: DatasetSchema, config: Option<TrainConfig>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            variant: model.variant(),
            dim: model.dim(),
            fingerprint: config.as_ref().map(TrainConfig::fingerprint).unwrap_or_default(),
            config,
            dataset,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let format = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| format(e.to_string()))?;
        if checkpoint.format_version != FORMAT_VERSION {
            return Err(format(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                checkpoint.format_version
            )));
        }
        checkpoint.check().map_err(|e| format(e.to_string()))?;
        Ok(checkpoint)
    }

    fn check(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        if self.model.variant() != self.variant || self.model.dim() != self.dim {
            return Err(Error::contract("header does not match the stored model"));
        }
        if self.model.schema() != &self.dataset.families {
            return Err(Error::contract("model families differ from the dataset schema"));
        }
        Ok(())
    }

    /// Fails with the first mismatched family when `dataset` was not
    /// produced under the same schema as this checkpoint.
    pub fn ensure_compatible(&self, dataset: &DatasetSchema) -> Result<()> {
        match self.dataset.mismatch(dataset) {
            Some(family) => Err(Error::SchemaMismatch(family)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, PlantedConfig, SyntheticKind};
    use crate::slate::FeatureSpec;

    #[test]
    fn round_trips_bitwise() {
        let config = PlantedConfig {
            records: 50,
            users: 7,
            movies: 11,
            ..PlantedConfig::default()
        };
        for kind in [SyntheticKind::Regression, SyntheticKind::Click] {
            let (data, model) = generate_synthetic(kind, &config, 3).unwrap();
            let ckpt = Checkpoint::new(model, data.schema().clone(), None);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("nested/ckpt.json");
            ckpt.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.to_json(), ckpt.to_json());
        }
    }

    #[test]
    fn rejects_corrupt_and_mismatched() {
        let config = PlantedConfig {
            records: 20,
            users: 3,
            movies: 6,
            ..PlantedConfig::default()
        };
        let (data, model) = generate_synthetic(SyntheticKind::Regression, &config, 1).unwrap();
        let ckpt = Checkpoint::new(model, data.schema().clone(), None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, ckpt.to_json().replace("\"dim\":5", "\"dim\":4")).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("c.json"), "{err}");

        let mut other = data.schema().clone();
        let mut families = other.families.families().to_vec();
        families[0] = FeatureSpec::categorical("movie", 99);
        other.families = crate::slate::Schema::new(families).unwrap();
        let err = ckpt.ensure_compatible(&other).unwrap_err();
        assert!(err.to_string().contains("movie"));
    }
}
