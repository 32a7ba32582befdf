use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcnn::model::{ModelSpec, RankConfig};
use tcnn::train::TrainConfig;

use crate::{CliError, Result};

/// Synthetic dataset parameters, or a directory to read instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub defect_fraction: f64,
    /// Train/val/test.
    pub fractions: [f64; 3],
    /// Existing dataset directory with an `index.csv`; overrides the
    /// synthetic generator when set.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 11_728,
            defect_fraction: 1.0 / 3.0,
            fractions: [0.8, 0.1, 0.1],
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch: usize,
    pub repeats: usize,
    /// Largest batch `bench` will allocate.
    pub max_batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            repeats: 10,
            max_batch: 1024,
        }
    }
}

/// Everything a command needs, read from one JSON file and then patched by
/// command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    /// Defaults to the reference architecture at `image_size`.
    pub model: Option<ModelSpec>,
    pub ranks: Option<RankConfig>,
    /// Model initialization seed.
    pub seed: u64,
    /// Several initialization seeds; takes precedence over `seed`.
    pub seeds: Option<Vec<u64>>,
    /// Seeds dataset generation, splitting, sampling and augmentation.
    pub data_seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            model: None,
            ranks: None,
            seed: 0,
            seeds: None,
            data_seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            out: None,
        }
    }
}

fn invalid(key: &str, msg: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            key: e.path().to_string(),
            msg: e.inner().to_string(),
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    /// The dense architecture, before any rank configuration is applied.
    pub fn base_spec(&self) -> ModelSpec {
        self.model
            .clone()
            .unwrap_or_else(|| ModelSpec::reference(self.image_size))
    }

    /// Training config with the shared data seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            data_seed: self.data_seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < tcnn::data::MIN_SIDE as usize {
            return Err(invalid(
                "image_size",
                format!("must be at least {}", tcnn::data::MIN_SIDE),
            ));
        }
        if let Some(model) = &self.model {
            model
                .validate()
                .map_err(|e| invalid("model", e.to_string()))?;
            let [_, h, w] = model.input_shape;
            if h != self.image_size || w != self.image_size {
                return Err(invalid(
                    "model.input_shape",
                    format!("{h}x{w} does not match image_size {}", self.image_size),
                ));
            }
        } else if !self.image_size.is_multiple_of(16) {
            return Err(invalid(
                "image_size",
                "the reference architecture needs a multiple of 16",
            ));
        }
        if let Some(r) = &self.ranks {
            r.validate().map_err(|e| invalid("ranks", e.to_string()))?;
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(invalid("seeds", "must list at least one seed"));
            }
        }
        if self.train.data_seed != 0 {
            return Err(invalid(
                "train.data_seed",
                "set the top-level data_seed instead",
            ));
        }
        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        let d = &self.data;
        if d.n == 0 {
            return Err(invalid("data.n", "must be positive"));
        }
        if !(d.defect_fraction > 0.0 && d.defect_fraction < 1.0) {
            return Err(invalid("data.defect_fraction", "must lie in (0, 1)"));
        }
        if d.fractions.iter().any(|f| !(*f >= 0.0))
            || (d.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(invalid(
                "data.fractions",
                "must be nonnegative and sum to 1",
            ));
        }
        let b = &self.bench;
        if b.batch == 0 || b.repeats == 0 {
            return Err(invalid("bench", "batch and repeats must be positive"));
        }
        if b.batch > b.max_batch {
            return Err(invalid(
                "bench.batch",
                format!("{} exceeds max_batch {}", b.batch, b.max_batch),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = RunConfig::from_json(r#"{"train": {"epochz": 3}}"#).unwrap_err();
        match err {
            CliError::Config { key, msg } => {
                assert_eq!(key, "train.epochz");
                assert!(msg.contains("epochz"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        let err = RunConfig::from_json(r#"{"data": {"n": "many"}}"#).unwrap_err();
        assert!(
            matches!(err, CliError::Config { ref key, .. } if key == "data.n"),
            "{err:?}"
        );
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let mut cfg = RunConfig::default();
        cfg.data.defect_fraction = 1.5;
        assert!(
            matches!(cfg.validate(), Err(CliError::Config { key, .. }) if key == "data.defect_fraction")
        );
        let cfg = RunConfig {
            image_size: 60,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CliError::Config { key, .. }) if key == "image_size"));
    }
}
