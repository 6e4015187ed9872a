use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lsgcn::model::ModelConfig;
use lsgcn::trainer::TrainConfig;

use crate::commands::CliError;

fn default_seeds() -> usize {
    1
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Number of consecutive seeds starting at `train.seed`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides and validates the result.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        seeds: Option<usize>,
        max_epochs: Option<usize>,
    ) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(k) = seeds {
            self.seeds = k;
        }
        if let Some(m) = max_epochs {
            self.train.max_epochs = m;
            self.train.patience = self.train.patience.min(m);
        }
        if self.seeds == 0 {
            return Err(CliError::Config("seeds must be at least 1".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.train.seed + i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> RunConfig {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn overrides_apply_and_clamp_patience() {
        let cfg = parse(
            r#"{"model": {"transformed_dim": 4, "code_dim": 2, "kernels": 2, "receptive_field": 1},
                "train": {"learning_rate": 0.01, "seed": 3}, "seeds": 2}"#,
        );
        assert_eq!(cfg.seed_list(), vec![3, 4]);
        let o = cfg.clone().with_overrides(Some(10), Some(3), Some(0)).unwrap();
        assert_eq!(o.seed_list(), vec![10, 11, 12]);
        assert_eq!((o.train.max_epochs, o.train.patience), (0, 0));
        assert!(cfg.with_overrides(None, Some(0), None).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let json = r#"{"model": {"transformed_dim": 4}, "train": {"learning_rate": 0.1}, "extra": 1}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }
}
