use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drafting::TreeConfig;
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::training::{CorpusConfig, TaskKind, TrainConfig};

/// Corpus plus the two training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub corpus: CorpusConfig,
    pub target: TrainConfig,
    pub draft: TrainConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let toy = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 8,
            seq_len: 128,
            steps: 400,
            ..TrainConfig::default()
        };
        Self {
            corpus: CorpusConfig::default(),
            target: TrainConfig {
                eval_every: 100,
                ..toy.clone()
            },
            draft: toy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub tasks: Vec<TaskKind>,
    pub temperatures: Vec<f64>,
    /// Prompts drawn from the eval split per task.
    pub prompts_per_task: usize,
    pub max_new: usize,
    /// Leading prompts excluded from wall-time measurement.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            temperatures: vec![0.0, 1.0],
            prompts_per_task: 20,
            max_new: 64,
            warmup: 2,
            seed: 0,
        }
    }
}

/// Top-level configuration file. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub drafting: TreeConfig,
    pub bench: BenchConfig,
}

impl AppConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: AppConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.vocab_size < 258 {
            return Err(Error::Config("model.vocab_size must be at least 258".into()));
        }
        self.training.target.validate()?;
        self.training.draft.validate()?;
        for t in [&self.training.target, &self.training.draft] {
            if t.seq_len > self.model.max_seq_len {
                return Err(Error::Config("training seq_len exceeds model.max_seq_len".into()));
            }
        }
        self.drafting
            .validate()
            .map_err(|e| Error::Config(format!("drafting: {e}")))?;
        let b = &self.bench;
        if b.tasks.is_empty() || b.temperatures.is_empty() {
            return Err(Error::Config("bench.tasks and bench.temperatures must be nonempty".into()));
        }
        if let Some(t) = b.temperatures.iter().find(|&&t| !(t == 0.0 || (t > 0.0 && t <= 2.0))) {
            return Err(Error::Config(format!("bench temperature {t} outside {{0}} or (0, 2]")));
        }
        if b.prompts_per_task == 0 || b.max_new == 0 {
            return Err(Error::Config("bench.prompts_per_task and bench.max_new must be positive".into()));
        }
        Ok(())
    }

    /// Routes one seed into every random stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.corpus.seed = seed;
        self.training.target.seed = seed;
        self.training.draft.seed = seed;
        self.bench.seed = seed;
        self
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = AppConfig::default();
        c.validate().unwrap();
        let back = AppConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for s in [
            r#"{"modle": {}}"#,
            r#"{"model": {"vocab_size": 512, "colour": 1}}"#,
            r#"{"bench": {"tasks": ["continuation"], "extra": 0}}"#,
            r#"{"training": {"draft": {"lr": 0.1}}}"#,
        ] {
            assert!(matches!(AppConfig::from_json(s), Err(Error::Config(_))), "{s}");
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = AppConfig::from_json(r#"{"drafting": {"depth": 3, "top_k": 2, "select_m": 2, "budget": 6}}"#).unwrap();
        assert_eq!(c.drafting.depth, 3);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = AppConfig::default();
        c.bench.temperatures = vec![2.5];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = AppConfig::default();
        c.drafting.budget = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_changes_hash() {
        let a = AppConfig::default().with_seed(1);
        let b = AppConfig::default().with_seed(2);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
