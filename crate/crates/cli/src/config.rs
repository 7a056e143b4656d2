//! Run configuration: every section has defaults, so an empty `{}` file is valid.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use recipe_retrieval::corpus::GeneratorSpec;
use recipe_retrieval::objectives::LossConfig;
use recipe_retrieval::retrieval_eval::EvalConfig;
use recipe_retrieval::scalar::Precision;
use recipe_retrieval::text_encoder::{ShapeConfig, SkipGramConfig};
use recipe_retrieval::trainer::{GradCheckConfig, TrainConfig};

/// Input and output locations. Unset files live under `data_dir` / `run_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub tokenized: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
            corpus: None,
            features: None,
            split: None,
            tokenized: None,
            vocab: None,
            checkpoint: None,
            train_log: None,
            report: None,
        }
    }
}

fn or_under(p: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| dir.join(name))
}

impl Paths {
    pub fn corpus(&self) -> PathBuf {
        or_under(&self.corpus, &self.data_dir, "corpus.jsonl")
    }
    pub fn features(&self) -> PathBuf {
        or_under(&self.features, &self.data_dir, "features.txt")
    }
    pub fn split(&self) -> PathBuf {
        or_under(&self.split, &self.data_dir, "split.json")
    }
    pub fn tokenized(&self) -> PathBuf {
        or_under(&self.tokenized, &self.data_dir, "tokenized.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        or_under(&self.vocab, &self.data_dir, "vocab.tsv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        or_under(&self.checkpoint, &self.run_dir, "model.json")
    }
    pub fn train_log(&self) -> PathBuf {
        or_under(&self.train_log, &self.run_dir, "train_log.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        or_under(&self.report, &self.run_dir, "report.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random stream; section-level seeds are overwritten from it.
    pub seed: u64,
    pub precision: Precision,
    /// Vocabulary frequency threshold.
    pub min_freq: usize,
    pub shape: ShapeConfig,
    pub generator: GeneratorSpec,
    pub skipgram: SkipGramConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            precision: Precision::F64,
            min_freq: 2,
            shape: ShapeConfig::desk(),
            generator: GeneratorSpec::default(),
            skipgram: SkipGramConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig {
                lr0: 1e-3,
                max_stage_epochs: 40,
                ..TrainConfig::default()
            },
            // the default synthetic test split holds 600 recipes
            eval: EvalConfig {
                subset_size: 500,
                ..EvalConfig::default()
            },
            gradcheck: GradCheckConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Copies the master seed into every section.
    pub fn resolve_seeds(&mut self) {
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.gradcheck.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.generator.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.min_freq == 0 {
            bail!("invalid configuration `min_freq`: must be at least 1");
        }
        if self.gradcheck.tolerance <= 0.0 || self.gradcheck.step <= 0.0 {
            bail!("invalid configuration `gradcheck`: tolerance and step must be positive");
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serialisable")
    }
}

/// Fails with a message naming `key` when `path` does not exist.
pub fn require_file(path: &Path, key: &str) -> Result<()> {
    if !path.is_file() {
        bail!("`{key}` points to {}, which does not exist", path.display());
    }
    Ok(())
}
