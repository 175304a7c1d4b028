//! Run configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use figlm_core::corpus::{SyntheticGrammarConfig, TokenMode};
use figlm_core::generation::GenerationRequest;
use figlm_core::seed;
use figlm_core::training::{SelfTrainMode, TrainConfig};
use figlm_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. Component seeds inside the nested sections are derived
    /// from it and overwrite whatever the file says.
    pub seed: u64,
    pub corpus: CorpusSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub generation: GenerationRequest,
    pub evaluation: EvalSettings,
    pub paths: PathSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig {
                self_train_mode: SelfTrainMode::Soft,
                ..TrainConfig::default()
            },
            generation: GenerationRequest::default(),
            evaluation: EvalSettings::default(),
            paths: PathSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    pub token_mode: TokenMode,
    /// Fraction of the labelled corpus held out from training.
    pub heldout_ratio: f64,
    pub grammar: SyntheticGrammarConfig,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            n_labelled: 2000,
            n_unlabelled: 2000,
            token_mode: TokenMode::Word,
            heldout_ratio: 0.1,
            grammar: SyntheticGrammarConfig::default(),
        }
    }
}

/// [`ModelConfig`] without the corpus-dependent vocabulary size and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_len: d.max_len,
            dropout: d.dropout,
        }
    }
}

impl ModelSettings {
    pub fn build(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Targets sampled (with replacement) from the grammar's subjects when no
    /// targets file is given.
    pub n_targets: usize,
    /// Epochs of plain language-model training for the perplexity scorer.
    pub scorer_epochs: usize,
    /// Epochs of identification training for the metaphor classifier.
    pub classifier_epochs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_targets: 200,
            scorer_epochs: 3,
            classifier_epochs: 5,
        }
    }
}

/// Input corpora; each defaults to the file `synth` writes into the run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    pub labelled: Option<PathBuf>,
    pub unlabelled: Option<PathBuf>,
}

/// Component names fanned out from the global seed.
pub const SEED_COMPONENTS: [&str; 8] = [
    "synth",
    "split",
    "model",
    "training",
    "generation",
    "targets",
    "scorer",
    "classifier",
];

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn component_seed(&self, component: &str) -> u64 {
        seed::derive(self.seed, component)
    }

    /// Overwrites every nested seed with its derived value.
    pub fn propagate_seeds(&mut self) {
        self.corpus.grammar.seed = self.component_seed("synth");
        self.train.seed = self.component_seed("training");
        self.generation.seed = self.component_seed("generation");
    }

    /// Checks every section without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        let usage = |e: figlm_core::Error| UsageError(e.to_string());
        if self.corpus.n_labelled == 0 || self.corpus.n_unlabelled == 0 {
            return Err(UsageError("corpus sizes must be at least 1".into()).into());
        }
        let r = self.corpus.heldout_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(UsageError(format!("heldout_ratio must be in (0,1), got {r}")).into());
        }
        figlm_core::corpus::SyntheticGrammar::new(self.corpus.grammar.clone()).map_err(usage)?;
        self.model.build(1, 0).validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.generation.validate().map_err(usage)?;
        let e = &self.evaluation;
        if e.n_targets == 0 || e.scorer_epochs == 0 || e.classifier_epochs == 0 {
            return Err(UsageError("n_targets and the evaluator epoch counts must be at least 1".into()).into());
        }
        Ok(())
    }
}
