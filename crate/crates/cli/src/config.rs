//! Experiment configuration: one JSON file drives every subcommand. All
//! validation happens up front and failures carry a JSON pointer to the
//! offending field.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tif_core::corpus::CorpusConfig;
use tif_core::engine::TrainConfig;
use tif_core::error::{Error, Result};
use tif_core::eval::MeanKind;
use tif_core::model::ModelConfig;
use tif_core::objectives::{ObjectiveConfig, ObjectiveKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// Master seed; every stage derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusBlock,
    pub model: ModelBlock,
    #[serde(default = "default_train")]
    pub train_original: TrainBlock,
    #[serde(default = "default_train")]
    pub train_retained: TrainBlock,
    #[serde(default = "default_unlearn")]
    pub unlearn: TrainBlock,
    pub objective: MethodBlock,
    #[serde(default)]
    pub identifier: IdentifierBlock,
    #[serde(default)]
    pub eval: EvalBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusBlock {
    pub n_authors: usize,
    pub forget_fraction: f64,
    #[serde(default = "two")]
    pub qa_per_author: usize,
    #[serde(default = "twenty")]
    pub n_general: usize,
}

fn two() -> usize {
    2
}
fn twenty() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Mirrors the engine's TrainConfig minus the seed, which the pipeline
/// derives from the master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "yes")]
    pub warmup: bool,
}

fn default_wd() -> f64 {
    0.01
}
fn yes() -> bool {
    true
}

fn default_train() -> TrainBlock {
    TrainBlock { lr: 5e-3, weight_decay: 0.01, batch_size: 16, epochs: 14, warmup: true }
}

fn default_unlearn() -> TrainBlock {
    TrainBlock { lr: 2e-3, weight_decay: 0.01, batch_size: 8, epochs: 10, warmup: true }
}

impl TrainBlock {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup: self.warmup,
            seed,
            checkpoint_every: 1,
        }
    }
}

/// The unlearning method: a gradient objective or weight arithmetic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodBlock {
    TaskVector(TaskVectorBlock),
    Objective(ObjectiveConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskVectorBlock {
    pub kind: TaskVectorTag,
    #[serde(default = "default_nll_target")]
    pub nll_target: f64,
    #[serde(default = "default_reinforce_epochs")]
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskVectorTag {
    TaskVector,
}

fn default_nll_target() -> f64 {
    0.05
}
fn default_reinforce_epochs() -> usize {
    25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierKind {
    Oracle,
    Discriminative,
    Stopword,
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifierBlock {
    pub kind: IdentifierKind,
    /// One stopword per line; defaults to the built-in list.
    #[serde(default)]
    pub stoplist: Option<PathBuf>,
    /// JSON array of {question, answer, target_words} records.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    #[serde(default = "one")]
    pub top_k: usize,
    /// Masked-LM probe for the discriminative identifier.
    #[serde(default)]
    pub probe: ProbeBlock,
}

fn one() -> usize {
    1
}

impl Default for IdentifierBlock {
    fn default() -> Self {
        Self {
            kind: IdentifierKind::Oracle,
            stoplist: None,
            annotations: None,
            top_k: 1,
            probe: ProbeBlock::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBlock {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ProbeBlock {
    fn default() -> Self {
        Self { dim: 32, layers: 2, heads: 4, lr: 5e-3, batch_size: 16, epochs: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    /// Min-K% fraction of lowest log-probabilities kept.
    #[serde(default = "default_k")]
    pub k_percent: f64,
    #[serde(default = "default_mean")]
    pub mean: MeanKind,
    /// Cap on retain probes per evaluation (0 = all).
    #[serde(default)]
    pub retain_probes: usize,
    /// Cap on general probes per evaluation (0 = all).
    #[serde(default)]
    pub general_probes: usize,
}

fn default_k() -> f64 {
    20.0
}
fn default_mean() -> MeanKind {
    MeanKind::Harmonic
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self { k_percent: 20.0, mean: MeanKind::Harmonic, retain_probes: 0, general_probes: 0 }
    }
}

fn fail(pointer: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{pointer}: {msg}"))
}

/// Strip the error-kind prefix so nested validation messages read cleanly.
fn inner_msg(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Schema(m) => m,
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Parse and fully validate; any invalid config is rejected here,
    /// before any computation starts.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = format!("/{}", e.path().to_string().replace('.', "/"));
            fail(&pointer, e.inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(fail("/out_dir", "must not be empty"));
        }
        self.corpus_config().validate_block()?;
        // max_len is computed from the corpus later; use a placeholder that
        // exercises only the dim/head checks
        let mut mc = self.model_config(8);
        mc.vocab_size = 8;
        mc.validate().map_err(|e| fail("/model", inner_msg(e)))?;
        validate_train("/train_original", &self.train_original)?;
        validate_train("/train_retained", &self.train_retained)?;
        validate_train("/unlearn", &self.unlearn)?;
        match &self.objective {
            MethodBlock::Objective(obj) => {
                obj.validate().map_err(|e| fail("/objective", inner_msg(e)))?;
                if obj.kind.needs_masks() && self.identifier.kind == IdentifierKind::External {
                    // fine: external annotations provide masks, path checked below
                }
            }
            MethodBlock::TaskVector(tv) => {
                if !(tv.nll_target > 0.0 && tv.nll_target.is_finite()) {
                    return Err(fail("/objective/nll_target", "must be positive"));
                }
                if tv.max_epochs == 0 {
                    return Err(fail("/objective/max_epochs", "must be at least 1"));
                }
            }
        }
        let idb = &self.identifier;
        if idb.top_k == 0 {
            return Err(fail("/identifier/top_k", "must be at least 1"));
        }
        if idb.kind == IdentifierKind::External {
            match &idb.annotations {
                None => {
                    return Err(fail(
                        "/identifier/annotations",
                        "required when identifier kind is external",
                    ))
                }
                Some(p) if !p.exists() => {
                    return Err(fail("/identifier/annotations", format!("{} not found", p.display())))
                }
                _ => {}
            }
        }
        if let Some(p) = &idb.stoplist {
            if !p.exists() {
                return Err(fail("/identifier/stoplist", format!("{} not found", p.display())));
            }
        }
        let pb = &idb.probe;
        if pb.dim == 0 || pb.heads == 0 || pb.dim % pb.heads != 0 {
            return Err(fail("/identifier/probe", "dim must be a positive multiple of heads"));
        }
        if !(pb.lr > 0.0 && pb.lr.is_finite()) {
            return Err(fail("/identifier/probe/lr", "must be positive"));
        }
        if pb.batch_size == 0 || pb.epochs == 0 {
            return Err(fail("/identifier/probe", "batch_size and epochs must be at least 1"));
        }
        if !(self.eval.k_percent > 0.0 && self.eval.k_percent <= 100.0) {
            return Err(fail("/eval/k_percent", "must be in (0, 100]"));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusBlockView<'_> {
        CorpusBlockView { block: &self.corpus, seed: self.seed }
    }

    pub fn to_corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            n_authors: self.corpus.n_authors,
            forget_fraction: self.corpus.forget_fraction,
            qa_per_author: self.corpus.qa_per_author,
            n_general: self.corpus.n_general,
        }
    }

    pub fn model_config(&self, max_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 0, // filled in once the tokenizer exists
            dim: self.model.dim,
            layers: self.model.layers,
            heads: self.model.heads,
            max_len,
        }
    }

    /// The unlearning objective if the method is gradient-based.
    pub fn objective_config(&self) -> Option<&ObjectiveConfig> {
        match &self.objective {
            MethodBlock::Objective(o) => Some(o),
            MethodBlock::TaskVector(_) => None,
        }
    }
}

pub struct CorpusBlockView<'a> {
    block: &'a CorpusBlock,
    seed: u64,
}

impl CorpusBlockView<'_> {
    fn validate_block(&self) -> Result<()> {
        let _ = self.seed;
        let b = self.block;
        if b.n_authors < 20 {
            return Err(fail("/corpus/n_authors", "must be at least 20"));
        }
        if !(b.forget_fraction > 0.0 && b.forget_fraction <= 0.5) {
            return Err(fail("/corpus/forget_fraction", "must be in (0, 0.5]"));
        }
        if !(1..=5).contains(&b.qa_per_author) {
            return Err(fail("/corpus/qa_per_author", "must be in 1..=5"));
        }
        Ok(())
    }
}

fn validate_train(pointer: &str, b: &TrainBlock) -> Result<()> {
    if !(b.lr > 0.0 && b.lr.is_finite()) {
        return Err(fail(&format!("{pointer}/lr"), "must be positive"));
    }
    if !(b.weight_decay >= 0.0 && b.weight_decay.is_finite()) {
        return Err(fail(&format!("{pointer}/weight_decay"), "must be finite and >= 0"));
    }
    if b.batch_size == 0 {
        return Err(fail(&format!("{pointer}/batch_size"), "must be at least 1"));
    }
    if b.epochs == 0 {
        return Err(fail(&format!("{pointer}/epochs"), "must be at least 1"));
    }
    Ok(())
}

/// Extension: which objectives need word-level masks.
trait NeedsMasks {
    fn needs_masks(&self) -> bool;
}

impl NeedsMasks for ObjectiveKind {
    fn needs_masks(&self) -> bool {
        matches!(self, ObjectiveKind::Tpo | ObjectiveKind::LplOnly | ObjectiveKind::PlOnly)
    }
}
