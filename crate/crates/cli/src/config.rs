//! Experiment configuration: one TOML document per experiment.

use std::collections::BTreeSet;
use std::path::PathBuf;

use lslo_core::data::DataConfig;
use lslo_core::estimation::require_uniform_rank;
use lslo_core::lslo::{LanguageSpec, Placement, RankPolicy, ResourceType};
use lslo_core::model::ModelConfig;
use lslo_core::pruning::{Grouping, PruneSchedule};
use lslo_core::trainer::{Decode, PruneSetup, TrainOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub languages: Vec<LanguageSpec>,
    pub rank_policy: RankPolicy,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "PhaseSection::pretrain")]
    pub seed_pretrain: PhaseSection,
    #[serde(default)]
    pub weight_learn: WeightLearnSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

/// Model shape; `vocab_size` defaults to what the corpus needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            num_layers: m.num_layers,
            d_model: m.d_model,
            num_heads: m.num_heads,
            d_ffn: m.d_ffn,
            max_len: m.max_len,
            vocab_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Score the test set every this many epochs; 0 only at the end.
    #[serde(default)]
    pub bleu_every: usize,
}

impl PhaseSection {
    fn pretrain() -> Self {
        Self { epochs: 20, learning_rate: 3e-3, batch_size: 16, bleu_every: 0 }
    }

    fn finetune(learning_rate: f64) -> Self {
        Self { epochs: 15, learning_rate, batch_size: 16, bleu_every: 0 }
    }
}

macro_rules! phase_of {
    ($($t:ty),*) => {$(
        impl $t {
            pub fn phase(&self) -> PhaseSection {
                PhaseSection {
                    epochs: self.epochs,
                    learning_rate: self.learning_rate,
                    batch_size: self.batch_size,
                    bleu_every: self.bleu_every,
                }
            }
        }
    )*};
}

phase_of!(WeightLearnSection, LsloSection, EstimateSection);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightLearnSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub bleu_every: usize,
    pub rank: usize,
}

impl Default for WeightLearnSection {
    fn default() -> Self {
        Self { epochs: 15, learning_rate: 3e-3, batch_size: 16, bleu_every: 0, rank: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "TrainSection::ft_all")]
    pub ft_all: PhaseSection,
    #[serde(default)]
    pub lslo: LsloSection,
}

impl TrainSection {
    fn ft_all() -> PhaseSection {
        PhaseSection::finetune(1e-3)
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { ft_all: Self::ft_all(), lslo: LsloSection::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsloSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub bleu_every: usize,
    /// Route by the strategy learned in the weight-learn phase instead of
    /// source-indexed encoder, target-indexed decoder.
    #[serde(default)]
    pub weight_learning: bool,
    #[serde(default)]
    pub gps: Option<GpsSection>,
}

impl Default for LsloSection {
    fn default() -> Self {
        Self { epochs: 15, learning_rate: 3e-3, batch_size: 16, bleu_every: 0, weight_learning: false, gps: None }
    }
}

fn default_start() -> usize {
    2
}

fn default_duration() -> usize {
    8
}

fn default_grouping() -> Grouping {
    Grouping::LayerwiseCrossLanguage
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpsSection {
    pub target: f64,
    #[serde(default = "default_start")]
    pub start: usize,
    #[serde(default = "default_duration")]
    pub duration: usize,
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
    /// Resource types whose adapters are pruned; all when absent.
    #[serde(default)]
    pub scope: Option<BTreeSet<ResourceType>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub bleu_every: usize,
    pub rank: usize,
    pub target: f64,
    #[serde(default = "default_start")]
    pub start: usize,
    #[serde(default = "default_duration")]
    pub duration: usize,
    #[serde(default)]
    pub weight_learning: bool,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 3e-3,
            batch_size: 16,
            bleu_every: 0,
            rank: 8,
            target: 0.7,
            start: 2,
            duration: 8,
            weight_learning: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Beam width for BLEU; greedy when absent.
    #[serde(default)]
    pub beam: Option<usize>,
}

/// Parses and validates a configuration document. Errors name the
/// offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().message().to_string();
        CliError::Config(if path == "." { inner } else { format!("{path}: {inner}") })
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_phase(name: &str, p: &PhaseSection) -> Result<(), CliError> {
    if p.batch_size == 0 {
        return Err(CliError::Config(format!("{name}.batch_size: must be at least 1")));
    }
    if !(p.learning_rate.is_finite() && p.learning_rate >= 0.0) {
        return Err(CliError::Config(format!("{name}.learning_rate: must be finite and nonnegative")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate(&self.languages)?;
        self.model_config().validate()?;
        let needed = self.data.vocab_needed(self.languages.len());
        if let Some(v) = self.model.vocab_size {
            if v < needed {
                return Err(CliError::Config(format!("model.vocab_size: {v} is below the {needed} the corpus needs")));
            }
        }
        // Encoder inputs carry a language tag and EOS around the sentence.
        if self.model.max_len < self.data.max_len + 2 {
            return Err(CliError::Config(format!(
                "model.max_len: must be at least data.max_len + 2 = {}",
                self.data.max_len + 2
            )));
        }
        self.rank_policy.assign(&self.languages)?;
        check_phase("seed_pretrain", &self.seed_pretrain)?;
        check_phase("weight_learn", &self.weight_learn.phase())?;
        check_phase("train.ft_all", &self.train.ft_all)?;
        check_phase("train.lslo", &self.train.lslo.phase())?;
        check_phase("estimate", &self.estimate.phase())?;
        if self.weight_learn.rank == 0 || self.estimate.rank == 0 {
            return Err(CliError::Config("weight_learn.rank and estimate.rank must be positive".into()));
        }
        if self.train.lslo.gps.is_some() {
            self.prune_setup().map_err(|e| CliError::Config(format!("train.lslo.gps: {e}")))?;
        }
        PruneSchedule::new(self.estimate.target, self.estimate.start, self.estimate.duration, self.estimate.epochs)
            .map_err(|e| CliError::Config(format!("estimate: {e}")))?;
        if self.evaluate.beam == Some(0) {
            return Err(CliError::Config("evaluate.beam: width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_layers: m.num_layers,
            d_model: m.d_model,
            num_heads: m.num_heads,
            d_ffn: m.d_ffn,
            vocab_size: m.vocab_size.unwrap_or_else(|| self.data.vocab_needed(self.languages.len())),
            max_len: m.max_len,
        }
    }

    /// GPS settings of the LSLo run, if any.
    pub fn prune_setup(&self) -> lslo_core::Result<Option<PruneSetup>> {
        let Some(g) = &self.train.lslo.gps else { return Ok(None) };
        Ok(Some(PruneSetup {
            schedule: PruneSchedule::new(g.target, g.start, g.duration, self.train.lslo.epochs)?,
            grouping: g.grouping,
            scope: g.scope.clone(),
        }))
    }

    /// Equal-rank setup of the estimation runs.
    pub fn estimate_setup(&self, grouping: Grouping) -> lslo_core::Result<PruneSetup> {
        let e = &self.estimate;
        let ranks = RankPolicy::uniform(e.rank).assign(&self.languages)?;
        require_uniform_rank(&ranks)?;
        Ok(PruneSetup { schedule: PruneSchedule::new(e.target, e.start, e.duration, e.epochs)?, grouping, scope: None })
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the seed and the
    /// output directory.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { seed: 0, out_dir: None, ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Training options for one phase under the run's derived seed.
pub fn train_options(p: &PhaseSection, seed: u64, decode: Decode) -> TrainOptions {
    TrainOptions {
        epochs: p.epochs,
        learning_rate: p.learning_rate,
        batch_size: p.batch_size,
        seed,
        bleu_every: p.bleu_every,
        decode,
    }
}

/// Table-style method label, e.g. `2;2;8+WL+GPS(0.9)`.
pub fn method_label(policy: &RankPolicy, weight_learning: bool, gps: Option<f64>) -> String {
    let mut s = policy.label().to_string();
    if weight_learning {
        s.push_str("+WL");
    }
    if let Some(p) = gps {
        s.push_str(&format!("+GPS({p})"));
    }
    s
}
