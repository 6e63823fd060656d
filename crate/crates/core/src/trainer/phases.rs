use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{train, EpochHook, EvalSet, RunHeader, RunLog, TrainOptions, TrainState};
use crate::data::TranslationPair;
use crate::error::{Error, Result};
use crate::estimation::{require_uniform_rank, ScoreTable};
use crate::lslo::{
    build_adapter_stack, resolve_index_strategy, AdapterStack, IndexStrategy, LanguageSpec, Placement, RankPolicy,
    ResourceType, Routing, WeightLearningState,
};
use crate::model::{build_model, enumerate_sites, BaseModel, ModelConfig, Side};
use crate::numcore::ParamStore;
use crate::pruning::{GradualPruner, Grouping, PrunePlan, PruneSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SeedPretrain,
    FtAll,
    WeightLearn,
    LsloFinetune,
    EstimateLayerwise,
    EstimateLangspec,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::SeedPretrain => "seed_pretrain",
            Phase::FtAll => "ft_all",
            Phase::WeightLearn => "weight_learn",
            Phase::LsloFinetune => "lslo_finetune",
            Phase::EstimateLayerwise => "estimate_layerwise",
            Phase::EstimateLangspec => "estimate_langspec",
        }
    }
}

/// Training pairs plus optional held-out evaluation data.
#[derive(Clone, Copy, Debug)]
pub struct PhaseData<'a> {
    pub train: &'a [TranslationPair],
    pub eval: Option<EvalSet<'a>>,
}

/// Adapter layout shared by the adapter phases.
#[derive(Clone, Debug)]
pub struct AdapterSpec<'a> {
    pub languages: &'a [LanguageSpec],
    pub policy: &'a RankPolicy,
    pub placement: Placement,
    pub seed: u64,
}

/// GPS settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSetup {
    pub schedule: PruneSchedule,
    pub grouping: Grouping,
    /// Resource types whose adapters are pruned; `None` prunes all.
    pub scope: Option<BTreeSet<ResourceType>>,
}

/// Builds a base model from `model_seed` and trains every weight on the
/// imbalanced pretraining pairs.
pub fn seed_pretrain(
    config: &ModelConfig,
    model_seed: u64,
    opts: &TrainOptions,
    header: RunHeader,
    data: PhaseData<'_>,
    on_epoch: EpochHook<'_>,
) -> Result<(BaseModel, ParamStore, RunLog)> {
    let mut store = ParamStore::new();
    let model = build_model(config, model_seed, &mut store)?;
    let log = if opts.epochs == 0 {
        RunLog { header, epochs: Vec::new() }
    } else {
        let state = TrainState { model: &model, store: &mut store, adapters: None, pruner: None };
        train(state, opts, header, data.train, data.eval, on_epoch)?
    };
    Ok((model, store, log))
}

/// Full fine-tuning: every base weight trainable, no adapters.
pub fn finetune_all(
    model: &BaseModel,
    store: &mut ParamStore,
    opts: &TrainOptions,
    header: RunHeader,
    data: PhaseData<'_>,
    on_epoch: EpochHook<'_>,
) -> Result<RunLog> {
    model.set_frozen(store, false);
    let state = TrainState { model, store, adapters: None, pruner: None };
    train(state, opts, header, data.train, data.eval, on_epoch)
}

fn adapter_stack(
    model: &BaseModel,
    store: &mut ParamStore,
    spec: &AdapterSpec<'_>,
    routing: Routing,
) -> Result<AdapterStack> {
    model.set_frozen(store, true);
    let sites = enumerate_sites(model.config());
    build_adapter_stack(model.config(), &sites, spec.languages, spec.policy, spec.placement, routing, spec.seed, store)
}

pub struct WeightLearnOutcome {
    pub stack: AdapterStack,
    pub log: RunLog,
    /// Final `(w_src, w_tgt)` per layer.
    pub weights: BTreeMap<(Side, usize), (f64, f64)>,
    pub strategy: IndexStrategy,
}

/// Trains LSLo adapters mixed by per-layer softmax weights, then picks the
/// heavier branch of every layer.
pub fn weight_learn(
    model: &BaseModel,
    store: &mut ParamStore,
    spec: &AdapterSpec<'_>,
    opts: &TrainOptions,
    header: RunHeader,
    data: PhaseData<'_>,
    on_epoch: EpochHook<'_>,
) -> Result<WeightLearnOutcome> {
    let wl = WeightLearningState::new(model.config().num_layers, store);
    let mut stack = adapter_stack(model, store, spec, Routing::WeightLearning(wl.clone()))?;
    let state = TrainState { model, store, adapters: Some(&mut stack), pruner: None };
    let log = train(state, opts, header, data.train, data.eval, on_epoch)?;
    let raw = wl.raw(store);
    Ok(WeightLearnOutcome { strategy: resolve_index_strategy(&raw), weights: wl.weights(store), stack, log })
}

fn pruner_for(stack: &AdapterStack, prune: &PruneSetup) -> Result<GradualPruner> {
    let plan = PrunePlan::build(stack, prune.grouping, prune.scope.as_ref());
    GradualPruner::new(prune.schedule, plan)
}

/// LSLo fine-tuning with a fixed index strategy and optional GPS.
#[allow(clippy::too_many_arguments)]
pub fn lslo_finetune(
    model: &BaseModel,
    store: &mut ParamStore,
    spec: &AdapterSpec<'_>,
    strategy: IndexStrategy,
    prune: Option<&PruneSetup>,
    opts: &TrainOptions,
    header: RunHeader,
    data: PhaseData<'_>,
    on_epoch: EpochHook<'_>,
) -> Result<(AdapterStack, RunLog)> {
    strategy.covers(model.config().num_layers)?;
    let mut stack = adapter_stack(model, store, spec, Routing::Fixed(strategy))?;
    let pruner = prune.map(|p| pruner_for(&stack, p)).transpose()?;
    let state = TrainState { model, store, adapters: Some(&mut stack), pruner: pruner.as_ref() };
    let log = train(state, opts, header, data.train, data.eval, on_epoch)?;
    Ok((stack, log))
}

pub struct EstimateOutcome {
    pub stack: AdapterStack,
    pub log: RunLog,
    pub table: ScoreTable,
}

/// Equal-rank LSLo on every site trained under GPS; scores come from the
/// final epoch's masks.
#[allow(clippy::too_many_arguments)]
pub fn estimate(
    model: &BaseModel,
    store: &mut ParamStore,
    spec: &AdapterSpec<'_>,
    strategy: IndexStrategy,
    prune: &PruneSetup,
    opts: &TrainOptions,
    header: RunHeader,
    data: PhaseData<'_>,
    on_epoch: EpochHook<'_>,
) -> Result<EstimateOutcome> {
    if !matches!(prune.grouping, Grouping::LayerwiseCrossLanguage | Grouping::LanguageSpecificGlobal) {
        return Err(Error::Config("estimation groups B matrices by layer or by language".into()));
    }
    require_uniform_rank(&spec.policy.assign(spec.languages)?)?;
    let (stack, log) = lslo_finetune(model, store, spec, strategy, Some(prune), opts, header, data, on_epoch)?;
    let plan = PrunePlan::build(&stack, prune.grouping, prune.scope.as_ref());
    let ratio = prune.schedule.ratio(prune.schedule.total)?;
    let table = ScoreTable::from_masks(&stack, &plan, ratio)?;
    Ok(EstimateOutcome { stack, log, table })
}
