//! Experiment phases over in-memory state. The subcommands add file I/O
//! on top; tests drive these directly.

use std::collections::BTreeMap;
use std::time::Instant;

use lslo_core::data::{build_dataset, generate_corpus, ParallelCorpus, Sampling, TranslationPair};
use lslo_core::estimation::{pearson_correlation, Correlation, ScoreTable};
use lslo_core::lslo::{build_adapter_stack, AdapterStack, IndexStrategy, RankPolicy, Routing};
use lslo_core::metrics::{bucket_report, BleuReport};
use lslo_core::model::{build_model, enumerate_sites, BaseModel, Checkpoint, ModelConfig, Side};
use lslo_core::numcore::rng::SeedTree;
use lslo_core::numcore::ParamStore;
use lslo_core::pruning::Grouping;
use lslo_core::trainer::{
    self, evaluate, AdapterSpec, Decode, EpochView, EvalSet, Phase, PhaseData, RunHeader, RunLog, WeightLearnOutcome,
};
use sha2::{Digest, Sha256};

use crate::config::{method_label, train_options, ExperimentConfig, PhaseSection};
use crate::error::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

/// A validated configuration bound to one root seed.
#[derive(Clone, Debug)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub config_hash: String,
    pub model_config: ModelConfig,
    seeds: SeedTree,
}

pub struct Datasets {
    pub pretrain: Vec<TranslationPair>,
    pub finetune: Vec<TranslationPair>,
    pub test: Vec<TranslationPair>,
}

/// A base model and the store holding its weights.
pub struct Trained {
    pub model: BaseModel,
    pub store: ParamStore,
}

pub struct PhaseRun {
    pub store: ParamStore,
    pub log: RunLog,
    pub report: BleuReport,
}

pub struct LsloRun {
    pub store: ParamStore,
    pub stack: AdapterStack,
    pub strategy: IndexStrategy,
    pub log: RunLog,
    pub report: BleuReport,
}

pub struct EstimateRun {
    pub table: ScoreTable,
    pub log: RunLog,
    /// `(code, corpus size, mean score)` per language.
    pub languages: Vec<(String, usize, f64)>,
    /// Score against log corpus size; `None` when undefined.
    pub correlation: Option<Correlation>,
}

pub struct WeightLearnRun {
    pub log: RunLog,
    pub weights: BTreeMap<(Side, usize), (f64, f64)>,
    pub strategy: IndexStrategy,
}

/// Logs one line per epoch to stderr.
pub fn progress(phase: Phase) -> impl FnMut(EpochView<'_>) -> lslo_core::Result<()> {
    let start = Instant::now();
    move |v| {
        let r = v.record;
        log::info!(
            "{} epoch {} steps {} train_loss {:.4} val_loss {} ({:.1}s)",
            phase.as_str(),
            r.epoch,
            r.steps,
            r.train_loss,
            r.val_loss.map_or("-".into(), |l| format!("{l:.4}")),
            start.elapsed().as_secs_f64()
        );
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Lab {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config_hash: config.hash(),
            model_config: config.model_config(),
            seeds: SeedTree::new(seed),
            seed,
            config,
        })
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        self.seeds.child(label).seed()
    }

    pub fn corpus(&self) -> Result<ParallelCorpus> {
        let c = &self.config;
        Ok(generate_corpus(&c.languages, &c.data, self.model_config.vocab_size, self.seed_for("data"))?)
    }

    pub fn datasets(&self, corpus: &ParallelCorpus) -> Result<Datasets> {
        let dirs = corpus.all_directions();
        let seed = self.seed_for("dataset");
        let d = &self.config.data;
        Ok(Datasets {
            pretrain: build_dataset(corpus, &dirs, Sampling::Imbalanced { total: d.pretrain_pairs }, seed)?,
            finetune: build_dataset(corpus, &dirs, Sampling::Balanced { sets: d.finetune_sets }, seed)?,
            test: build_dataset(corpus, &dirs, Sampling::Test, seed)?,
        })
    }

    /// Beam width from the flag, else from the config; greedy otherwise.
    pub fn decode(&self, beam: Option<usize>) -> Decode {
        match beam.or(self.config.evaluate.beam) {
            Some(width) => Decode::Beam { width },
            None => Decode::Greedy,
        }
    }

    pub fn header(&self, phase: Phase, parent: Option<String>) -> RunHeader {
        RunHeader { phase: phase.as_str().into(), config_hash: self.config_hash.clone(), seed: self.seed, parent }
    }

    fn options(&self, p: &PhaseSection, phase: Phase, decode: Decode) -> trainer::TrainOptions {
        train_options(p, self.seed_for(phase.as_str()), decode)
    }

    fn eval_set<'a>(&'a self, data: &'a Datasets) -> Option<EvalSet<'a>> {
        (!data.test.is_empty()).then_some(EvalSet { pairs: &data.test, languages: &self.config.languages })
    }

    /// Test-set BLEU report under `method`.
    #[allow(clippy::too_many_arguments)]
    pub fn report(
        &self,
        method: &str,
        params: Option<usize>,
        model: &BaseModel,
        store: &ParamStore,
        adapters: Option<&AdapterStack>,
        data: &Datasets,
        decode: Decode,
    ) -> Result<BleuReport> {
        let ev =
            self.eval_set(data).ok_or_else(|| CliError::Config("data.test_fraction leaves no test sets".into()))?;
        let sa = adapters.map(|a| a as &dyn lslo_core::model::SiteAdapters);
        let scores = evaluate(model, store, sa, ev, decode)?;
        let mut report = bucket_report(method, &scores, &self.config.languages)?;
        report.params = params;
        Ok(report)
    }

    pub fn seed_pretrain(
        &self,
        data: &Datasets,
        decode: Decode,
        hook: trainer::EpochHook<'_>,
    ) -> Result<(Trained, RunLog, BleuReport)> {
        let opts = self.options(&self.config.seed_pretrain, Phase::SeedPretrain, decode);
        let pd = PhaseData { train: &data.pretrain, eval: self.eval_set(data) };
        let (model, store, log) = trainer::seed_pretrain(
            &self.model_config,
            self.seed_for("model"),
            &opts,
            self.header(Phase::SeedPretrain, None),
            pd,
            hook,
        )?;
        let report = self.report("Pretrain", None, &model, &store, None, data, decode)?;
        Ok((Trained { model, store }, log, report))
    }

    /// Hash identifying a base checkpoint in child run headers.
    pub fn parent_hash(&self, base: &Trained) -> String {
        sha256_hex(&self.base_checkpoint(base, Phase::SeedPretrain).to_bytes())
    }

    pub fn ft_all(
        &self,
        base: &Trained,
        data: &Datasets,
        decode: Decode,
        hook: trainer::EpochHook<'_>,
    ) -> Result<PhaseRun> {
        let opts = self.options(&self.config.train.ft_all, Phase::FtAll, decode);
        let mut store = base.store.clone();
        let pd = PhaseData { train: &data.finetune, eval: self.eval_set(data) };
        let header = self.header(Phase::FtAll, Some(self.parent_hash(base)));
        let log = trainer::finetune_all(&base.model, &mut store, &opts, header, pd, hook)?;
        let params = base.model.param_count(&store);
        let report = self.report("Ft-all", Some(params), &base.model, &store, None, data, decode)?;
        Ok(PhaseRun { store, log, report })
    }

    fn spec<'a>(&'a self, policy: &'a RankPolicy, label: &str) -> AdapterSpec<'a> {
        AdapterSpec {
            languages: &self.config.languages,
            policy,
            placement: self.config.placement,
            seed: self.seed_for(&format!("{label}/adapters")),
        }
    }

    pub fn weight_learn(
        &self,
        base: &Trained,
        data: &Datasets,
        hook: trainer::EpochHook<'_>,
    ) -> Result<WeightLearnRun> {
        let wl = &self.config.weight_learn;
        let opts = self.options(&wl.phase(), Phase::WeightLearn, Decode::Greedy);
        let policy = RankPolicy::uniform(wl.rank);
        let spec = self.spec(&policy, Phase::WeightLearn.as_str());
        let mut store = base.store.clone();
        let pd = PhaseData { train: &data.finetune, eval: None };
        let header = self.header(Phase::WeightLearn, Some(self.parent_hash(base)));
        let WeightLearnOutcome { log, weights, strategy, .. } =
            trainer::weight_learn(&base.model, &mut store, &spec, &opts, header, pd, hook)?;
        Ok(WeightLearnRun { log, weights, strategy })
    }

    /// Adapter stack of the LSLo phase, freshly initialized in `store`.
    pub fn lslo_stack(
        &self,
        model: &BaseModel,
        store: &mut ParamStore,
        strategy: &IndexStrategy,
    ) -> Result<AdapterStack> {
        let spec = self.spec(&self.config.rank_policy, Phase::LsloFinetune.as_str());
        model.set_frozen(store, true);
        Ok(build_adapter_stack(
            model.config(),
            &enumerate_sites(model.config()),
            spec.languages,
            spec.policy,
            spec.placement,
            Routing::Fixed(strategy.clone()),
            spec.seed,
            store,
        )?)
    }

    pub fn lslo_label(&self) -> String {
        let l = &self.config.train.lslo;
        method_label(&self.config.rank_policy, l.weight_learning, l.gps.as_ref().map(|g| g.target))
    }

    pub fn lslo(
        &self,
        base: &Trained,
        data: &Datasets,
        strategy: IndexStrategy,
        decode: Decode,
        hook: trainer::EpochHook<'_>,
    ) -> Result<LsloRun> {
        let opts = self.options(&self.config.train.lslo.phase(), Phase::LsloFinetune, decode);
        let spec = self.spec(&self.config.rank_policy, Phase::LsloFinetune.as_str());
        let prune = self.config.prune_setup()?;
        let mut store = base.store.clone();
        let pd = PhaseData { train: &data.finetune, eval: self.eval_set(data) };
        let header = self.header(Phase::LsloFinetune, Some(self.parent_hash(base)));
        let (stack, log) = trainer::lslo_finetune(
            &base.model,
            &mut store,
            &spec,
            strategy.clone(),
            prune.as_ref(),
            &opts,
            header,
            pd,
            hook,
        )?;
        let params = stack.trainable_param_count();
        let report = self.report(&self.lslo_label(), Some(params), &base.model, &store, Some(&stack), data, decode)?;
        Ok(LsloRun { store, stack, strategy, log, report })
    }

    pub fn estimate(
        &self,
        base: &Trained,
        data: &Datasets,
        grouping: Grouping,
        strategy: IndexStrategy,
        hook: trainer::EpochHook<'_>,
    ) -> Result<EstimateRun> {
        let phase = match grouping {
            Grouping::LanguageSpecificGlobal => Phase::EstimateLangspec,
            _ => Phase::EstimateLayerwise,
        };
        let e = &self.config.estimate;
        let opts = self.options(&e.phase(), phase, Decode::Greedy);
        let setup = self.config.estimate_setup(grouping)?;
        let policy = RankPolicy::uniform(e.rank);
        let spec = self.spec(&policy, phase.as_str());
        let mut store = base.store.clone();
        let pd = PhaseData { train: &data.finetune, eval: None };
        let header = self.header(phase, Some(self.parent_hash(base)));
        let out = trainer::estimate(&base.model, &mut store, &spec, strategy, &setup, &opts, header, pd, hook)?;
        let means = out.table.language_means();
        let languages: Vec<(String, usize, f64)> = self
            .config
            .languages
            .iter()
            .map(|l| (l.code.clone(), l.corpus_size, means.get(&l.code).copied().unwrap_or(f64::NAN)))
            .collect();
        let xs: Vec<f64> = languages.iter().map(|l| (l.1 as f64).ln()).collect();
        let ys: Vec<f64> = languages.iter().map(|l| l.2).collect();
        let correlation = match pearson_correlation(&xs, &ys, self.seed_for("pearson")) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("no correlation: {e}");
                None
            }
        };
        Ok(EstimateRun { table: out.table, log: out.log, languages, correlation })
    }

    /// Checkpoint of the base weights, tagged with this lab's identity.
    pub fn base_checkpoint(&self, base: &Trained, phase: Phase) -> Checkpoint {
        self.tag(Checkpoint::from_store(self.model_config.clone(), &base.store, base.model.param_ids()), phase)
    }

    fn tag(&self, mut ck: Checkpoint, phase: Phase) -> Checkpoint {
        ck.metadata.insert("config_hash".into(), self.config_hash.clone());
        ck.metadata.insert("seed".into(), self.seed.to_string());
        ck.metadata.insert("phase".into(), phase.as_str().into());
        ck
    }

    /// Base weights, adapter factors and `.mask` tensors, plus the
    /// routing strategy in the metadata.
    pub fn lslo_checkpoint(&self, model: &BaseModel, run: &LsloRun) -> Checkpoint {
        let mut ids = model.param_ids().to_vec();
        ids.extend(run.stack.factor_ids());
        let mut ck = Checkpoint::from_store(self.model_config.clone(), &run.store, &ids);
        for a in run.stack.adapters() {
            for lang in 0..a.languages() {
                let f = a.factors(lang).expect("language in range");
                ck.push(format!("{}.mask", run.store.name(f.b)), f.mask.clone());
            }
        }
        ck.metadata.insert("strategy".into(), run.strategy.to_csv());
        ck.metadata.insert("method".into(), self.lslo_label());
        self.tag(ck, Phase::LsloFinetune)
    }

    fn check_identity(&self, ck: &Checkpoint, what: &str) -> Result<()> {
        let same = ck.metadata.get("config_hash") == Some(&self.config_hash)
            && ck.metadata.get("seed") == Some(&self.seed.to_string())
            && ck.model_config == self.model_config;
        if same {
            Ok(())
        } else {
            Err(CliError::Prerequisite(format!("{what} was produced by a different config or seed; rerun that phase")))
        }
    }

    /// Rebuilds the model and loads a base checkpoint into it.
    pub fn load_base(&self, ck: &Checkpoint, what: &str) -> Result<Trained> {
        self.check_identity(ck, what)?;
        let mut store = ParamStore::new();
        let model = build_model(&self.model_config, self.seed_for("model"), &mut store)?;
        let loaded = ck.load_into(&mut store)?;
        if loaded < model.param_ids().len() {
            return Err(CliError::Prerequisite(format!("{what} lacks base weights")));
        }
        Ok(Trained { model, store })
    }

    /// Rebuilds the LSLo adapters of a checkpoint, masks included.
    pub fn load_lslo(&self, ck: &Checkpoint, what: &str) -> Result<(Trained, AdapterStack)> {
        let mut base = self.load_base(ck, what)?;
        let text =
            ck.metadata.get("strategy").ok_or_else(|| CliError::Prerequisite(format!("{what} has no strategy")))?;
        let strategy = IndexStrategy::from_csv(text)?;
        let mut stack = self.lslo_stack(&base.model, &mut base.store, &strategy)?;
        ck.load_into(&mut base.store)?;
        let names: Vec<Vec<String>> = stack
            .adapters()
            .iter()
            .map(|a| {
                (0..a.languages()).map(|l| base.store.name(a.factors(l).expect("in range").b).to_string()).collect()
            })
            .collect();
        for (a, names) in stack.adapters_mut().iter_mut().zip(names) {
            for (lang, name) in names.into_iter().enumerate() {
                let mask = ck
                    .get(&format!("{name}.mask"))
                    .ok_or_else(|| CliError::Prerequisite(format!("{what} lacks the mask of {name}")))?;
                a.factors_mut(lang).expect("in range").mask = mask.clone();
            }
        }
        Ok((base, stack))
    }
}
