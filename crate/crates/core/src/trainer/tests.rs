use std::collections::BTreeSet;

use super::*;
use crate::data::{build_dataset, generate_corpus, DataConfig, ParallelCorpus, Sampling};
use crate::lslo::{IndexStrategy, Placement, RankPolicy, ResourceType};
use crate::model::{build_model, ModelConfig};
use crate::pruning::{Grouping, PruneSchedule};

fn tiny_model() -> ModelConfig {
    ModelConfig { num_layers: 1, d_model: 8, num_heads: 2, d_ffn: 16, vocab_size: 32, max_len: 10 }
}

fn langs() -> Vec<LanguageSpec> {
    vec![
        LanguageSpec::new("hi", ResourceType::High, 100),
        LanguageSpec::new("me", ResourceType::Medium, 30),
        LanguageSpec::new("vl", ResourceType::VeryLow, 5),
    ]
}

fn corpus() -> ParallelCorpus {
    let cfg = DataConfig {
        num_sets: 20,
        min_len: 2,
        max_len: 6,
        alphabet: 8,
        pretrain_pairs: 60,
        finetune_sets: 4,
        ..DataConfig::default()
    };
    generate_corpus(&langs(), &cfg, 32, 1).unwrap()
}

fn header(phase: &str) -> RunHeader {
    RunHeader { phase: phase.into(), config_hash: "test".into(), seed: 0, parent: None }
}

fn opts(epochs: usize, lr: f64) -> TrainOptions {
    TrainOptions { epochs, learning_rate: lr, batch_size: 4, seed: 9, bleu_every: 0, decode: Decode::Greedy }
}

fn snapshot(store: &ParamStore, ids: &[crate::numcore::ParamId]) -> Vec<Vec<u64>> {
    ids.iter().map(|&id| store.get(id).data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn no_hook() -> impl FnMut(EpochView<'_>) -> Result<()> {
    |_| Ok(())
}

#[test]
fn batches_are_single_direction_and_cover_everything() {
    let c = corpus();
    let pairs = build_dataset(&c, &c.all_directions(), Sampling::Balanced { sets: 5 }, 0).unwrap();
    let mut rng = SeedTree::new(1).rng();
    let batches = make_batches(&pairs, 2, &mut rng);
    assert_eq!(batches.len(), steps_per_epoch(&pairs, 2));
    assert_eq!(batches.len(), 6 * 3);
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
    for b in &batches {
        assert!(b.indices.iter().all(|&i| pairs[i].src_lang == b.dir.src && pairs[i].tgt_lang == b.dir.tgt));
    }
    // Round-robin: the first six batches cover six distinct directions.
    let first: BTreeSet<_> = batches[..6].iter().map(|b| (b.dir.src, b.dir.tgt)).collect();
    assert_eq!(first.len(), 6);
    let again = make_batches(&pairs, 2, &mut SeedTree::new(1).rng());
    assert_eq!(batches, again);
}

#[test]
fn one_step_on_one_pair_reduces_loss() {
    let c = corpus();
    let pairs = build_dataset(&c, &[(0, 1)], Sampling::Balanced { sets: 1 }, 0).unwrap();
    let mut store = ParamStore::new();
    let model = build_model(&tiny_model(), 3, &mut store).unwrap();
    let before = mean_loss(&model, &store, None, &pairs, 4).unwrap();
    let state = TrainState { model: &model, store: &mut store, adapters: None, pruner: None };
    let log = train(state, &opts(1, 1e-3), header("t"), &pairs, None, &mut no_hook()).unwrap();
    let after = mean_loss(&model, &store, None, &pairs, 4).unwrap();
    assert!(after < before, "{after} vs {before}");
    assert_eq!(log.epochs[0].steps, 1);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let c = corpus();
    let pairs = build_dataset(&c, &c.all_directions(), Sampling::Balanced { sets: 3 }, 0).unwrap();
    let mut store = ParamStore::new();
    let model = build_model(&tiny_model(), 3, &mut store).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let before = snapshot(&store, &ids);
    let state = TrainState { model: &model, store: &mut store, adapters: None, pruner: None };
    train(state, &opts(2, 0.0), header("t"), &pairs, None, &mut no_hook()).unwrap();
    assert_eq!(snapshot(&store, &ids), before);
}

#[test]
fn same_seed_same_log_bytes() {
    let c = corpus();
    let pairs = build_dataset(&c, &c.all_directions(), Sampling::Imbalanced { total: 60 }, 0).unwrap();
    let test = build_dataset(&c, &c.all_directions(), Sampling::Test, 0).unwrap();
    let run = || {
        let mut o = opts(2, 1e-3);
        o.bleu_every = 1;
        let data = PhaseData { train: &pairs, eval: Some(EvalSet { pairs: &test, languages: &c.languages }) };
        let (model, store, log) = seed_pretrain(&tiny_model(), 5, &o, header("seed"), data, &mut no_hook()).unwrap();
        (log.to_jsonl(), crate::model::Checkpoint::from_store(tiny_model(), &store, model.param_ids()).to_bytes())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let parsed = RunLog::from_jsonl(&a).unwrap();
    assert_eq!(parsed.to_jsonl(), a);
    assert_eq!(parsed.epochs.len(), 2);
    assert!(parsed.epochs[1].bleu.is_some());
}

#[test]
fn zero_epochs_leaves_initialization() {
    let c = corpus();
    let pairs = build_dataset(&c, &c.all_directions(), Sampling::Imbalanced { total: 60 }, 0).unwrap();
    let data = PhaseData { train: &pairs, eval: None };
    let (_, store, log) =
        seed_pretrain(&tiny_model(), 5, &opts(0, 1e-3), header("seed"), data, &mut no_hook()).unwrap();
    let mut fresh = ParamStore::new();
    build_model(&tiny_model(), 5, &mut fresh).unwrap();
    let ids: Vec<_> = store.ids().collect();
    assert_eq!(snapshot(&store, &ids), snapshot(&fresh, &ids));
    assert!(log.epochs.is_empty());
}

#[test]
fn memorizes_a_single_pair() {
    let c = corpus();
    let pairs = build_dataset(&c, &[(0, 1)], Sampling::Balanced { sets: 1 }, 0).unwrap();
    let mut store = ParamStore::new();
    let model = build_model(&tiny_model(), 3, &mut store).unwrap();
    let ev = EvalSet { pairs: &pairs, languages: &c.languages };
    let untrained = evaluate(&model, &store, None, ev, Decode::Greedy).unwrap();
    assert!(untrained[0].bleu < 50.0);
    let state = TrainState { model: &model, store: &mut store, adapters: None, pruner: None };
    train(state, &opts(150, 1e-2), header("t"), &pairs, None, &mut no_hook()).unwrap();
    let scores = evaluate(&model, &store, None, ev, Decode::Greedy).unwrap();
    assert_eq!(scores[0].bleu, 100.0);
    assert_eq!(evaluate(&model, &store, None, ev, Decode::Beam { width: 5 }).unwrap()[0].bleu, 100.0);
}

#[test]
fn beam_of_one_is_greedy() {
    let c = corpus();
    let pairs = build_dataset(&c, &c.all_directions(), Sampling::Test, 0).unwrap();
    let mut store = ParamStore::new();
    let model = build_model(&tiny_model(), 8, &mut store).unwrap();
    for p in pairs.iter().take(12) {
        let dir = Direction { src: p.src_lang, tgt: p.tgt_lang };
        let src = crate::data::encoder_input(p);
        let g = greedy_decode(&model, &store, None, std::slice::from_ref(&src), dir).unwrap();
        let b = beam_search(&model, &store, None, &src, dir, 1).unwrap();
        assert_eq!(g[0], b);
    }
}

fn finetune_setup() -> (ParallelCorpus, Vec<TranslationPair>, BaseModel, ParamStore) {
    let c = corpus();
    let pairs = build_dataset(&c, &c.all_directions(), Sampling::Balanced { sets: 3 }, 0).unwrap();
    let mut store = ParamStore::new();
    let model = build_model(&tiny_model(), 3, &mut store).unwrap();
    (c, pairs, model, store)
}

#[test]
fn lslo_keeps_the_base_frozen_and_counts_steps() {
    let (c, pairs, model, mut store) = finetune_setup();
    let base = snapshot(&store, model.param_ids());
    let policy = RankPolicy::uniform(2);
    let spec = AdapterSpec { languages: &c.languages, policy: &policy, placement: Placement::All, seed: 1 };
    let data = PhaseData { train: &pairs, eval: None };
    let (stack, log) = lslo_finetune(
        &model,
        &mut store,
        &spec,
        IndexStrategy::by_side(1),
        None,
        &opts(3, 3e-3),
        header("lslo"),
        data,
        &mut no_hook(),
    )
    .unwrap();
    assert_eq!(snapshot(&store, model.param_ids()), base);
    assert_eq!(log.total_steps(), 3 * steps_per_epoch(&pairs, 4) as u64);
    assert!(stack
        .factor_ids()
        .iter()
        .any(|&id| store.name(id).ends_with(".B") && store.get(id).data().iter().any(|&v| v != 0.0)));
}

#[test]
fn scoped_pruning_leaves_other_languages_dense() {
    let (c, pairs, model, mut store) = finetune_setup();
    let policy = RankPolicy::uniform(2);
    let spec = AdapterSpec { languages: &c.languages, policy: &policy, placement: Placement::All, seed: 1 };
    let prune = PruneSetup {
        schedule: PruneSchedule::new(0.9, 1, 2, 4).unwrap(),
        grouping: Grouping::LayerwiseCrossLanguage,
        scope: Some([ResourceType::High, ResourceType::Medium].into()),
    };
    let data = PhaseData { train: &pairs, eval: None };
    let (stack, log) = lslo_finetune(
        &model,
        &mut store,
        &spec,
        IndexStrategy::by_side(1),
        Some(&prune),
        &opts(4, 3e-3),
        header("lslo"),
        data,
        &mut no_hook(),
    )
    .unwrap();
    let vl = stack.language_index("vl").unwrap();
    for a in stack.adapters() {
        assert_eq!(a.factors(vl).unwrap().mask.count_zeros(), 0);
        let b = store.get(a.factors(0).unwrap().b);
        let mask = &a.factors(0).unwrap().mask;
        assert!(b.data().iter().zip(mask.data()).all(|(v, m)| *m == 1.0 || *v == 0.0));
    }
    let last = &log.epochs[3].prune;
    assert!(last.iter().all(|e| e.zeroed == crate::pruning::pruned_count(0.9, e.total)));
}

#[test]
fn unrouted_language_adapters_stay_put() {
    let (c, _, model, mut store) = finetune_setup();
    let pairs = build_dataset(&c, &[(0, 1), (1, 0)], Sampling::Balanced { sets: 3 }, 0).unwrap();
    let policy = RankPolicy::uniform(2);
    let spec = AdapterSpec { languages: &c.languages, policy: &policy, placement: Placement::All, seed: 1 };
    let data = PhaseData { train: &pairs, eval: None };
    let before_store = store.clone();
    let (stack, _) = lslo_finetune(
        &model,
        &mut store,
        &spec,
        IndexStrategy::by_side(1),
        None,
        &opts(2, 3e-3),
        header("lslo"),
        data,
        &mut no_hook(),
    )
    .unwrap();
    let vl = stack.language_index("vl").unwrap();
    let mut fresh = before_store;
    let fresh_stack = crate::lslo::build_adapter_stack(
        model.config(),
        &crate::model::enumerate_sites(model.config()),
        &c.languages,
        &policy,
        Placement::All,
        Routing::Fixed(IndexStrategy::by_side(1)),
        1,
        &mut fresh,
    )
    .unwrap();
    for (a, fa) in stack.adapters().iter().zip(fresh_stack.adapters()) {
        let f = a.factors(vl).unwrap();
        let g = fa.factors(vl).unwrap();
        assert_eq!(store.get(f.a).data(), fresh.get(g.a).data());
        assert_eq!(store.get(f.b).data(), fresh.get(g.b).data());
    }
}

#[test]
fn weight_learning_logs_distributions() {
    let (c, pairs, model, mut store) = finetune_setup();
    let policy = RankPolicy::uniform(2);
    let spec = AdapterSpec { languages: &c.languages, policy: &policy, placement: Placement::All, seed: 1 };
    let data = PhaseData { train: &pairs, eval: None };
    let out = weight_learn(&model, &mut store, &spec, &opts(2, 3e-3), header("wl"), data, &mut no_hook()).unwrap();
    for e in &out.log.epochs {
        assert_eq!(e.wl_weights.len(), 2);
        for w in &e.wl_weights {
            assert!((w.w_src + w.w_tgt - 1.0).abs() <= 1e-12 && w.w_src >= 0.0 && w.w_tgt >= 0.0);
        }
    }
    out.strategy.covers(1).unwrap();
    assert!(out.weights.values().any(|&(s, _)| s != 0.5));
}

#[test]
fn nan_weights_abort_with_the_step() {
    let (_, pairs, model, mut store) = finetune_setup();
    let id = model.param_ids()[0];
    store.get_mut(id).data_mut()[0] = f64::NAN;
    let state = TrainState { model: &model, store: &mut store, adapters: None, pruner: None };
    let err = train(state, &opts(1, 1e-3), header("t"), &pairs, None, &mut no_hook()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Numerical(_) | Error::Num(_)), "{msg}");
}

#[test]
fn estimation_rejects_mixed_ranks() {
    let (c, pairs, model, mut store) = finetune_setup();
    let policy: RankPolicy = "8;4;2".parse().unwrap();
    let spec = AdapterSpec { languages: &c.languages, policy: &policy, placement: Placement::All, seed: 1 };
    let prune = PruneSetup {
        schedule: PruneSchedule::new(0.7, 1, 2, 4).unwrap(),
        grouping: Grouping::LayerwiseCrossLanguage,
        scope: None,
    };
    let data = PhaseData { train: &pairs, eval: None };
    let r = estimate(
        &model,
        &mut store,
        &spec,
        IndexStrategy::by_side(1),
        &prune,
        &opts(4, 3e-3),
        header("e"),
        data,
        &mut no_hook(),
    );
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn estimation_scores_conserve_per_group() {
    let (c, pairs, model, mut store) = finetune_setup();
    let policy = RankPolicy::uniform(2);
    let spec = AdapterSpec { languages: &c.languages, policy: &policy, placement: Placement::All, seed: 1 };
    let prune = PruneSetup {
        schedule: PruneSchedule::new(0.7, 1, 2, 4).unwrap(),
        grouping: Grouping::LanguageSpecificGlobal,
        scope: None,
    };
    let data = PhaseData { train: &pairs, eval: None };
    let out = estimate(
        &model,
        &mut store,
        &spec,
        IndexStrategy::by_side(1),
        &prune,
        &opts(4, 3e-3),
        header("e"),
        data,
        &mut no_hook(),
    )
    .unwrap();
    let sums = out.table.group_sums();
    assert_eq!(sums.len(), 3);
    assert!(sums.values().all(|&s| s > -1.0 && s <= 1e-9));
}
