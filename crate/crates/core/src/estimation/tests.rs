use lslo_oracles::oracle_pearson;
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::lslo::{build_adapter_stack, IndexStrategy, LanguageSpec, Placement, RankPolicy, ResourceType, Routing};
use crate::model::{enumerate_sites, ModelConfig};
use crate::numcore::ParamStore;
use crate::pruning::l1_prune_group;

fn random_stack(langs: &[LanguageSpec], seed: u64, store: &mut ParamStore) -> AdapterStack {
    let config = ModelConfig { num_layers: 2, d_model: 4, num_heads: 1, d_ffn: 6, vocab_size: 8, max_len: 8 };
    let stack = build_adapter_stack(
        &config,
        &enumerate_sites(&config),
        langs,
        &RankPolicy::uniform(2),
        Placement::All,
        Routing::Fixed(IndexStrategy::by_side(2)),
        seed,
        store,
    )
    .unwrap();
    let mut rng = SeedTree::new(seed).rng_for("fill");
    for id in stack.factor_ids() {
        if store.name(id).ends_with(".B") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    stack
}

fn three_langs() -> Vec<LanguageSpec> {
    vec![
        LanguageSpec::new("hi", ResourceType::High, 1000),
        LanguageSpec::new("me", ResourceType::Medium, 100),
        LanguageSpec::new("vl", ResourceType::VeryLow, 10),
    ]
}

#[test]
fn score_examples() {
    assert_eq!(importance_score(64, 40, 0.5).unwrap(), 8.0);
    assert_eq!(importance_score(64, 24, 0.5).unwrap(), -8.0);
    assert_eq!(importance_score(64, 32, 0.5).unwrap(), 0.0);
    assert!(matches!(importance_score(4, 5, 0.5), Err(Error::Argument(_))));
}

#[test]
fn joint_groups_conserve_score() {
    for grouping in [Grouping::LayerwiseCrossLanguage, Grouping::LanguageSpecificGlobal, Grouping::PerMatrix] {
        let mut store = ParamStore::new();
        let mut stack = random_stack(&three_langs(), 7, &mut store);
        let plan = PrunePlan::build(&stack, grouping, None);
        for g in &plan.groups {
            l1_prune_group(&mut stack, &store, g, 0.7).unwrap();
        }
        let table = ScoreTable::from_masks(&stack, &plan, 0.7).unwrap();
        for (group, sum) in table.group_sums() {
            assert!(sum > -1.0 && sum <= 1e-9, "{group}: {sum}");
        }
        for r in &table.rows {
            assert_eq!(r.score, r.pruned as f64 - 0.7 * r.total as f64);
        }
    }
}

#[test]
fn csv_layout_and_aggregates() {
    let mut store = ParamStore::new();
    let mut stack = random_stack(&three_langs(), 3, &mut store);
    let plan = PrunePlan::build(&stack, Grouping::LayerwiseCrossLanguage, None);
    for g in &plan.groups {
        l1_prune_group(&mut stack, &store, g, 0.7).unwrap();
    }
    let table = ScoreTable::from_masks(&stack, &plan, 0.7).unwrap();
    let csv = table.to_csv();
    assert!(csv.starts_with("language,side,layer,kind,total,pruned,ratio,score\nhi,encoder,0,q,8,"));
    assert_eq!(csv.lines().count(), 1 + 26 * 3);
    let heat = table.heatmap_csv();
    assert!(heat.starts_with("language,kind,mean_score\n"));
    assert_eq!(heat.lines().count(), 1 + 3 * 8);
    let means = table.language_means();
    let direct: f64 = table.rows.iter().filter(|r| r.language == "vl").map(|r| r.score).sum::<f64>() / 26.0;
    assert!((means["vl"] - direct).abs() < 1e-12);
    assert_eq!(table.layer_means().len(), 3 * 4);
}

#[test]
fn single_matrix_group_scores_within_one() {
    let mut store = ParamStore::new();
    let mut stack = random_stack(&three_langs()[..1], 9, &mut store);
    let plan = PrunePlan::build(&stack, Grouping::PerMatrix, None);
    l1_prune_group(&mut stack, &store, &plan.groups[0], 0.7).unwrap();
    let table = ScoreTable::from_masks(&stack, &plan, 0.7).unwrap();
    assert!(table.rows[0].score.abs() < 1.0);
}

#[test]
fn mixed_ranks_are_rejected() {
    let mut langs = three_langs();
    assert_eq!(require_uniform_rank(&langs).unwrap(), 8);
    langs[2].rank = 4;
    assert!(matches!(require_uniform_rank(&langs), Err(Error::Config(_))));
}

#[test]
fn pearson_examples() {
    let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
    let c = pearson_correlation(&xs, &ys, 0).unwrap();
    assert!((c.r - 1.0).abs() < 1e-12);
    assert!(c.p <= 1.0 / 10_000.0);
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    assert!((pearson_correlation(&xs, &neg, 0).unwrap().r + 1.0).abs() < 1e-12);
    let c = pearson_correlation(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0], 0).unwrap();
    assert!((c.r - 0.6).abs() < 1e-12);
    assert!(c.p > 0.1);
}

#[test]
fn pearson_rejects_bad_input() {
    assert!(matches!(pearson_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 0), Err(Error::Degenerate(_))));
    assert!(matches!(pearson_correlation(&[1.0, 2.0], &[1.0, 2.0], 0), Err(Error::Argument(_))));
    assert!(matches!(pearson_correlation(&[1.0, 2.0, 3.0], &[1.0, 2.0], 0), Err(Error::Argument(_))));
}

#[test]
fn pearson_is_seed_deterministic() {
    let xs = [0.3, 1.2, 2.2, 2.9, 4.5, 5.0];
    let ys = [1.0, 0.2, 2.5, 2.0, 3.3, 2.9];
    assert_eq!(pearson_correlation(&xs, &ys, 5).unwrap(), pearson_correlation(&xs, &ys, 5).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn score_is_linear(t in 0usize..500, t2 in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0, rho in 0.0f64..1.0) {
        let (p, p2) = ((a * t as f64) as usize, (b * t2 as f64) as usize);
        let lhs = importance_score(t, p, rho).unwrap() + importance_score(t2, p2, rho).unwrap();
        let rhs = importance_score(t + t2, p + p2, rho).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn r_matches_oracle(pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)) {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        prop_assume!(xs.iter().any(|&x| x != xs[0]) && ys.iter().any(|&y| y != ys[0]));
        let ours = pearson_r(&xs, &ys);
        let oracle = oracle_pearson(&xs, &ys).unwrap();
        prop_assert!((ours - oracle).abs() <= 1e-9, "{ours} vs {oracle}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn r_is_affine_invariant(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 5..12),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let moved: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
        let a = pearson_correlation(&xs, &ys, 1).unwrap();
        let b = pearson_correlation(&moved, &ys, 1).unwrap();
        prop_assert!((a.r - b.r).abs() <= 1e-9);
        prop_assert!((a.p - b.p).abs() <= 0.02);
    }
}
