use lslo_oracles::oracle_bleu;
use proptest::prelude::*;

use super::*;
use crate::lslo::ResourceType;

fn to_u32(v: &[Vec<usize>]) -> Vec<Vec<u32>> {
    v.iter().map(|s| s.iter().map(|&t| t as u32).collect()).collect()
}

#[test]
fn identity_and_disjoint() {
    let c = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8]];
    assert_eq!(bleu(&c, &c, 4).unwrap(), 100.0);
    assert_eq!(bleu(&[vec![1, 2, 3]], &[vec![4, 5, 6]], 4).unwrap(), 0.0);
    assert_eq!(bleu(&[vec![]], &[vec![]], 4).unwrap(), 100.0);
    assert_eq!(bleu(&[vec![]], &[vec![1]], 4).unwrap(), 0.0);
}

#[test]
fn single_pair_matches_oracle() {
    // "a b c d e" vs "a b c d f"
    let c = vec![vec![1, 2, 3, 4, 5]];
    let r = vec![vec![1, 2, 3, 4, 6]];
    let ours = bleu(&c, &r, 4).unwrap();
    let oracle = oracle_bleu(&to_u32(&c), &to_u32(&r), 4).unwrap();
    assert!((ours - oracle).abs() < 1e-9);
    // Precisions 4/5, 3/4, 2/3, 1/2 and no brevity penalty.
    let expect = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((ours - expect).abs() < 1e-9);
}

#[test]
fn length_mismatch_is_an_error() {
    assert!(matches!(bleu(&[vec![1]], &[], 4), Err(Error::Argument(_))));
}

#[test]
fn short_candidates_are_penalized() {
    let s = bleu(&[vec![1, 2]], &[vec![1, 2, 3, 4]], 4).unwrap();
    assert!((s - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
}

fn langs() -> Vec<LanguageSpec> {
    vec![
        LanguageSpec::new("h", ResourceType::High, 100),
        LanguageSpec::new("m", ResourceType::Medium, 10),
        LanguageSpec::new("v", ResourceType::VeryLow, 1),
    ]
}

fn all_dirs(score: impl Fn(usize, usize) -> f64) -> Vec<DirectionScore> {
    let codes = ["h", "m", "v"];
    let mut out = Vec::new();
    for s in 0..3 {
        for t in 0..3 {
            if s != t {
                out.push(DirectionScore { src: codes[s].into(), tgt: codes[t].into(), bleu: score(s, t) });
            }
        }
    }
    out
}

#[test]
fn uniform_scores_give_uniform_report() {
    let r = bucket_report("x", &all_dirs(|_, _| 10.0), &langs()).unwrap();
    assert!(r.buckets.values().all(|&v| v == 10.0));
    assert_eq!(r.avg_buckets, 10.0);
    assert_eq!(r.avg_directions, 10.0);
}

#[test]
fn one_direction_per_bucket_keeps_raw_scores() {
    let scores = all_dirs(|s, t| (s * 3 + t) as f64);
    let r = bucket_report("x", &scores, &langs()).unwrap();
    assert_eq!(r.buckets["H2M"], 1.0);
    assert_eq!(r.buckets["V2M"], 7.0);
    assert_eq!(r.buckets.len(), 6);
}

#[test]
fn nine_columns_for_three_types() {
    let mut l = langs();
    l.push(LanguageSpec::new("h2", ResourceType::High, 100));
    l.push(LanguageSpec::new("m2", ResourceType::Medium, 10));
    l.push(LanguageSpec::new("v2", ResourceType::VeryLow, 1));
    let mut scores = Vec::new();
    for a in &l {
        for b in &l {
            if a.code != b.code {
                scores.push(DirectionScore { src: a.code.clone(), tgt: b.code.clone(), bleu: 1.0 });
            }
        }
    }
    let r = bucket_report("pretrain", &scores, &l).unwrap();
    let csv = reports_csv(&[r]);
    assert_eq!(csv.lines().next().unwrap(), "method,H2H,H2M,H2V,M2H,M2M,M2V,V2H,V2M,V2V,AVG_buckets,AVG_directions");
    assert_eq!(csv.lines().nth(1).unwrap(), "pretrain,1.00,1.00,1.00,1.00,1.00,1.00,1.00,1.00,1.00,1.00,1.00");
}

#[test]
fn params_column_appears_when_any_report_has_a_count() {
    let l = langs();
    let scores = vec![DirectionScore { src: "h".into(), tgt: "v".into(), bleu: 12.5 }];
    let base = bucket_report("Pretrain", &scores, &l).unwrap();
    let lslo = BleuReport { params: Some(1234), ..bucket_report("2;2;8+WL+GPS(0.9)", &scores, &l).unwrap() };
    let csv = reports_csv(&[base, lslo]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,#Params,H2V,AVG_buckets,AVG_directions");
    assert_eq!(lines[1], "Pretrain,,12.50,12.50,12.50");
    assert_eq!(lines[2], "2;2;8+WL+GPS(0.9),1234,12.50,12.50,12.50");
}

#[test]
fn avg_buckets_differs_from_avg_directions() {
    let mut l = langs();
    l.push(LanguageSpec::new("h2", ResourceType::High, 100));
    let scores = vec![
        DirectionScore { src: "h".into(), tgt: "h2".into(), bleu: 30.0 },
        DirectionScore { src: "h2".into(), tgt: "h".into(), bleu: 30.0 },
        DirectionScore { src: "v".into(), tgt: "h".into(), bleu: 0.0 },
    ];
    let r = bucket_report("x", &scores, &l).unwrap();
    assert_eq!(r.avg_buckets, 15.0);
    assert_eq!(r.avg_directions, 20.0);
}

#[test]
fn unknown_language_is_rejected() {
    let scores = vec![DirectionScore { src: "zz".into(), tgt: "h".into(), bleu: 0.0 }];
    assert!(bucket_report("x", &scores, &langs()).is_err());
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    prop::collection::vec((prop::collection::vec(0usize..6, 0..9), prop::collection::vec(0usize..6, 0..9)), 1..6)
        .prop_map(|pairs| pairs.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_oracle((c, r) in corpus()) {
        let ours = bleu(&c, &r, 4).unwrap();
        let oracle = oracle_bleu(&to_u32(&c), &to_u32(&r), 4).unwrap();
        prop_assert!((ours - oracle).abs() <= 1e-9, "{ours} vs {oracle}");
        prop_assert!((0.0..=100.0).contains(&ours));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn invariant_under_pair_order_and_renaming((c, r) in corpus(), shift in 1usize..50, rot in 0usize..6) {
        let base = bleu(&c, &r, 4).unwrap();
        let n = c.len();
        let rc: Vec<_> = (0..n).map(|i| c[(i + rot) % n].clone()).collect();
        let rr: Vec<_> = (0..n).map(|i| r[(i + rot) % n].clone()).collect();
        prop_assert_eq!(bleu(&rc, &rr, 4).unwrap(), base);
        let rename = |v: &Vec<Vec<usize>>| -> Vec<Vec<usize>> {
            v.iter().map(|s| s.iter().map(|t| (t * 7 + shift) % 1000).collect()).collect()
        };
        prop_assert!((bleu(&rename(&c), &rename(&r), 4).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn identity_scores_100(c in prop::collection::vec(prop::collection::vec(0usize..20, 0..9), 1..6)) {
        prop_assert_eq!(bleu(&c, &c, 4).unwrap(), 100.0);
    }
}
