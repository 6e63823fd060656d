//! Importance scores from pruning outcomes and their correlation with
//! corpus size.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lslo::{AdapterStack, LanguageSpec};
use crate::model::{Side, SiteKind};
use crate::numcore::rng::SeedTree;
use crate::pruning::{Grouping, PrunePlan};

/// `pruned − ratio · total`. Positive means the matrix lost more entries
/// than the target rate, so a smaller subspace would do.
pub fn importance_score(total: usize, pruned: usize, ratio: f64) -> Result<f64> {
    if pruned > total {
        return Err(Error::Argument(format!("pruned count {pruned} exceeds total {total}")));
    }
    Ok(pruned as f64 - ratio * total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub language: String,
    pub side: Side,
    pub layer: usize,
    pub kind: SiteKind,
    pub group: String,
    pub total: usize,
    pub pruned: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub grouping: Grouping,
    pub ratio: f64,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    /// Scores every `B` matrix in the plan from the stack's current masks.
    pub fn from_masks(stack: &AdapterStack, plan: &PrunePlan, ratio: f64) -> Result<Self> {
        let mut rows = Vec::new();
        for g in &plan.groups {
            for m in &g.members {
                let adapter = &stack.adapters()[m.adapter];
                let f = adapter
                    .factors(m.lang)
                    .ok_or_else(|| Error::Plan(format!("group {} names a missing matrix", g.id)))?;
                let total = f.mask.len();
                let pruned = f.mask.count_zeros();
                rows.push(ScoreRow {
                    language: stack.languages()[m.lang].code.clone(),
                    side: adapter.site.side,
                    layer: adapter.site.layer,
                    kind: adapter.site.kind,
                    group: g.id.clone(),
                    total,
                    pruned,
                    score: importance_score(total, pruned, ratio)?,
                });
            }
        }
        Ok(Self { grouping: plan.grouping, ratio, rows })
    }

    /// `language,side,layer,kind,total,pruned,ratio,score` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,side,layer,kind,total,pruned,ratio,score\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.language,
                r.side.as_str(),
                r.layer,
                r.kind.as_str(),
                r.total,
                r.pruned,
                self.ratio,
                r.score
            );
        }
        out
    }

    /// Sum of scores per pruning group.
    pub fn group_sums(&self) -> BTreeMap<String, f64> {
        let mut sums = BTreeMap::new();
        for r in &self.rows {
            *sums.entry(r.group.clone()).or_insert(0.0) += r.score;
        }
        sums
    }

    /// Mean score per language over all its matrices.
    pub fn language_means(&self) -> BTreeMap<String, f64> {
        mean_by(&self.rows, |r| r.language.clone())
    }

    /// Mean score per (language, side, layer), averaged over kinds.
    pub fn layer_means(&self) -> BTreeMap<(String, Side, usize), f64> {
        mean_by(&self.rows, |r| (r.language.clone(), r.side, r.layer))
    }

    /// Mean score per (language, kind), averaged over layers.
    pub fn kind_means(&self) -> BTreeMap<(String, SiteKind), f64> {
        mean_by(&self.rows, |r| (r.language.clone(), r.kind))
    }

    /// `language,kind,mean_score` rows.
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("language,kind,mean_score\n");
        for ((lang, kind), mean) in self.kind_means() {
            let _ = writeln!(out, "{lang},{},{mean}", kind.as_str());
        }
        out
    }
}

fn mean_by<K: Ord>(rows: &[ScoreRow], key: impl Fn(&ScoreRow) -> K) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(key(r)).or_insert((0.0, 0));
        e.0 += r.score;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Checks the equal-rank precondition of estimation runs.
pub fn require_uniform_rank(langs: &[LanguageSpec]) -> Result<usize> {
    let mut ranks = langs.iter().map(|l| l.rank);
    let first = ranks.next().ok_or_else(|| Error::Config("estimation needs at least one language".into()))?;
    if ranks.any(|r| r != first) {
        return Err(Error::Config("estimation requires every language to share one rank".into()));
    }
    Ok(first)
}

pub const PERMUTATIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
}

fn pearson_r(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Pearson `r` with a two-sided permutation p-value over
/// [`PERMUTATIONS`] shuffles of `ys` drawn from `seed`.
pub fn pearson_correlation(xs: &[f64], ys: &[f64], seed: u64) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::Argument(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Argument(format!("need at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Argument("correlation inputs must be finite".into()));
    }
    let flat = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if flat(xs) || flat(ys) {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    let r = pearson_r(xs, ys);
    let threshold = r.abs() - 1e-12;
    let mut rng = SeedTree::new(seed).rng_for("pearson");
    let mut shuffled = ys.to_vec();
    let mut hits = 0usize;
    for _ in 0..PERMUTATIONS {
        shuffled.shuffle(&mut rng);
        if pearson_r(xs, &shuffled).abs() >= threshold {
            hits += 1;
        }
    }
    Ok(Correlation { r, p: (hits + 1) as f64 / (PERMUTATIONS + 1) as f64 })
}

#[cfg(test)]
mod tests;
