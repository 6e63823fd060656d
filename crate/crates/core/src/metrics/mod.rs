//! Corpus BLEU over token ids and per-bucket aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{bucket_of, DirectionBucket};
use crate::error::{Error, Result};
use crate::lslo::LanguageSpec;

/// Corpus-level BLEU on a 0–100 scale.
///
/// Orders with no candidate n-grams anywhere are left out of the geometric
/// mean. If any kept order n ≥ 2 has zero matches, all kept orders n ≥ 2
/// get add-one smoothing. An all-empty corpus scores 100.
pub fn bleu(candidates: &[Vec<usize>], references: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Argument(format!("{} candidates but {} references", candidates.len(), references.len())));
    }
    if candidates.is_empty() || max_n == 0 {
        return Err(Error::Argument("bleu needs at least one pair and max_n ≥ 1".into()));
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(if ref_len == 0 { 100.0 } else { 0.0 });
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut counts: HashMap<&[usize], (usize, usize)> = HashMap::new();
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=max_n.min(c.len()) {
            counts.clear();
            for g in c.windows(n) {
                counts.entry(g).or_default().0 += 1;
            }
            for g in r.windows(n) {
                if let Some(e) = counts.get_mut(g) {
                    e.1 += 1;
                }
            }
            totals[n - 1] += c.len() + 1 - n;
            matches[n - 1] += counts.values().map(|&(cc, rc)| cc.min(rc)).sum::<usize>();
        }
    }
    let kept = totals.iter().take_while(|&&t| t > 0).count();
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let smooth = matches[1..kept].contains(&0);
    let log_p: f64 = (0..kept)
        .map(|i| {
            let add = usize::from(smooth && i > 0);
            ((matches[i] + add) as f64 / (totals[i] + add) as f64).ln()
        })
        .sum();
    let bp = if cand_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(100.0 * bp * (log_p / kept as f64).exp())
}

/// One translation direction's score, keyed by language codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub src: String,
    pub tgt: String,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub method: String,
    /// Trainable parameter count of the method, when known.
    #[serde(default)]
    pub params: Option<usize>,
    pub directions: Vec<DirectionScore>,
    /// Mean per bucket, keyed by labels such as `H2V`.
    pub buckets: BTreeMap<String, f64>,
    /// Mean of the nonempty bucket means.
    pub avg_buckets: f64,
    /// Mean over all directions.
    pub avg_directions: f64,
}

pub fn bucket_report(method: &str, scores: &[DirectionScore], langs: &[LanguageSpec]) -> Result<BleuReport> {
    if scores.is_empty() {
        return Err(Error::Argument("no direction scores to report".into()));
    }
    let spec = |code: &str| {
        langs
            .iter()
            .find(|l| l.code == code)
            .ok_or_else(|| Error::Argument(format!("no resource type for language {code}")))
    };
    let mut acc: BTreeMap<DirectionBucket, (f64, usize)> = BTreeMap::new();
    for s in scores {
        let e = acc.entry(bucket_of(spec(&s.src)?, spec(&s.tgt)?)).or_insert((0.0, 0));
        e.0 += s.bleu;
        e.1 += 1;
    }
    let buckets: BTreeMap<DirectionBucket, f64> = acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let avg_buckets = buckets.values().sum::<f64>() / buckets.len() as f64;
    let avg_directions = scores.iter().map(|s| s.bleu).sum::<f64>() / scores.len() as f64;
    let mut directions = scores.to_vec();
    directions.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
    Ok(BleuReport {
        method: method.to_string(),
        params: None,
        directions,
        buckets: buckets.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        avg_buckets,
        avg_directions,
    })
}

fn bucket_order(label: &str) -> Option<DirectionBucket> {
    DirectionBucket::parse(label)
}

/// One row per method; columns are `#Params` when any report carries a
/// count, the buckets present in any report in H2H…V2V order, then
/// `AVG_buckets` and `AVG_directions`.
pub fn reports_csv(reports: &[BleuReport]) -> String {
    let mut cols: Vec<DirectionBucket> =
        reports.iter().flat_map(|r| r.buckets.keys().filter_map(|k| bucket_order(k))).collect();
    cols.sort();
    cols.dedup();
    let with_params = reports.iter().any(|r| r.params.is_some());
    let mut out = String::from("method");
    if with_params {
        out.push_str(",#Params");
    }
    for c in &cols {
        let _ = write!(out, ",{c}");
    }
    out.push_str(",AVG_buckets,AVG_directions\n");
    for r in reports {
        out.push_str(&r.method);
        if with_params {
            out.push(',');
            if let Some(n) = r.params {
                let _ = write!(out, "{n}");
            }
        }
        for c in &cols {
            match r.buckets.get(&c.to_string()) {
                Some(v) => {
                    let _ = write!(out, ",{v:.2}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{:.2},{:.2}", r.avg_buckets, r.avg_directions);
    }
    out
}

#[cfg(test)]
mod tests;
