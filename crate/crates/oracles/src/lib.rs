//! Slow, obviously-correct reference computations for tests.
//!
//! Nothing here is shared with the production crates. Every oracle refuses
//! inputs larger than [`LIMIT`] elements.

pub const LIMIT: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Refused(pub String);

fn guard(what: &str, n: usize) -> Result<(), Refused> {
    if n > LIMIT {
        Err(Refused(format!("{what}: {n} elements exceeds the oracle limit of {LIMIT}")))
    } else {
        Ok(())
    }
}

/// Gradual pruning ratio at 1-based epoch `e`.
pub fn oracle_schedule(p: f64, e_start: usize, k: usize, e: usize) -> f64 {
    if e <= e_start {
        return 0.0;
    }
    if e > e_start + k {
        return p;
    }
    let frac = (e - e_start) as f64 / k as f64;
    let rest = 1.0 - frac;
    p - p * (rest * rest * rest)
}

/// Indices zeroed by magnitude pruning of `values` at `ratio`: a full
/// sort by (|v|, index), then the first `floor(ratio · n)` entries.
pub fn oracle_prune(values: &[f64], ratio: f64) -> Result<Vec<usize>, Refused> {
    guard("oracle_prune", values.len())?;
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].abs().partial_cmp(&values[b].abs()).unwrap().then(a.cmp(&b)));
    let n = (ratio * values.len() as f64).floor() as usize;
    let mut out = idx[..n].to_vec();
    out.sort_unstable();
    Ok(out)
}

fn ngrams(seq: &[u32], n: usize) -> Vec<Vec<u32>> {
    if seq.len() < n {
        return Vec::new();
    }
    (0..=seq.len() - n).map(|i| seq[i..i + n].to_vec()).collect()
}

fn count_in(list: &[Vec<u32>], g: &[u32]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// Corpus BLEU on a 0–100 scale.
///
/// Orders with no candidate n-grams anywhere are dropped. When any kept
/// order n ≥ 2 has zero matches, every kept order n ≥ 2 is add-one
/// smoothed. All-empty corpora score 100.
pub fn oracle_bleu(cands: &[Vec<u32>], refs: &[Vec<u32>], max_n: usize) -> Result<f64, Refused> {
    let size: usize = cands.iter().chain(refs).map(Vec::len).sum();
    guard("oracle_bleu", size)?;
    assert_eq!(cands.len(), refs.len());
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if c_len == 0 {
        return Ok(if r_len == 0 { 100.0 } else { 0.0 });
    }
    let mut matches = Vec::new();
    let mut totals = Vec::new();
    for n in 1..=max_n {
        let mut m = 0usize;
        let mut t = 0usize;
        for (c, r) in cands.iter().zip(refs) {
            let cg = ngrams(c, n);
            let rg = ngrams(r, n);
            t += cg.len();
            let mut seen: Vec<Vec<u32>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                m += count_in(&cg, g).min(count_in(&rg, g));
            }
        }
        if t == 0 {
            break;
        }
        matches.push(m);
        totals.push(t);
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let smooth = matches.iter().skip(1).any(|&m| m == 0);
    let mut log_sum = 0.0;
    for i in 0..matches.len() {
        let (m, t) = if i > 0 && smooth { (matches[i] + 1, totals[i] + 1) } else { (matches[i], totals[i]) };
        log_sum += (m as f64 / t as f64).ln();
    }
    let geo = (log_sum / matches.len() as f64).exp();
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(100.0 * bp * geo)
}

/// Pearson r from raw sums.
pub fn oracle_pearson(xs: &[f64], ys: &[f64]) -> Result<f64, Refused> {
    guard("oracle_pearson", xs.len() + ys.len())?;
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    Ok((n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt()))
}

/// Largest-remainder split of `total` in proportion to `weights`; leftover
/// units go to the largest fractional parts, lower index first on ties.
pub fn oracle_apportion(total: usize, weights: &[f64]) -> Result<Vec<usize>, Refused> {
    guard("oracle_apportion", weights.len())?;
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let given: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - given) {
        out[i] += 1;
    }
    Ok(out)
}

/// Central-difference gradient of `f` at `x`.
pub fn oracle_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>, Refused> {
    guard("oracle_gradient", x.len())?;
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}
