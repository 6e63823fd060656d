use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalSet;
use crate::data::{encoder_input, lang_token, EOS, PAD};
use crate::error::{Error, Result};
use crate::metrics::{bleu, DirectionScore};
use crate::model::{BaseModel, Direction, PaddedBatch, SiteAdapters};
use crate::numcore::{ParamStore, Session};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decode {
    #[default]
    Greedy,
    /// Length-normalized beam search.
    Beam { width: usize },
}

const DECODE_BATCH: usize = 64;

/// Index of the largest value; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Last-position logits of each row for the given decoder prefixes.
fn next_logits(
    model: &BaseModel,
    store: &ParamStore,
    adapters: Option<&dyn SiteAdapters>,
    src: &PaddedBatch,
    prefixes: &[Vec<usize>],
    dir: Direction,
) -> Result<Vec<Vec<f64>>> {
    let mut sess = Session::inference(store);
    let tgt = PaddedBatch::new(prefixes, PAD)?;
    let logits = model.forward(&mut sess, adapters, src, &tgt, dir)?;
    let value = sess.graph.value(logits);
    let vocab = model.config().vocab_size;
    Ok((0..prefixes.len())
        .map(|b| {
            let row = b * tgt.len + tgt.len - 1;
            value.data()[row * vocab..(row + 1) * vocab].to_vec()
        })
        .collect())
}

fn output_limit(model: &BaseModel) -> usize {
    model.config().max_len
}

/// Greedy decoding of encoder inputs that share one direction. Outputs
/// exclude the language tag and the final EOS.
pub fn greedy_decode(
    model: &BaseModel,
    store: &ParamStore,
    adapters: Option<&dyn SiteAdapters>,
    sources: &[Vec<usize>],
    dir: Direction,
) -> Result<Vec<Vec<usize>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let src = PaddedBatch::new(sources, PAD)?;
    let mut sess = Session::inference(store);
    let memory = model.encode(&mut sess, adapters, &src, dir)?;
    let vocab = model.config().vocab_size;
    let mut prefixes: Vec<Vec<usize>> = vec![vec![lang_token(dir.tgt)]; sources.len()];
    let mut done = vec![false; sources.len()];
    for _ in 0..output_limit(model) {
        let tgt = PaddedBatch::new(&prefixes, PAD)?;
        let logits = model.decode(&mut sess, adapters, memory, &src, &tgt, dir)?;
        let value = sess.graph.value(logits).data().to_vec();
        for (b, prefix) in prefixes.iter_mut().enumerate() {
            if done[b] {
                prefix.push(PAD);
                continue;
            }
            let row = b * tgt.len + tgt.len - 1;
            let next = argmax(&value[row * vocab..(row + 1) * vocab]);
            prefix.push(next);
            done[b] = next == EOS;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(prefixes.into_iter().map(|p| p[1..].iter().copied().take_while(|&t| t != EOS && t != PAD).collect()).collect())
}

struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

/// Beam search for one source sentence, ranking finished hypotheses by
/// log-probability divided by generated length (EOS included).
pub fn beam_search(
    model: &BaseModel,
    store: &ParamStore,
    adapters: Option<&dyn SiteAdapters>,
    source: &[usize],
    dir: Direction,
    width: usize,
) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(Error::Argument("beam width must be at least 1".into()));
    }
    let mut active = vec![Hyp { tokens: vec![lang_token(dir.tgt)], logp: 0.0 }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..output_limit(model) {
        let src = PaddedBatch::new(&vec![source.to_vec(); active.len()], PAD)?;
        let prefixes: Vec<Vec<usize>> = active.iter().map(|h| h.tokens.clone()).collect();
        let rows = next_logits(model, store, adapters, &src, &prefixes, dir)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, row) in rows.iter().enumerate() {
            for (tok, lp) in log_softmax(row).into_iter().enumerate() {
                cands.push((active[h].logp + lp, h, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(logp, h, tok) in cands.iter().take(width) {
            let mut tokens = active[h].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                let len = (tokens.len() - 1) as f64;
                finished.push((tokens, logp / len));
            } else {
                next.push(Hyp { tokens, logp });
            }
        }
        active = next;
        if active.is_empty() || finished.len() >= width {
            break;
        }
    }
    for h in active {
        let len = (h.tokens.len() - 1) as f64;
        finished.push((h.tokens, h.logp / len));
    }
    let mut best = 0;
    for (i, f) in finished.iter().enumerate() {
        if f.1 > finished[best].1 {
            best = i;
        }
    }
    Ok(finished[best].0[1..].iter().copied().take_while(|&t| t != EOS).collect())
}

/// Decodes every pair and scores BLEU per direction, ordered by
/// (source code, target code).
pub fn evaluate(
    model: &BaseModel,
    store: &ParamStore,
    adapters: Option<&dyn SiteAdapters>,
    eval: EvalSet<'_>,
    decode: Decode,
) -> Result<Vec<DirectionScore>> {
    let mut by_dir: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in eval.pairs.iter().enumerate() {
        by_dir.entry((p.src_lang, p.tgt_lang)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(by_dir.len());
    for ((s, t), idx) in by_dir {
        let dir = Direction { src: s, tgt: t };
        let mut hyps = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(DECODE_BATCH) {
            let sources: Vec<Vec<usize>> = chunk.iter().map(|&i| encoder_input(&eval.pairs[i])).collect();
            match decode {
                Decode::Greedy => hyps.extend(greedy_decode(model, store, adapters, &sources, dir)?),
                Decode::Beam { width } => {
                    for src in &sources {
                        hyps.push(beam_search(model, store, adapters, src, dir, width)?);
                    }
                }
            }
        }
        let refs: Vec<Vec<usize>> = idx.iter().map(|&i| eval.pairs[i].y.clone()).collect();
        let code = |i: usize| {
            eval.languages.get(i).map(|l| l.code.clone()).ok_or_else(|| Error::Argument(format!("no language {i}")))
        };
        out.push(DirectionScore { src: code(s)?, tgt: code(t)?, bleu: bleu(&hyps, &refs, 4)? });
    }
    out.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
    Ok(out)
}
