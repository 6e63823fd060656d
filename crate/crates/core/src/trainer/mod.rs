//! Training loop, evaluation and the experiment phases.

mod decode;
mod phases;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{decoder_input, decoder_target, encoder_input, TranslationPair, PAD};
use crate::error::{Error, Result};
use crate::lslo::{AdapterStack, LanguageSpec, Routing};
use crate::metrics::DirectionScore;
use crate::model::{BaseModel, Direction, PaddedBatch, SiteAdapters};
use crate::numcore::rng::SeedTree;
use crate::numcore::{Adam, AdamConfig, NumError, ParamStore, Session};
use crate::pruning::{GradualPruner, PruneLogEntry};

pub use decode::{beam_search, evaluate, greedy_decode, Decode};
pub use phases::{
    estimate, finetune_all, lslo_finetune, seed_pretrain, weight_learn, AdapterSpec, EstimateOutcome, Phase, PhaseData,
    PruneSetup, WeightLearnOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Decode the evaluation set every this many epochs; 0 never does.
    #[serde(default)]
    pub bleu_every: usize,
    #[serde(default)]
    pub decode: Decode,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is not a finite nonnegative number",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// First record of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub phase: String,
    pub config_hash: String,
    pub seed: u64,
    /// Hash of the checkpoint the run started from, if any.
    pub parent: Option<String>,
}

/// Per-layer routing weights at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub side: String,
    pub layer: usize,
    pub w_src: f64,
    pub w_tgt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub bleu: Option<Vec<DirectionScore>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prune: Vec<PruneLogEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wl_weights: Vec<LayerWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub header: RunHeader,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    /// One JSON object per line: the header, then one per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = serde_json::from_str(lines.next().ok_or_else(|| Error::Format("empty run log".into()))?)?;
        let epochs = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, epochs })
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs.last().map_or(0, |e| e.steps)
    }
}

/// Evaluation data and the languages needed to name directions.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub pairs: &'a [TranslationPair],
    pub languages: &'a [LanguageSpec],
}

/// A single-direction minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dir: Direction,
    pub indices: Vec<usize>,
}

/// Groups pairs by direction, shuffles within each direction, cuts
/// batches, then interleaves directions round-robin in shuffled order.
pub fn make_batches(pairs: &[TranslationPair], batch_size: usize, rng: &mut crate::numcore::rng::Rng) -> Vec<Batch> {
    let mut by_dir: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_dir.entry((p.src_lang, p.tgt_lang)).or_default().push(i);
    }
    let mut queues: Vec<(Direction, Vec<Vec<usize>>)> = by_dir
        .into_iter()
        .map(|((src, tgt), mut idx)| {
            idx.shuffle(rng);
            (Direction { src, tgt }, idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
        })
        .collect();
    queues.shuffle(rng);
    for q in &mut queues {
        q.1.reverse();
    }
    let mut out = Vec::new();
    loop {
        let mut any = false;
        for (dir, q) in &mut queues {
            if let Some(indices) = q.pop() {
                out.push(Batch { dir: *dir, indices });
                any = true;
            }
        }
        if !any {
            return out;
        }
    }
}

/// Steps per epoch under single-direction batching.
pub fn steps_per_epoch(pairs: &[TranslationPair], batch_size: usize) -> usize {
    let mut by_dir: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for p in pairs {
        *by_dir.entry((p.src_lang, p.tgt_lang)).or_insert(0) += 1;
    }
    by_dir.values().map(|n| n.div_ceil(batch_size)).sum()
}

pub(crate) struct Tensors {
    pub src: PaddedBatch,
    pub tgt_in: PaddedBatch,
    pub targets: Vec<usize>,
}

pub(crate) fn batch_tensors(pairs: &[TranslationPair], indices: &[usize]) -> Result<Tensors> {
    let src: Vec<Vec<usize>> = indices.iter().map(|&i| encoder_input(&pairs[i])).collect();
    let tin: Vec<Vec<usize>> = indices.iter().map(|&i| decoder_input(&pairs[i])).collect();
    let tgt: Vec<Vec<usize>> = indices.iter().map(|&i| decoder_target(&pairs[i])).collect();
    let target_batch = PaddedBatch::new(&tgt, PAD)?;
    Ok(Tensors {
        src: PaddedBatch::new(&src, PAD)?,
        tgt_in: PaddedBatch::new(&tin, PAD)?,
        targets: target_batch.tokens,
    })
}

fn target_count(pairs: &[TranslationPair], indices: &[usize]) -> usize {
    indices.iter().map(|&i| pairs[i].y.len() + 1).sum()
}

/// Mean token cross-entropy of teacher-forced decoding over `pairs`.
pub fn mean_loss(
    model: &BaseModel,
    store: &ParamStore,
    adapters: Option<&dyn SiteAdapters>,
    pairs: &[TranslationPair],
    batch_size: usize,
) -> Result<f64> {
    let mut rng = SeedTree::new(0).rng_for("eval-batches");
    let mut total = 0.0;
    let mut count = 0usize;
    for b in make_batches(pairs, batch_size, &mut rng) {
        let t = batch_tensors(pairs, &b.indices)?;
        let mut sess = Session::inference(store);
        let logits = model.forward(&mut sess, adapters, &t.src, &t.tgt_in, b.dir)?;
        let loss = sess.graph.cross_entropy(logits, &t.targets, PAD)?;
        let n = target_count(pairs, &b.indices);
        total += sess.graph.value(loss).item() * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// State visible to the per-epoch hook once an epoch has finished.
#[derive(Clone, Copy)]
pub struct EpochView<'a> {
    pub record: &'a EpochRecord,
    pub adapters: Option<&'a AdapterStack>,
    pub store: &'a ParamStore,
}

pub type EpochHook<'a> = &'a mut dyn FnMut(EpochView<'_>) -> Result<()>;

/// Everything a training run touches besides the data.
pub struct TrainState<'a> {
    pub model: &'a BaseModel,
    pub store: &'a mut ParamStore,
    pub adapters: Option<&'a mut AdapterStack>,
    pub pruner: Option<&'a GradualPruner>,
}

/// Trains every parameter currently marked trainable with Adam.
///
/// `on_epoch` sees each record, with the masks and weights it describes,
/// as soon as the epoch ends.
pub fn train(
    state: TrainState<'_>,
    opts: &TrainOptions,
    header: RunHeader,
    pairs: &[TranslationPair],
    eval: Option<EvalSet<'_>>,
    on_epoch: EpochHook<'_>,
) -> Result<RunLog> {
    opts.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let TrainState { model, store, mut adapters, pruner } = state;
    if let (Some(p), None) = (pruner, &adapters) {
        return Err(Error::Config(format!("pruning plan with {} groups but no adapters", p.plan.groups.len())));
    }
    if let Some(p) = pruner {
        if p.schedule.total != opts.epochs {
            return Err(Error::Config(format!(
                "pruning schedule spans {} epochs but training runs {}",
                p.schedule.total, opts.epochs
            )));
        }
    }
    let mut adam = Adam::new(AdamConfig::with_lr(opts.learning_rate), store);
    let seeds = SeedTree::new(opts.seed).child("train");
    let per_epoch = steps_per_epoch(pairs, opts.batch_size) as u64;
    let mut log = RunLog { header, epochs: Vec::new() };
    for epoch in 1..=opts.epochs {
        let prune = match (pruner, adapters.as_deref_mut()) {
            (Some(p), Some(stack)) => p.on_epoch_start(epoch, stack, store)?,
            _ => Vec::new(),
        };
        let mut rng = seeds.rng_for(&format!("epoch-{epoch}"));
        let batches = make_batches(pairs, opts.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for (step, b) in batches.iter().enumerate() {
            let t = batch_tensors(pairs, &b.indices)?;
            let nonfinite = |what: &str| {
                Error::Numerical(format!(
                    "{what} at epoch {epoch}, step {} (direction {}→{})",
                    step + 1,
                    b.dir.src,
                    b.dir.tgt
                ))
            };
            let grads = {
                let mut sess = Session::new(store);
                let sa = adapters.as_deref().map(|a| a as &dyn SiteAdapters);
                let logits = model.forward(&mut sess, sa, &t.src, &t.tgt_in, b.dir)?;
                let loss = sess.graph.cross_entropy(logits, &t.targets, PAD)?;
                let value = sess.graph.value(loss).item();
                if !value.is_finite() {
                    return Err(nonfinite("non-finite loss"));
                }
                let n = target_count(pairs, &b.indices);
                loss_sum += value * n as f64;
                tokens += n;
                match sess.param_grads(loss) {
                    Ok(g) => g,
                    Err(NumError::NonFinite(_)) => return Err(nonfinite("non-finite gradient")),
                    Err(e) => return Err(e.into()),
                }
            };
            adam.step(store, &grads);
            if let Some(stack) = adapters.as_deref() {
                stack.apply_masks(store);
            }
        }
        if adam.steps() != per_epoch * epoch as u64 {
            return Err(Error::Numerical(format!(
                "optimizer took {} steps by epoch {epoch}, expected {}",
                adam.steps(),
                per_epoch * epoch as u64
            )));
        }
        let sa = adapters.as_deref().map(|a| a as &dyn SiteAdapters);
        let val_loss = match eval {
            Some(ev) if !ev.pairs.is_empty() => Some(mean_loss(model, store, sa, ev.pairs, opts.batch_size)?),
            _ => None,
        };
        let bleu = match eval {
            Some(ev) if opts.bleu_every > 0 && epoch % opts.bleu_every == 0 && !ev.pairs.is_empty() => {
                Some(evaluate(model, store, sa, ev, opts.decode)?)
            }
            _ => None,
        };
        let wl_weights = match adapters.as_deref().map(AdapterStack::routing) {
            Some(Routing::WeightLearning(wl)) => wl
                .weights(store)
                .into_iter()
                .map(|((side, layer), (w_src, w_tgt))| LayerWeights { side: side.as_str().into(), layer, w_src, w_tgt })
                .collect(),
            _ => Vec::new(),
        };
        let record = EpochRecord {
            epoch,
            steps: per_epoch * epoch as u64,
            train_loss: loss_sum / tokens.max(1) as f64,
            val_loss,
            bleu,
            prune,
            wl_weights,
        };
        on_epoch(EpochView { record: &record, adapters: adapters.as_deref(), store })?;
        log.epochs.push(record);
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
