//! Synthetic multilingual parallel corpora and many-to-many datasets.
//!
//! Each sentence set is a latent "meaning" (a random sequence over a base
//! alphabet) realized in every language through a per-language grammar:
//! a substitution table, an optional affix token and optional swapping of
//! adjacent tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lslo::{LanguageSpec, ResourceType};
use crate::numcore::rng::SeedTree;

pub const PAD: usize = 0;
pub const EOS: usize = 1;

/// Token id of the `i`-th language tag.
pub fn lang_token(lang: usize) -> usize {
    2 + lang
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    /// Every language draws from one content range.
    Shared,
    /// Each language has a content range of its own.
    Disjoint,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    /// Languages naming the same family share most of their table.
    #[serde(default)]
    pub family: Option<String>,
    #[serde(default)]
    pub reorder: bool,
    /// Identity table, no affix, no reordering.
    #[serde(default)]
    pub identity: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_sets: usize,
    pub min_len: usize,
    /// Longest realized sentence, affix included.
    pub max_len: usize,
    pub alphabet: usize,
    pub vocab_mode: VocabMode,
    #[serde(default = "default_true")]
    pub affixes: bool,
    /// Fraction of the alphabet swapped away from a shared family table.
    #[serde(default)]
    pub divergence: f64,
    pub test_fraction: f64,
    /// Pair budget of the imbalanced seed-training dataset.
    pub pretrain_pairs: usize,
    /// Sentence sets used, in every direction, for fine-tuning.
    pub finetune_sets: usize,
    #[serde(default)]
    pub grammar: BTreeMap<String, GrammarSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_sets: 400,
            min_len: 3,
            max_len: 10,
            alphabet: 24,
            vocab_mode: VocabMode::Shared,
            affixes: true,
            divergence: 0.1,
            test_fraction: 0.2,
            pretrain_pairs: 3000,
            finetune_sets: 60,
            grammar: BTreeMap::new(),
        }
    }
}

impl DataConfig {
    /// Vocabulary size needed for `n` languages.
    pub fn vocab_needed(&self, n: usize) -> usize {
        let content = match self.vocab_mode {
            VocabMode::Shared => self.alphabet,
            VocabMode::Disjoint => n * self.alphabet,
        };
        2 + n + content + if self.affixes { n } else { 0 }
    }

    pub fn validate(&self, langs: &[LanguageSpec]) -> Result<()> {
        if self.num_sets == 0 {
            return Err(Error::Config("num_sets must be at least 1".into()));
        }
        if self.alphabet == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need alphabet ≥ 1 and 1 ≤ min_len ≤ max_len".into()));
        }
        if self.affixes && self.max_len < self.min_len + 1 {
            return Err(Error::Config("max_len leaves no room for the affix".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        if !(0.0..=1.0).contains(&self.divergence) {
            return Err(Error::Config(format!("divergence {} outside [0, 1]", self.divergence)));
        }
        if langs.len() < 2 {
            return Err(Error::Config("need at least two languages".into()));
        }
        for code in self.grammar.keys() {
            if !langs.iter().any(|l| &l.code == code) {
                return Err(Error::Config(format!("grammar entry for unknown language {code}")));
            }
        }
        Ok(())
    }
}

/// How one language realizes a meaning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grammar {
    pub table: Vec<usize>,
    pub affix: Option<usize>,
    pub reorder: bool,
}

impl Grammar {
    pub fn realize(&self, meaning: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = meaning.iter().map(|&m| self.table[m]).collect();
        if self.reorder {
            for pair in out.chunks_exact_mut(2) {
                pair.swap(0, 1);
            }
        }
        out.extend(self.affix);
        out
    }

    /// Inverts [`Grammar::realize`]; `None` if the sentence is not one this
    /// grammar produces.
    pub fn recover(&self, sentence: &[usize]) -> Option<Vec<usize>> {
        let body = match self.affix {
            Some(a) => sentence.strip_suffix(&[a])?,
            None => sentence,
        };
        let mut body = body.to_vec();
        if self.reorder {
            for pair in body.chunks_exact_mut(2) {
                pair.swap(0, 1);
            }
        }
        body.iter().map(|t| self.table.iter().position(|x| x == t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSet {
    pub id: usize,
    pub meaning: Vec<usize>,
    /// One sentence per language, in corpus language order.
    pub sentences: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub languages: Vec<LanguageSpec>,
    pub grammars: Vec<Grammar>,
    pub sets: Vec<SentenceSet>,
    pub train_sets: Vec<usize>,
    pub test_sets: Vec<usize>,
    pub vocab_size: usize,
}

fn language_grammars(langs: &[LanguageSpec], cfg: &DataConfig, seeds: SeedTree) -> Vec<Grammar> {
    let n = langs.len();
    let content_base = 2 + n;
    let affix_base = content_base
        + match cfg.vocab_mode {
            VocabMode::Shared => cfg.alphabet,
            VocabMode::Disjoint => n * cfg.alphabet,
        };
    let swaps = (cfg.divergence * cfg.alphabet as f64).round() as usize;
    langs
        .iter()
        .enumerate()
        .map(|(i, lang)| {
            let spec = cfg.grammar.get(&lang.code).cloned().unwrap_or_default();
            let offset = match cfg.vocab_mode {
                VocabMode::Shared => content_base,
                VocabMode::Disjoint => content_base + i * cfg.alphabet,
            };
            let mut perm: Vec<usize> = (0..cfg.alphabet).collect();
            if !spec.identity {
                match &spec.family {
                    Some(family) => {
                        perm.shuffle(&mut seeds.child("family").rng_for(family));
                        let mut rng = seeds.child("divergence").rng_for(&lang.code);
                        for _ in 0..swaps {
                            let (a, b) = (rng.gen_range(0..cfg.alphabet), rng.gen_range(0..cfg.alphabet));
                            perm.swap(a, b);
                        }
                    }
                    None => perm.shuffle(&mut seeds.child("table").rng_for(&lang.code)),
                }
            }
            Grammar {
                table: perm.into_iter().map(|p| p + offset).collect(),
                affix: (cfg.affixes && !spec.identity).then_some(affix_base + i),
                reorder: spec.reorder && !spec.identity,
            }
        })
        .collect()
}

/// Generates `cfg.num_sets` aligned sentence sets and the train/test split.
pub fn generate_corpus(
    langs: &[LanguageSpec],
    cfg: &DataConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    cfg.validate(langs)?;
    let needed = cfg.vocab_needed(langs.len());
    if needed > vocab_size {
        return Err(Error::Config(format!("corpus needs {needed} token ids but the vocabulary has {vocab_size}")));
    }
    let seeds = SeedTree::new(seed).child("corpus");
    let grammars = language_grammars(langs, cfg, seeds.child("grammar"));
    let longest_meaning = cfg.max_len - usize::from(cfg.affixes);
    let mut rng = seeds.rng_for("meanings");
    let sets: Vec<SentenceSet> = (0..cfg.num_sets)
        .map(|id| {
            let len = rng.gen_range(cfg.min_len..=longest_meaning);
            let meaning: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.alphabet)).collect();
            let sentences = grammars.iter().map(|g| g.realize(&meaning)).collect();
            SentenceSet { id, meaning, sentences }
        })
        .collect();
    let mut order: Vec<usize> = (0..cfg.num_sets).collect();
    order.shuffle(&mut seeds.rng_for("split"));
    let n_test = (cfg.test_fraction * cfg.num_sets as f64).floor() as usize;
    let mut test_sets = order[..n_test].to_vec();
    let mut train_sets = order[n_test..].to_vec();
    test_sets.sort_unstable();
    train_sets.sort_unstable();
    Ok(ParallelCorpus { languages: langs.to_vec(), grammars, sets, train_sets, test_sets, vocab_size })
}

impl ParallelCorpus {
    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.code == code)
    }

    /// `set_id<TAB>lang<TAB>tokens` lines, sets in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for set in &self.sets {
            for (lang, sent) in self.languages.iter().zip(&set.sentences) {
                let toks: Vec<String> = sent.iter().map(usize::to_string).collect();
                let _ = writeln!(out, "{}\t{}\t{}", set.id, lang.code, toks.join(" "));
            }
        }
        out
    }

    /// Every ordered pair of distinct languages.
    pub fn all_directions(&self) -> Vec<(usize, usize)> {
        let n = self.languages.len();
        (0..n).flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t))).collect()
    }
}

/// One record of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusRecord {
    pub set_id: usize,
    pub lang: String,
    pub tokens: Vec<usize>,
}

/// Parses [`ParallelCorpus::to_text`] output; blank lines and `#` comments
/// are skipped.
pub fn parse_corpus_text(text: &str) -> Result<Vec<CorpusRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(n, line)| {
            let bad = || Error::Format(format!("corpus line {}: \"{line}\"", n + 1));
            let mut f = line.split('\t');
            let (Some(id), Some(lang), Some(toks), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            let tokens =
                toks.split_whitespace().map(|t| t.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
            Ok(CorpusRecord { set_id: id.parse().map_err(|_| bad())?, lang: lang.to_string(), tokens })
        })
        .collect()
}

/// Direction label such as `H2V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DirectionBucket {
    pub src: ResourceType,
    pub tgt: ResourceType,
}

impl fmt::Display for DirectionBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}2{}", self.src.letter(), self.tgt.letter())
    }
}

impl DirectionBucket {
    pub fn parse(s: &str) -> Option<Self> {
        let mut c = s.chars();
        let (Some(a), Some('2'), Some(b), None) = (c.next(), c.next(), c.next(), c.next()) else {
            return None;
        };
        Some(Self { src: ResourceType::from_letter(a)?, tgt: ResourceType::from_letter(b)? })
    }
}

pub fn bucket_of(src: &LanguageSpec, tgt: &LanguageSpec) -> DirectionBucket {
    DirectionBucket { src: src.resource_type, tgt: tgt.resource_type }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationPair {
    pub src_lang: usize,
    pub tgt_lang: usize,
    pub set_id: usize,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

/// Largest-remainder split of `total` proportional to integer `weights`;
/// leftover units go to the largest remainders, lower index first on ties.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let scaled: Vec<u128> = weights.iter().map(|&w| total as u128 * w as u128).collect();
    let mut out: Vec<usize> = scaled.iter().map(|s| (s / sum) as usize).collect();
    let left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (scaled[b] % sum).cmp(&(scaled[a] % sum)).then(a.cmp(&b)));
    for &i in order.iter().take(left) {
        out[i] += 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `total` pairs: split over source languages by corpus size, then over
    /// each source's targets by target corpus size. A direction whose quota
    /// is positive but rounds to zero borrows one pair from a sibling. Language ℓ
    /// draws only from its first `corpus_size` training sets.
    Imbalanced { total: usize },
    /// The first `sets` training sets (in seeded order), in every direction.
    Balanced { sets: usize },
    /// Every held-out set in every direction.
    Test,
}

/// Per-direction pair counts of an imbalanced dataset.
pub fn imbalanced_counts(
    langs: &[LanguageSpec],
    directions: &[(usize, usize)],
    total: usize,
) -> BTreeMap<(usize, usize), usize> {
    let sources: Vec<usize> =
        langs.iter().enumerate().filter(|(i, _)| directions.iter().any(|d| d.0 == *i)).map(|(i, _)| i).collect();
    let budgets = apportion(total, &sources.iter().map(|&s| langs[s].corpus_size).collect::<Vec<_>>());
    let mut counts = BTreeMap::new();
    for (&s, &budget) in sources.iter().zip(&budgets) {
        let targets: Vec<usize> = directions.iter().filter(|d| d.0 == s).map(|d| d.1).collect();
        let weights: Vec<usize> = targets.iter().map(|&t| langs[t].corpus_size).collect();
        let mut split = apportion(budget, &weights);
        if split.iter().sum::<usize>() < budget {
            // Every target has zero corpus; the budget has nowhere to go.
            continue;
        }
        lift_empty_directions(budget, &weights, &mut split);
        for (&t, &c) in targets.iter().zip(&split) {
            counts.insert((s, t), c);
        }
    }
    counts
}

/// Moves single pairs onto targets whose positive quota rounded to zero,
/// each time from the target furthest above its own quota.
fn lift_empty_directions(budget: usize, weights: &[usize], split: &mut [usize]) {
    let total_w: i128 = weights.iter().map(|&w| w as i128).sum();
    // Excess over quota, scaled by the total weight to stay in integers.
    let excess = |i: usize, c: usize| c as i128 * total_w - budget as i128 * weights[i] as i128;
    for i in 0..split.len() {
        if split[i] > 0 || weights[i] == 0 {
            continue;
        }
        let donor = (0..split.len())
            .filter(|&j| split[j] > 1)
            .max_by(|&a, &b| excess(a, split[a]).cmp(&excess(b, split[b])).then(b.cmp(&a)));
        if let Some(j) = donor {
            split[j] -= 1;
            split[i] = 1;
        }
    }
}

fn check_directions(corpus: &ParallelCorpus, directions: &[(usize, usize)]) -> Result<()> {
    if directions.is_empty() {
        return Err(Error::Config("empty direction set".into()));
    }
    let n = corpus.languages.len();
    let mut seen = BTreeSet::new();
    for &(s, t) in directions {
        if s >= n || t >= n || s == t {
            return Err(Error::Config(format!("invalid direction ({s}, {t})")));
        }
        if !seen.insert((s, t)) {
            return Err(Error::Config(format!("direction ({s}, {t}) listed twice")));
        }
    }
    Ok(())
}

pub fn build_dataset(
    corpus: &ParallelCorpus,
    directions: &[(usize, usize)],
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<TranslationPair>> {
    check_directions(corpus, directions)?;
    let seeds = SeedTree::new(seed).child("dataset");
    let pair = |s: usize, t: usize, set_id: usize| {
        let set = &corpus.sets[set_id];
        TranslationPair { src_lang: s, tgt_lang: t, set_id, x: set.sentences[s].clone(), y: set.sentences[t].clone() }
    };
    let mut out = Vec::new();
    match sampling {
        Sampling::Test => {
            for &(s, t) in directions {
                out.extend(corpus.test_sets.iter().map(|&id| pair(s, t, id)));
            }
        }
        Sampling::Balanced { sets } => {
            if sets > corpus.train_sets.len() {
                return Err(Error::Config(format!(
                    "{sets} fine-tuning sets requested but only {} training sets exist",
                    corpus.train_sets.len()
                )));
            }
            let mut order = corpus.train_sets.clone();
            order.shuffle(&mut seeds.rng_for("finetune"));
            let mut chosen = order[..sets].to_vec();
            chosen.sort_unstable();
            for &(s, t) in directions {
                out.extend(chosen.iter().map(|&id| pair(s, t, id)));
            }
        }
        Sampling::Imbalanced { total } => {
            let mut owned = corpus.train_sets.clone();
            owned.shuffle(&mut seeds.rng_for("ownership"));
            for ((s, t), count) in imbalanced_counts(&corpus.languages, directions, total) {
                let pool_len = corpus.languages[s].corpus_size.min(corpus.languages[t].corpus_size).min(owned.len());
                if count == 0 {
                    continue;
                }
                if pool_len == 0 {
                    return Err(Error::Config(format!(
                        "direction {}→{} needs pairs but has no training sets",
                        corpus.languages[s].code, corpus.languages[t].code
                    )));
                }
                let mut rng = seeds.child("draw").rng_for(&format!("{s}-{t}"));
                let mut pool = owned[..pool_len].to_vec();
                let mut next = pool_len;
                for _ in 0..count {
                    if next == pool_len {
                        pool.shuffle(&mut rng);
                        next = 0;
                    }
                    out.push(pair(s, t, pool[next]));
                    next += 1;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionEntry {
    pub src: String,
    pub tgt: String,
    pub bucket: String,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub sets: Vec<usize>,
    pub total_pairs: usize,
    pub directions: Vec<DirectionEntry>,
}

impl DatasetManifest {
    pub fn describe(corpus: &ParallelCorpus, split: &str, pairs: &[TranslationPair]) -> Self {
        let mut per: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut sets = BTreeSet::new();
        for p in pairs {
            *per.entry((p.src_lang, p.tgt_lang)).or_insert(0) += 1;
            sets.insert(p.set_id);
        }
        let langs = &corpus.languages;
        Self {
            split: split.to_string(),
            sets: sets.into_iter().collect(),
            total_pairs: pairs.len(),
            directions: per
                .into_iter()
                .map(|((s, t), n)| DirectionEntry {
                    src: langs[s].code.clone(),
                    tgt: langs[t].code.clone(),
                    bucket: bucket_of(&langs[s], &langs[t]).to_string(),
                    pairs: n,
                })
                .collect(),
        }
    }
}

/// Encoder input `[LANG_src, x…, EOS]`.
pub fn encoder_input(p: &TranslationPair) -> Vec<usize> {
    let mut v = Vec::with_capacity(p.x.len() + 2);
    v.push(lang_token(p.src_lang));
    v.extend(&p.x);
    v.push(EOS);
    v
}

/// Decoder input `[LANG_tgt, y…]`.
pub fn decoder_input(p: &TranslationPair) -> Vec<usize> {
    let mut v = Vec::with_capacity(p.y.len() + 1);
    v.push(lang_token(p.tgt_lang));
    v.extend(&p.y);
    v
}

/// Decoder targets `[y…, EOS]`.
pub fn decoder_target(p: &TranslationPair) -> Vec<usize> {
    let mut v = p.y.clone();
    v.push(EOS);
    v
}
