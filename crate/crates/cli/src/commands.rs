//! Subcommands: pipeline phases plus their on-disk inputs and outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lslo_core::data::{bucket_of, DatasetManifest};
use lslo_core::lslo::{IndexStrategy, Indexing};
use lslo_core::metrics::{reports_csv, BleuReport};
use lslo_core::model::Checkpoint;
use lslo_core::pruning::Grouping;
use lslo_core::trainer::{evaluate, Decode, EvalSet, Phase, RunLog};
use serde::Serialize;

use crate::error::CliError;
use crate::output::{csv_comment, Outputs, FORMAT_VERSION};
use crate::pipeline::{progress, Datasets, Lab, Result};

pub const CORPUS: &str = "data/corpus.tsv";
pub const MANIFEST: &str = "data/manifest.json";
pub const SEED_CHECKPOINT: &str = "seed_pretrain/checkpoint.bin";
pub const STRATEGY: &str = "weight_learn/strategy.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    FtAll,
    Lslo,
}

impl TrainPhase {
    pub fn dir(self) -> &'static str {
        match self {
            TrainPhase::FtAll => "ft_all",
            TrainPhase::Lslo => "lslo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimateMode {
    Layerwise,
    Langspec,
}

impl EstimateMode {
    pub fn dir(self) -> &'static str {
        match self {
            EstimateMode::Layerwise => "estimate_layerwise",
            EstimateMode::Langspec => "estimate_langspec",
        }
    }

    fn grouping(self) -> Grouping {
        match self {
            EstimateMode::Layerwise => Grouping::LayerwiseCrossLanguage,
            EstimateMode::Langspec => Grouping::LanguageSpecificGlobal,
        }
    }
}

/// Checkpoints that `evaluate` can score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Seed,
    FtAll,
    Lslo,
}

impl EvalTarget {
    fn dir(self) -> &'static str {
        match self {
            EvalTarget::Seed => "seed_pretrain",
            EvalTarget::FtAll => "ft_all",
            EvalTarget::Lslo => "lslo",
        }
    }
}

/// Everything a subcommand needs besides its own arguments.
pub struct Context {
    pub lab: Lab,
    pub out: PathBuf,
    pub force: bool,
    pub beam: Option<usize>,
}

impl Context {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn comment(&self) -> String {
        csv_comment(&self.lab.config_hash, self.lab.seed)
    }

    fn csv(&self, body: &str) -> String {
        format!("{}{body}", self.comment())
    }

    fn decode(&self) -> Decode {
        self.lab.decode(self.beam)
    }

    fn require(&self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Prerequisite(format!("{} not found; run `lslo {hint}` first", p.display())))
        }
    }

    fn corpus_text(&self, corpus: &lslo_core::data::ParallelCorpus) -> String {
        format!("{}{}", self.comment(), corpus.to_text())
    }

    /// Regenerates the corpus and checks it against the file on disk.
    fn datasets(&self) -> Result<Datasets> {
        let path = self.require(CORPUS, "gen-data")?;
        let corpus = self.lab.corpus()?;
        if fs::read_to_string(&path)? != self.corpus_text(&corpus) {
            return Err(CliError::Prerequisite(format!(
                "{} was generated from a different config or seed; rerun `lslo gen-data`",
                path.display()
            )));
        }
        self.lab.datasets(&corpus)
    }

    fn load_checkpoint(&self, rel: &str, hint: &str) -> Result<Checkpoint> {
        let path = self.require(rel, hint)?;
        Checkpoint::load(&path)
            .map_err(|e| CliError::Prerequisite(format!("cannot read {}: {e}; rerun `lslo {hint}`", path.display())))
    }

    fn strategy(&self, learned: bool) -> Result<IndexStrategy> {
        let layers = self.lab.model_config.num_layers;
        if !learned {
            return Ok(IndexStrategy::by_side(layers));
        }
        let path = self.require(STRATEGY, "weight-learn")?;
        let s = IndexStrategy::from_csv(&fs::read_to_string(&path)?)?;
        s.covers(layers).map_err(|e| CliError::Prerequisite(format!("{}: {e}", path.display())))?;
        Ok(s)
    }

    fn commit(&self, out: Outputs) -> Result<Vec<PathBuf>> {
        out.commit(&self.out, self.force)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    config_hash: &'a str,
    seed: u64,
    vocab_size: usize,
    splits: Vec<DatasetManifest>,
}

fn json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn add_report(out: &mut Outputs, ctx: &Context, dir: &str, report: &BleuReport) {
    out.add(format!("{dir}/report.json"), json(report));
    out.add(format!("{dir}/report.csv"), ctx.csv(&reports_csv(std::slice::from_ref(report))));
}

fn add_log(out: &mut Outputs, dir: &str, log: &RunLog) {
    out.add(format!("{dir}/runlog.jsonl"), log.to_jsonl());
}

pub fn gen_data(ctx: &Context) -> Result<Vec<PathBuf>> {
    let corpus = ctx.lab.corpus()?;
    let data = ctx.lab.datasets(&corpus)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: &ctx.lab.config_hash,
        seed: ctx.lab.seed,
        vocab_size: corpus.vocab_size,
        splits: vec![
            DatasetManifest::describe(&corpus, "pretrain", &data.pretrain),
            DatasetManifest::describe(&corpus, "finetune", &data.finetune),
            DatasetManifest::describe(&corpus, "test", &data.test),
        ],
    };
    let mut out = Outputs::new();
    out.add(CORPUS, ctx.corpus_text(&corpus));
    out.add(MANIFEST, json(&manifest));
    ctx.commit(out)
}

pub fn seed_pretrain(ctx: &Context) -> Result<Vec<PathBuf>> {
    let data = ctx.datasets()?;
    let (base, log, report) = ctx.lab.seed_pretrain(&data, ctx.decode(), &mut progress(Phase::SeedPretrain))?;
    let mut out = Outputs::new();
    out.add(SEED_CHECKPOINT, ctx.lab.base_checkpoint(&base, Phase::SeedPretrain).to_bytes());
    add_log(&mut out, "seed_pretrain", &log);
    add_report(&mut out, ctx, "seed_pretrain", &report);
    ctx.commit(out)
}

fn load_seed(ctx: &Context) -> Result<crate::pipeline::Trained> {
    let ck = ctx.load_checkpoint(SEED_CHECKPOINT, "seed-pretrain")?;
    ctx.lab.load_base(&ck, SEED_CHECKPOINT)
}

pub fn weight_learn(ctx: &Context) -> Result<Vec<PathBuf>> {
    let data = ctx.datasets()?;
    let base = load_seed(ctx)?;
    let run = ctx.lab.weight_learn(&base, &data, &mut progress(Phase::WeightLearn))?;
    let mut weights = String::from("side,layer,w_src,w_tgt\n");
    for ((side, layer), (s, t)) in &run.weights {
        let _ = writeln!(weights, "{},{layer},{s},{t}", side.as_str());
    }
    let mut out = Outputs::new();
    out.add("weight_learn/weights.csv", ctx.csv(&weights));
    out.add(STRATEGY, ctx.csv(&run.strategy.to_csv()));
    add_log(&mut out, "weight_learn", &run.log);
    ctx.commit(out)
}

pub fn train(ctx: &Context, phase: TrainPhase) -> Result<Vec<PathBuf>> {
    let data = ctx.datasets()?;
    let base = load_seed(ctx)?;
    let dir = phase.dir();
    let mut out = Outputs::new();
    match phase {
        TrainPhase::FtAll => {
            let run = ctx.lab.ft_all(&base, &data, ctx.decode(), &mut progress(Phase::FtAll))?;
            let tuned = crate::pipeline::Trained { model: base.model.clone(), store: run.store };
            out.add(format!("{dir}/checkpoint.bin"), ctx.lab.base_checkpoint(&tuned, Phase::FtAll).to_bytes());
            add_log(&mut out, dir, &run.log);
            add_report(&mut out, ctx, dir, &run.report);
        }
        TrainPhase::Lslo => {
            let strategy = ctx.strategy(ctx.lab.config.train.lslo.weight_learning)?;
            let run = ctx.lab.lslo(&base, &data, strategy, ctx.decode(), &mut progress(Phase::LsloFinetune))?;
            out.add(format!("{dir}/checkpoint.bin"), ctx.lab.lslo_checkpoint(&base.model, &run).to_bytes());
            add_log(&mut out, dir, &run.log);
            add_report(&mut out, ctx, dir, &run.report);
        }
    }
    ctx.commit(out)
}

pub fn estimate(ctx: &Context, mode: EstimateMode) -> Result<Vec<PathBuf>> {
    let data = ctx.datasets()?;
    let base = load_seed(ctx)?;
    let strategy = ctx.strategy(ctx.lab.config.estimate.weight_learning)?;
    let phase = match mode {
        EstimateMode::Layerwise => Phase::EstimateLayerwise,
        EstimateMode::Langspec => Phase::EstimateLangspec,
    };
    let run = ctx.lab.estimate(&base, &data, mode.grouping(), strategy, &mut progress(phase))?;
    let dir = mode.dir();
    let mut langs = String::from("language,corpus_size,log_corpus_size,mean_score\n");
    for (code, size, mean) in &run.languages {
        let _ = writeln!(langs, "{code},{size},{},{mean}", (*size as f64).ln());
    }
    let mut layers = String::from("language,side,layer,mean_score\n");
    for ((lang, side, layer), mean) in run.table.layer_means() {
        let _ = writeln!(layers, "{lang},{},{layer},{mean}", side.as_str());
    }
    let corr = match run.correlation {
        Some(c) => format!("n,r,p\n{},{},{}\n", run.languages.len(), c.r, c.p),
        None => format!("n,r,p\n{},,\n", run.languages.len()),
    };
    let mut out = Outputs::new();
    out.add(format!("{dir}/scores.csv"), ctx.csv(&run.table.to_csv()));
    out.add(format!("{dir}/heatmap.csv"), ctx.csv(&run.table.heatmap_csv()));
    out.add(format!("{dir}/layers.csv"), ctx.csv(&layers));
    out.add(format!("{dir}/languages.csv"), ctx.csv(&langs));
    out.add(format!("{dir}/correlation.csv"), ctx.csv(&corr));
    add_log(&mut out, dir, &run.log);
    ctx.commit(out)
}

fn decode_label(d: Decode) -> String {
    match d {
        Decode::Greedy => "greedy".into(),
        Decode::Beam { width } => format!("beam{width}"),
    }
}

pub fn evaluate_cmd(ctx: &Context, target: EvalTarget) -> Result<Vec<PathBuf>> {
    let data = ctx.datasets()?;
    let rel = format!("{}/checkpoint.bin", target.dir());
    let hint = match target {
        EvalTarget::Seed => "seed-pretrain",
        EvalTarget::FtAll => "train --phase ft-all",
        EvalTarget::Lslo => "train --phase lslo",
    };
    let ck = ctx.load_checkpoint(&rel, hint)?;
    let decode = ctx.decode();
    let langs = &ctx.lab.config.languages;
    let ev = EvalSet { pairs: &data.test, languages: langs };
    let (scores, method, params) = match target {
        EvalTarget::Seed | EvalTarget::FtAll => {
            let t = ctx.lab.load_base(&ck, &rel)?;
            let params = (target == EvalTarget::FtAll).then(|| t.model.param_count(&t.store));
            let method = if params.is_some() { "Ft-all" } else { "Pretrain" };
            (evaluate(&t.model, &t.store, None, ev, decode)?, method.to_string(), params)
        }
        EvalTarget::Lslo => {
            let (t, stack) = ctx.lab.load_lslo(&ck, &rel)?;
            let method = ck.metadata.get("method").cloned().unwrap_or_else(|| ctx.lab.lslo_label());
            (evaluate(&t.model, &t.store, Some(&stack), ev, decode)?, method, Some(stack.trainable_param_count()))
        }
    };
    let mut rows = String::from("src,tgt,bucket,bleu\n");
    for s in &scores {
        let spec = |c: &str| langs.iter().find(|l| l.code == c).expect("known language");
        let _ = writeln!(rows, "{},{},{},{}", s.src, s.tgt, bucket_of(spec(&s.src), spec(&s.tgt)), s.bleu);
    }
    let mut report = lslo_core::metrics::bucket_report(&method, &scores, langs)?;
    report.params = params;
    let stem = format!("eval/{}_{}", target.dir(), decode_label(decode));
    let mut out = Outputs::new();
    out.add(format!("{stem}.csv"), ctx.csv(&rows));
    out.add(format!("{stem}.json"), json(&report));
    ctx.commit(out)
}

/// Collects the phase reports present on disk into one table.
pub fn report(ctx: &Context) -> Result<Vec<PathBuf>> {
    let mut reports = Vec::new();
    for dir in ["seed_pretrain", "ft_all", "lslo"] {
        let p = ctx.path(&format!("{dir}/report.json"));
        if p.exists() {
            let r: BleuReport = serde_json::from_str(&fs::read_to_string(&p)?)
                .map_err(|e| CliError::Prerequisite(format!("{}: {e}", p.display())))?;
            reports.push(r);
        }
    }
    if reports.is_empty() {
        return Err(CliError::Prerequisite("no phase reports found; run `lslo seed-pretrain` first".into()));
    }
    let mut out = Outputs::new();
    out.add("report.csv", ctx.csv(&reports_csv(&reports)));
    ctx.commit(out)
}

/// Per-layer indexing in `side,layer,indexing` form, for logs.
pub fn describe_strategy(s: &IndexStrategy) -> String {
    s.entries()
        .map(|((side, layer), ix)| {
            let tag = match ix {
                Indexing::SourceIndexed => "src",
                Indexing::TargetIndexed => "tgt",
            };
            format!("{}{layer}:{tag}", &side.as_str()[..3])
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn out_dir(flag: Option<&Path>, lab: &Lab) -> PathBuf {
    flag.map(Path::to_path_buf).or_else(|| lab.config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
}
