//! Pre-norm encoder–decoder transformer with addressable adapter sites.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointHeader, ManifestEntry, CHECKPOINT_FORMAT_VERSION};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng::{gaussian_vec, SeedTree};
use crate::numcore::{AttentionSpec, ParamId, ParamStore, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layers per side.
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { num_layers: 4, d_model: 64, num_heads: 4, d_ffn: 128, vocab_size: 128, max_len: 32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model.num_heads ({}) must divide model.d_model ({})",
                self.num_heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub const ALL: [Side; 2] = [Side::Encoder, Side::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        Side::ALL.into_iter().find(|side| side.as_str() == s)
    }
}

/// Weight matrices eligible for an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    #[serde(rename = "q")]
    Q,
    #[serde(rename = "k")]
    K,
    #[serde(rename = "v")]
    V,
    #[serde(rename = "c-q")]
    CrossQ,
    #[serde(rename = "c-k")]
    CrossK,
    #[serde(rename = "c-v")]
    CrossV,
    #[serde(rename = "fc1")]
    Fc1,
    #[serde(rename = "fc2")]
    Fc2,
}

impl SiteKind {
    pub const ENCODER: [SiteKind; 5] = [SiteKind::Q, SiteKind::K, SiteKind::V, SiteKind::Fc1, SiteKind::Fc2];
    pub const DECODER: [SiteKind; 8] = [
        SiteKind::Q,
        SiteKind::K,
        SiteKind::V,
        SiteKind::CrossQ,
        SiteKind::CrossK,
        SiteKind::CrossV,
        SiteKind::Fc1,
        SiteKind::Fc2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Q => "q",
            SiteKind::K => "k",
            SiteKind::V => "v",
            SiteKind::CrossQ => "c-q",
            SiteKind::CrossK => "c-k",
            SiteKind::CrossV => "c-v",
            SiteKind::Fc1 => "fc1",
            SiteKind::Fc2 => "fc2",
        }
    }

    pub fn parse(s: &str) -> Option<SiteKind> {
        SiteKind::DECODER.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, SiteKind::Fc1 | SiteKind::Fc2)
    }

    pub fn is_cross(self) -> bool {
        matches!(self, SiteKind::CrossQ | SiteKind::CrossK | SiteKind::CrossV)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub side: Side,
    pub layer: usize,
    pub kind: SiteKind,
}

impl Site {
    pub fn new(side: Side, layer: usize, kind: SiteKind) -> Result<Site> {
        if kind.is_cross() && side == Side::Encoder {
            return Err(Error::Argument(format!("{} only exists on the decoder", kind.as_str())));
        }
        Ok(Site { side, layer, kind })
    }

    /// `(d, k)`: output and input width of the site's weight matrix.
    pub fn dims(&self, config: &ModelConfig) -> (usize, usize) {
        match self.kind {
            SiteKind::Fc1 => (config.d_ffn, config.d_model),
            SiteKind::Fc2 => (config.d_model, config.d_ffn),
            _ => (config.d_model, config.d_model),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.side.as_str(), self.layer, self.kind.as_str())
    }
}

/// All adapter-eligible sites, encoder layers first.
pub fn enumerate_sites(config: &ModelConfig) -> Vec<Site> {
    let mut sites = Vec::new();
    for layer in 0..config.num_layers {
        sites.extend(SiteKind::ENCODER.iter().map(|&kind| Site { side: Side::Encoder, layer, kind }));
    }
    for layer in 0..config.num_layers {
        sites.extend(SiteKind::DECODER.iter().map(|&kind| Site { side: Side::Decoder, layer, kind }));
    }
    sites
}

/// A translation direction as indices into the experiment's language list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Direction {
    pub src: usize,
    pub tgt: usize,
}

/// Per-site additive contributions to the base model (adapters).
pub trait SiteAdapters {
    /// Output to add to the site's base projection of `x`, if any.
    fn delta(&self, sess: &mut Session<'_>, site: Site, x: Var, dir: Direction) -> Result<Option<Var>>;
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttentionBlock,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    attn: AttentionBlock,
    cross: AttentionBlock,
    ffn: FeedForward,
}

/// Parameter layout of the base transformer. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BaseModel {
    config: ModelConfig,
    embed: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: Norm,
    dec_norm: Norm,
    out_proj: ParamId,
    params: Vec<ParamId>,
}

/// Right-padded token ids for a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    pub valid: Vec<bool>,
}

impl PaddedBatch {
    pub fn new(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            tokens.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            tokens.extend(std::iter::repeat_n(pad, len - s.len()));
            valid.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(Self { batch: seqs.len(), len, tokens, valid })
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seeds: SeedTree,
    ids: Vec<ParamId>,
}

impl Builder<'_> {
    fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = gaussian_vec(&mut self.seeds.rng_for(name), n, std);
        let id = self.store.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"), true);
        self.ids.push(id);
        id
    }

    fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let id = self.store.insert(name, Tensor::full(shape, value), true);
        self.ids.push(id);
        id
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Linear {
        Linear {
            weight: self.gaussian(&format!("{name}.w"), &[out, inp], 1.0 / (inp as f64).sqrt()),
            bias: self.filled(&format!("{name}.b"), &[out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { gain: self.filled(&format!("{name}.g"), &[d], 1.0), bias: self.filled(&format!("{name}.b"), &[d], 0.0) }
    }

    fn attention(&mut self, name: &str, d: usize, cross: bool) -> AttentionBlock {
        let p = if cross { "c-" } else { "" };
        AttentionBlock {
            norm: self.norm(&format!("{name}.{p}ln"), d),
            q: self.linear(&format!("{name}.{p}q"), d, d),
            k: self.linear(&format!("{name}.{p}k"), d, d),
            v: self.linear(&format!("{name}.{p}v"), d, d),
            out: self.linear(&format!("{name}.{p}o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{name}.ffn_ln"), d),
            fc1: self.linear(&format!("{name}.fc1"), f, d),
            fc2: self.linear(&format!("{name}.fc2"), d, f),
        }
    }
}

/// Deterministically initialized base model; parameters are added to `store`.
pub fn build_model(config: &ModelConfig, seed: u64, store: &mut ParamStore) -> Result<BaseModel> {
    config.validate()?;
    let ModelConfig { num_layers, d_model: d, d_ffn, vocab_size, max_len, .. } = *config;
    let mut b = Builder { store, seeds: SeedTree::new(seed).child("model"), ids: Vec::new() };
    let emb_std = 1.0 / (d as f64).sqrt();
    let embed = b.gaussian("embed", &[vocab_size, d], emb_std);
    let enc_pos = b.gaussian("enc.pos", &[max_len, d], emb_std);
    let dec_pos = b.gaussian("dec.pos", &[max_len, d], emb_std);
    let encoder = (0..num_layers)
        .map(|l| {
            let name = format!("enc.{l}");
            EncoderLayer { attn: b.attention(&name, d, false), ffn: b.ffn(&name, d, d_ffn) }
        })
        .collect();
    let decoder = (0..num_layers)
        .map(|l| {
            let name = format!("dec.{l}");
            DecoderLayer {
                attn: b.attention(&name, d, false),
                cross: b.attention(&name, d, true),
                ffn: b.ffn(&name, d, d_ffn),
            }
        })
        .collect();
    let enc_norm = b.norm("enc.ln", d);
    let dec_norm = b.norm("dec.ln", d);
    let out_proj = b.gaussian("out_proj", &[vocab_size, d], emb_std);
    Ok(BaseModel {
        config: config.clone(),
        embed,
        enc_pos,
        dec_pos,
        encoder,
        decoder,
        enc_norm,
        dec_norm,
        out_proj,
        params: b.ids,
    })
}

impl BaseModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.element_count(&self.params)
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        for &id in &self.params {
            store.set_trainable(id, !frozen);
        }
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        self.params.iter().all(|&id| !store.is_trainable(id))
    }

    /// Base weight matrix at `site`.
    pub fn site_linear(&self, site: Site) -> Linear {
        match site.side {
            Side::Encoder => {
                let l = &self.encoder[site.layer];
                match site.kind {
                    SiteKind::Q => l.attn.q,
                    SiteKind::K => l.attn.k,
                    SiteKind::V => l.attn.v,
                    SiteKind::Fc1 => l.ffn.fc1,
                    SiteKind::Fc2 => l.ffn.fc2,
                    _ => unreachable!("cross-attention site on the encoder"),
                }
            }
            Side::Decoder => {
                let l = &self.decoder[site.layer];
                match site.kind {
                    SiteKind::Q => l.attn.q,
                    SiteKind::K => l.attn.k,
                    SiteKind::V => l.attn.v,
                    SiteKind::CrossQ => l.cross.q,
                    SiteKind::CrossK => l.cross.k,
                    SiteKind::CrossV => l.cross.v,
                    SiteKind::Fc1 => l.ffn.fc1,
                    SiteKind::Fc2 => l.ffn.fc2,
                }
            }
        }
    }

    fn check_tokens(&self, batch: &PaddedBatch) -> Result<()> {
        if batch.len > self.config.max_len {
            return Err(Error::Argument(format!(
                "sequence length {} exceeds max_len {}",
                batch.len, self.config.max_len
            )));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Argument(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, sess: &mut Session<'_>, batch: &PaddedBatch, pos_table: ParamId) -> Result<Var> {
        let table = sess.param(self.embed);
        let tok = sess.graph.embedding(table, &batch.tokens)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
        let pos_table = sess.param(pos_table);
        let pos = sess.graph.embedding(pos_table, &positions)?;
        Ok(sess.graph.add(tok, pos)?)
    }

    fn norm(&self, sess: &mut Session<'_>, norm: Norm, x: Var) -> Result<Var> {
        let g = sess.param(norm.gain);
        let b = sess.param(norm.bias);
        Ok(sess.graph.layer_norm(x, g, b)?)
    }

    fn project(
        &self,
        sess: &mut Session<'_>,
        lin: Linear,
        x: Var,
        site: Option<Site>,
        adapters: Option<&dyn SiteAdapters>,
        dir: Direction,
    ) -> Result<Var> {
        let w = sess.param(lin.weight);
        let b = sess.param(lin.bias);
        let h = sess.graph.matmul_nt(x, w)?;
        let h = sess.graph.add_row(h, b)?;
        if let (Some(site), Some(adapters)) = (site, adapters) {
            if let Some(delta) = adapters.delta(sess, site, x, dir)? {
                return Ok(sess.graph.add(h, delta)?);
            }
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        sess: &mut Session<'_>,
        block: &AttentionBlock,
        x: Var,
        memory: Option<Var>,
        spec: AttentionSpec,
        sites: Option<[Site; 3]>,
        adapters: Option<&dyn SiteAdapters>,
        dir: Direction,
    ) -> Result<Var> {
        let h = self.norm(sess, block.norm, x)?;
        let kv_in = memory.unwrap_or(h);
        let [sq, sk, sv] = match sites {
            Some(s) => s.map(Some),
            None => [None; 3],
        };
        let q = self.project(sess, block.q, h, sq, adapters, dir)?;
        let k = self.project(sess, block.k, kv_in, sk, adapters, dir)?;
        let v = self.project(sess, block.v, kv_in, sv, adapters, dir)?;
        let a = sess.graph.attention(q, k, v, spec)?;
        let o = self.project(sess, block.out, a, None, adapters, dir)?;
        Ok(sess.graph.add(x, o)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn feed_forward(
        &self,
        sess: &mut Session<'_>,
        block: &FeedForward,
        x: Var,
        side: Side,
        layer: usize,
        adapters: Option<&dyn SiteAdapters>,
        dir: Direction,
    ) -> Result<Var> {
        let h = self.norm(sess, block.norm, x)?;
        let f = self.project(sess, block.fc1, h, Some(Site { side, layer, kind: SiteKind::Fc1 }), adapters, dir)?;
        let f = sess.graph.gelu(f);
        let f = self.project(sess, block.fc2, f, Some(Site { side, layer, kind: SiteKind::Fc2 }), adapters, dir)?;
        Ok(sess.graph.add(x, f)?)
    }

    /// Encoder states `[batch·src_len, d_model]`.
    pub fn encode(
        &self,
        sess: &mut Session<'_>,
        adapters: Option<&dyn SiteAdapters>,
        src: &PaddedBatch,
        dir: Direction,
    ) -> Result<Var> {
        self.check_tokens(src)?;
        let mut x = self.embed(sess, src, self.enc_pos)?;
        let spec = AttentionSpec {
            batch: src.batch,
            q_len: src.len,
            k_len: src.len,
            heads: self.config.num_heads,
            key_valid: src.valid.clone(),
            causal: false,
        };
        for (layer, block) in self.encoder.iter().enumerate() {
            let side = Side::Encoder;
            let sites = [SiteKind::Q, SiteKind::K, SiteKind::V].map(|kind| Site { side, layer, kind });
            x = self.attend(sess, &block.attn, x, None, spec.clone(), Some(sites), adapters, dir)?;
            x = self.feed_forward(sess, &block.ffn, x, side, layer, adapters, dir)?;
        }
        self.norm(sess, self.enc_norm, x)
    }

    /// Next-token logits `[batch·tgt_len, vocab]` given encoder states.
    pub fn decode(
        &self,
        sess: &mut Session<'_>,
        adapters: Option<&dyn SiteAdapters>,
        memory: Var,
        src: &PaddedBatch,
        tgt_in: &PaddedBatch,
        dir: Direction,
    ) -> Result<Var> {
        self.check_tokens(tgt_in)?;
        if tgt_in.batch != src.batch {
            return Err(Error::Argument(format!("batch sizes differ: {} vs {}", src.batch, tgt_in.batch)));
        }
        let mut y = self.embed(sess, tgt_in, self.dec_pos)?;
        let self_spec = AttentionSpec {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: tgt_in.len,
            heads: self.config.num_heads,
            key_valid: tgt_in.valid.clone(),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: src.len,
            heads: self.config.num_heads,
            key_valid: src.valid.clone(),
            causal: false,
        };
        for (layer, block) in self.decoder.iter().enumerate() {
            let side = Side::Decoder;
            let own = [SiteKind::Q, SiteKind::K, SiteKind::V].map(|kind| Site { side, layer, kind });
            let cross = [SiteKind::CrossQ, SiteKind::CrossK, SiteKind::CrossV].map(|kind| Site { side, layer, kind });
            y = self.attend(sess, &block.attn, y, None, self_spec.clone(), Some(own), adapters, dir)?;
            y = self.attend(sess, &block.cross, y, Some(memory), cross_spec.clone(), Some(cross), adapters, dir)?;
            y = self.feed_forward(sess, &block.ffn, y, side, layer, adapters, dir)?;
        }
        let y = self.norm(sess, self.dec_norm, y)?;
        let out = sess.param(self.out_proj);
        Ok(sess.graph.matmul_nt(y, out)?)
    }

    /// Full teacher-forced forward pass.
    pub fn forward(
        &self,
        sess: &mut Session<'_>,
        adapters: Option<&dyn SiteAdapters>,
        src: &PaddedBatch,
        tgt_in: &PaddedBatch,
        dir: Direction,
    ) -> Result<Var> {
        let memory = self.encode(sess, adapters, src, dir)?;
        self.decode(sess, adapters, memory, src, tgt_in, dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { num_layers: 2, d_model: 8, num_heads: 2, d_ffn: 12, vocab_size: 11, max_len: 8 }
    }

    #[test]
    fn site_counts() {
        let mut c = tiny();
        c.num_layers = 1;
        assert_eq!(enumerate_sites(&c).len(), 13);
        c.num_layers = 12;
        assert_eq!(enumerate_sites(&c).len(), 156);
        c.num_layers = 0;
        assert!(enumerate_sites(&c).is_empty());
        assert_eq!(enumerate_sites(&ModelConfig::default()).len(), 52);
    }

    #[test]
    fn enumeration_order() {
        let sites = enumerate_sites(&tiny());
        assert_eq!(sites[0].to_string(), "encoder.0.q");
        assert_eq!(sites[4].to_string(), "encoder.0.fc2");
        assert_eq!(sites[5].to_string(), "encoder.1.q");
        assert_eq!(sites[10].to_string(), "decoder.0.q");
        assert_eq!(sites[13].to_string(), "decoder.0.c-q");
        assert_eq!(sites.last().unwrap().to_string(), "decoder.1.fc2");
    }

    #[test]
    fn cross_sites_only_on_decoder() {
        assert!(Site::new(Side::Encoder, 0, SiteKind::CrossK).is_err());
        assert!(Site::new(Side::Decoder, 0, SiteKind::CrossK).is_ok());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut c = tiny();
        c.num_heads = 3;
        let mut store = ParamStore::new();
        assert!(matches!(build_model(&c, 0, &mut store), Err(Error::Config(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let (mut s1, mut s2) = (ParamStore::new(), ParamStore::new());
        build_model(&tiny(), 5, &mut s1).unwrap();
        build_model(&tiny(), 5, &mut s2).unwrap();
        assert_eq!(s1.len(), s2.len());
        for id in s1.ids() {
            assert!(s1.get(id).bitwise_eq(s2.get(id)));
        }
        let mut s3 = ParamStore::new();
        build_model(&tiny(), 6, &mut s3).unwrap();
        assert!(!s1.get(s1.id("embed").unwrap()).bitwise_eq(s3.get(s3.id("embed").unwrap())));
    }

    #[test]
    fn forward_shapes_and_token_checks() {
        let mut store = ParamStore::new();
        let m = build_model(&tiny(), 1, &mut store).unwrap();
        let src = PaddedBatch::new(&[vec![3, 4, 5], vec![6, 7]], 0).unwrap();
        let tgt = PaddedBatch::new(&[vec![2, 8], vec![2, 9, 10, 4]], 0).unwrap();
        let mut sess = Session::new(&store);
        let dir = Direction { src: 0, tgt: 1 };
        let logits = m.forward(&mut sess, None, &src, &tgt, dir).unwrap();
        assert_eq!(sess.graph.value(logits).shape(), &[8, 11]);

        let bad = PaddedBatch::new(&[vec![3, 11]], 0).unwrap();
        let mut sess = Session::new(&store);
        assert!(matches!(m.forward(&mut sess, None, &bad, &tgt, dir), Err(Error::Argument(_))));
        let long = PaddedBatch::new(&[vec![3; 9]], 0).unwrap();
        assert!(matches!(m.forward(&mut sess, None, &long, &tgt, dir), Err(Error::Argument(_))));
    }

    #[test]
    fn decoder_is_causal() {
        let mut store = ParamStore::new();
        let m = build_model(&tiny(), 2, &mut store).unwrap();
        let src = PaddedBatch::new(&[vec![3, 4, 5, 6]], 0).unwrap();
        let dir = Direction { src: 0, tgt: 1 };
        let run = |tgt: Vec<usize>| {
            let mut sess = Session::inference(&store);
            let t = PaddedBatch::new(&[tgt], 0).unwrap();
            let l = m.forward(&mut sess, None, &src, &t, dir).unwrap();
            sess.graph.value(l).clone()
        };
        let a = run(vec![2, 7, 8, 9, 10]);
        for j in 1..5 {
            let mut t = vec![2, 7, 8, 9, 10];
            t[j] = 3;
            let b = run(t);
            assert_eq!(a.data()[..j * 11], b.data()[..j * 11], "position {j} leaked backwards");
            assert_ne!(a.data()[j * 11..], b.data()[j * 11..]);
        }
    }
}
