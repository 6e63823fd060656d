use std::collections::HashMap;

use super::policy::{check_languages, LanguageSpec, Placement, RankPolicy};
use super::strategy::{IndexStrategy, Indexing, WeightLearningState};
use crate::error::{Error, Result};
use crate::model::{Direction, ModelConfig, Site, SiteAdapters};
use crate::numcore::rng::{gaussian_vec, SeedTree};
use crate::numcore::{ParamId, ParamStore, Session, Tensor, Var};

/// One language's factors at one site: `A` is `r×k`, `B` is `d×r`.
#[derive(Clone, Debug)]
pub struct LangFactors {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    /// Binary, congruent to `B`; the effective `B` is `B ⊙ mask`.
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct LsloAdapter {
    pub site: Site,
    /// Output width `d` and input width `k` of the base weight.
    pub d: usize,
    pub k: usize,
    codes: Vec<String>,
    factors: Vec<LangFactors>,
}

impl LsloAdapter {
    pub fn factors(&self, lang: usize) -> Option<&LangFactors> {
        self.factors.get(lang)
    }

    pub fn factors_mut(&mut self, lang: usize) -> Option<&mut LangFactors> {
        self.factors.get_mut(lang)
    }

    pub fn languages(&self) -> usize {
        self.factors.len()
    }

    fn routing_error(&self, lang: usize) -> Error {
        Error::Routing {
            site: self.site.to_string(),
            language: self.codes.get(lang).cloned().unwrap_or(format!("#{lang}")),
        }
    }

    /// `(B_lang ⊙ mask)·A_lang·x` for each row `x`; only `lang`'s factors
    /// enter the graph.
    pub fn forward(&self, sess: &mut Session<'_>, x: Var, lang: usize) -> Result<Var> {
        let f = self.factors.get(lang).ok_or_else(|| self.routing_error(lang))?;
        let a = sess.param(f.a);
        let b = sess.param(f.b);
        let mask = sess.graph.constant(f.mask.clone());
        let b_eff = sess.graph.mul(b, mask)?;
        let ax = sess.graph.matmul_nt(x, a)?;
        Ok(sess.graph.matmul_nt(ax, b_eff)?)
    }

    /// Lookup by language code.
    pub fn forward_code(&self, sess: &mut Session<'_>, x: Var, code: &str) -> Result<Var> {
        let lang = self
            .codes
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| Error::Routing { site: self.site.to_string(), language: code.to_string() })?;
        self.forward(sess, x, lang)
    }

    /// `w_src·LSLo(x, src) + w_tgt·LSLo(x, tgt)` with `w = softmax(u)` taken
    /// from the layer's logit pair.
    pub fn weighted_forward(&self, sess: &mut Session<'_>, x: Var, dir: Direction, logits: ParamId) -> Result<Var> {
        if dir.src == dir.tgt {
            return self.forward(sess, x, dir.src);
        }
        let u = sess.param(logits);
        let w = sess.graph.softmax(u)?;
        let hs = self.forward(sess, x, dir.src)?;
        let ht = self.forward(sess, x, dir.tgt)?;
        let hs = sess.graph.scale_by_elem(hs, w, 0)?;
        let ht = sess.graph.scale_by_elem(ht, w, 1)?;
        Ok(sess.graph.add(hs, ht)?)
    }
}

/// How an adapter stack picks the active language per layer.
#[derive(Clone, Debug)]
pub enum Routing {
    Fixed(IndexStrategy),
    WeightLearning(WeightLearningState),
}

/// All adapters of a run, sharing one language list.
#[derive(Clone, Debug)]
pub struct AdapterStack {
    languages: Vec<LanguageSpec>,
    adapters: Vec<LsloAdapter>,
    by_site: HashMap<Site, usize>,
    routing: Routing,
    policy: RankPolicy,
    placement: Placement,
}

/// Σ over sites and languages of `d·r + r·k`.
pub fn trainable_param_count(site_dims: &[(usize, usize)], ranks: &[usize]) -> usize {
    site_dims.iter().map(|&(d, k)| ranks.iter().map(|&r| d * r + r * k).sum::<usize>()).sum()
}

/// Creates adapters at the sites admitted by `placement`. `A` is Gaussian
/// with standard deviation `1/√r`; `B` starts at zero with an all-ones mask.
#[allow(clippy::too_many_arguments)]
pub fn build_adapter_stack(
    config: &ModelConfig,
    sites: &[Site],
    langs: &[LanguageSpec],
    policy: &RankPolicy,
    placement: Placement,
    routing: Routing,
    seed: u64,
    store: &mut ParamStore,
) -> Result<AdapterStack> {
    let languages = policy.assign(langs)?;
    check_languages(&languages)?;
    if let Routing::Fixed(s) = &routing {
        s.covers(config.num_layers)?;
    }
    let seeds = SeedTree::new(seed).child("lslo");
    let codes: Vec<String> = languages.iter().map(|l| l.code.clone()).collect();
    let mut adapters = Vec::new();
    let mut by_site = HashMap::new();
    for &site in sites.iter().filter(|s| placement.admits(s.kind)) {
        if site.layer >= config.num_layers {
            return Err(Error::Config(format!("site {site} beyond {} layers", config.num_layers)));
        }
        let (d, k) = site.dims(config);
        let factors = languages
            .iter()
            .map(|l| {
                let r = l.rank;
                let name = format!("lslo.{site}.{}", l.code);
                let a_data = gaussian_vec(&mut seeds.rng_for(&name), r * k, 1.0 / (r as f64).sqrt());
                let a = store.insert(format!("{name}.A"), Tensor::matrix(r, k, a_data).expect("dims"), true);
                let b = store.insert(format!("{name}.B"), Tensor::zeros(&[d, r]), true);
                LangFactors { a, b, rank: r, mask: Tensor::ones(&[d, r]) }
            })
            .collect();
        by_site.insert(site, adapters.len());
        adapters.push(LsloAdapter { site, d, k, codes: codes.clone(), factors });
    }
    Ok(AdapterStack { languages, adapters, by_site, routing, policy: policy.clone(), placement })
}

impl AdapterStack {
    pub fn languages(&self) -> &[LanguageSpec] {
        &self.languages
    }

    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.code == code)
    }

    pub fn adapters(&self) -> &[LsloAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LsloAdapter] {
        &mut self.adapters
    }

    pub fn adapter(&self, site: Site) -> Option<&LsloAdapter> {
        self.by_site.get(&site).map(|&i| &self.adapters[i])
    }

    pub fn routing(&self) -> &Routing {
        &self.routing
    }

    pub fn policy(&self) -> &RankPolicy {
        &self.policy
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn site_dims(&self) -> Vec<(usize, usize)> {
        self.adapters.iter().map(|a| (a.d, a.k)).collect()
    }

    /// Factor parameters, site-major then language.
    pub fn factor_ids(&self) -> Vec<ParamId> {
        self.adapters.iter().flat_map(|a| a.factors.iter().flat_map(|f| [f.a, f.b])).collect()
    }

    /// Factor parameters plus weight-learning logits, if any.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.factor_ids();
        if let Routing::WeightLearning(wl) = &self.routing {
            ids.extend(wl.param_ids());
        }
        ids
    }

    pub fn trainable_param_count(&self) -> usize {
        let ranks: Vec<usize> = self.languages.iter().map(|l| l.rank).collect();
        trainable_param_count(&self.site_dims(), &ranks)
    }

    /// Language picked for `site` under a fixed strategy.
    pub fn routed_language(&self, site: Site, dir: Direction) -> Option<usize> {
        match &self.routing {
            Routing::Fixed(s) => Some(match s.get(site.side, site.layer)? {
                Indexing::SourceIndexed => dir.src,
                Indexing::TargetIndexed => dir.tgt,
            }),
            Routing::WeightLearning(_) => None,
        }
    }

    /// Zeroes every masked entry of every `B`.
    pub fn apply_masks(&self, store: &mut ParamStore) {
        for f in self.adapters.iter().flat_map(|a| &a.factors) {
            for (b, m) in store.get_mut(f.b).data_mut().iter_mut().zip(f.mask.data()) {
                if *m == 0.0 {
                    *b = 0.0;
                }
            }
        }
    }

    /// `B ⊙ mask` as stored for the given adapter and language.
    pub fn effective_b(&self, store: &ParamStore, adapter: usize, lang: usize) -> Tensor {
        let f = &self.adapters[adapter].factors[lang];
        let data = store.get(f.b).data().iter().zip(f.mask.data()).map(|(b, m)| b * m).collect();
        Tensor::new(f.mask.shape().to_vec(), data).expect("congruent")
    }

    /// Replaces the routing, e.g. after resolving a learned strategy.
    pub fn set_routing(&mut self, routing: Routing) {
        self.routing = routing;
    }
}

impl SiteAdapters for AdapterStack {
    fn delta(&self, sess: &mut Session<'_>, site: Site, x: Var, dir: Direction) -> Result<Option<Var>> {
        let Some(adapter) = self.adapter(site) else { return Ok(None) };
        let out = match &self.routing {
            Routing::Fixed(s) => {
                let lang = match s.get(site.side, site.layer) {
                    Some(Indexing::SourceIndexed) => dir.src,
                    Some(Indexing::TargetIndexed) => dir.tgt,
                    None => return Err(Error::Config(format!("index strategy has no entry for {site}"))),
                };
                adapter.forward(sess, x, lang)?
            }
            Routing::WeightLearning(wl) => {
                let logits = wl
                    .logit_param(site.side, site.layer)
                    .ok_or_else(|| Error::Config(format!("no weight-learning logits for {site}")))?;
                adapter.weighted_forward(sess, x, dir, logits)?
            }
        };
        Ok(Some(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lslo::ResourceType;
    use crate::model::{enumerate_sites, Side, SiteKind};

    fn cfg() -> ModelConfig {
        ModelConfig { num_layers: 4, d_model: 64, num_heads: 4, d_ffn: 128, vocab_size: 50, max_len: 16 }
    }

    fn langs() -> Vec<LanguageSpec> {
        vec![
            LanguageSpec::new("aa", ResourceType::High, 1000),
            LanguageSpec::new("bb", ResourceType::Medium, 100),
            LanguageSpec::new("cc", ResourceType::VeryLow, 10),
        ]
    }

    fn stack(placement: Placement, store: &mut ParamStore) -> AdapterStack {
        let c = cfg();
        build_adapter_stack(
            &c,
            &enumerate_sites(&c),
            &langs(),
            &"2;2;8".parse().unwrap(),
            placement,
            Routing::Fixed(IndexStrategy::by_side(c.num_layers)),
            1,
            store,
        )
        .unwrap()
    }

    #[test]
    fn placement_site_counts() {
        let mut store = ParamStore::new();
        assert_eq!(stack(Placement::All, &mut store).adapters().len(), 52);
        let mut store = ParamStore::new();
        assert_eq!(stack(Placement::OnlyFc, &mut store).adapters().len(), 16);
        let mut store = ParamStore::new();
        assert_eq!(stack(Placement::OnlyAttn, &mut store).adapters().len(), 36);
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(trainable_param_count(&[(16, 16)], &[2, 2, 2]), 192);
        assert_eq!(trainable_param_count(&[(16, 16)], &[]), 0);
        let mut store = ParamStore::new();
        let s = stack(Placement::OnlyFc, &mut store);
        assert_eq!(s.trainable_param_count(), store.element_count(&s.factor_ids()));
    }

    #[test]
    fn b_starts_at_zero() {
        let mut store = ParamStore::new();
        let s = stack(Placement::All, &mut store);
        for a in s.adapters() {
            for l in 0..3 {
                let f = a.factors(l).unwrap();
                assert_eq!(store.get(f.b).count_zeros(), store.get(f.b).len());
                assert!(store.get(f.a).data().iter().any(|&v| v != 0.0));
                assert_eq!(store.get(f.a).shape(), &[f.rank, a.k]);
                assert_eq!(store.get(f.b).shape(), &[a.d, f.rank]);
            }
        }
    }

    #[test]
    fn scalar_example_and_routing_error() {
        let c = ModelConfig { num_layers: 1, d_model: 1, num_heads: 1, d_ffn: 1, vocab_size: 3, max_len: 4 };
        let mut store = ParamStore::new();
        let site = Site::new(Side::Encoder, 0, SiteKind::Q).unwrap();
        let one = [LanguageSpec::new("aa", ResourceType::High, 1)];
        let s = build_adapter_stack(
            &c,
            &[site],
            &one,
            &RankPolicy::uniform(1),
            Placement::All,
            Routing::Fixed(IndexStrategy::by_side(1)),
            0,
            &mut store,
        )
        .unwrap();
        let f = s.adapters()[0].factors(0).unwrap().clone();
        store.set(f.a, Tensor::matrix(1, 1, vec![2.0]).unwrap()).unwrap();
        store.set(f.b, Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let mut sess = Session::new(&store);
        let x = sess.graph.constant(Tensor::matrix(1, 1, vec![5.0]).unwrap());
        let y = s.adapters()[0].forward_code(&mut sess, x, "aa").unwrap();
        assert_eq!(sess.graph.value(y).data(), &[30.0]);
        match s.adapters()[0].forward_code(&mut sess, x, "zz") {
            Err(Error::Routing { site, language }) => {
                assert_eq!(site, "encoder.0.q");
                assert_eq!(language, "zz");
            }
            other => panic!("expected routing error, got {other:?}"),
        }
    }
}
