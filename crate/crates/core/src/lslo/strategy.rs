use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Side;
use crate::numcore::{softmax, ParamId, ParamStore, Tensor};

/// Whether a layer's adapters follow the source or the target language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indexing {
    SourceIndexed,
    TargetIndexed,
}

impl Indexing {
    pub fn as_str(self) -> &'static str {
        match self {
            Indexing::SourceIndexed => "source",
            Indexing::TargetIndexed => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Indexing::SourceIndexed),
            "target" => Some(Indexing::TargetIndexed),
            _ => None,
        }
    }
}

/// Indexing choice per `(side, layer)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStrategy {
    layers: BTreeMap<(Side, usize), Indexing>,
}

impl IndexStrategy {
    pub fn uniform(num_layers: usize, encoder: Indexing, decoder: Indexing) -> Self {
        let mut layers = BTreeMap::new();
        for l in 0..num_layers {
            layers.insert((Side::Encoder, l), encoder);
            layers.insert((Side::Decoder, l), decoder);
        }
        Self { layers }
    }

    /// Encoder source-indexed, decoder target-indexed.
    pub fn by_side(num_layers: usize) -> Self {
        Self::uniform(num_layers, Indexing::SourceIndexed, Indexing::TargetIndexed)
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ((Side, usize), Indexing)>) -> Self {
        Self { layers: entries.into_iter().collect() }
    }

    pub fn get(&self, side: Side, layer: usize) -> Option<Indexing> {
        self.layers.get(&(side, layer)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = ((Side, usize), Indexing)> + '_ {
        self.layers.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Checks that every layer of both sides has an entry.
    pub fn covers(&self, num_layers: usize) -> Result<()> {
        for side in Side::ALL {
            for l in 0..num_layers {
                if self.get(side, l).is_none() {
                    return Err(Error::Config(format!("index strategy has no entry for {} layer {l}", side.as_str())));
                }
            }
        }
        Ok(())
    }

    /// `side,layer,indexing` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("side,layer,indexing\n");
        for ((side, layer), ix) in self.entries() {
            let _ = writeln!(out, "{},{layer},{}", side.as_str(), ix.as_str());
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line == "side,layer,indexing" {
                continue;
            }
            let bad = || Error::Format(format!("index strategy line {}: \"{line}\"", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let side = Side::parse(f[0]).ok_or_else(bad)?;
            let layer: usize = f[1].parse().map_err(|_| bad())?;
            let ix = Indexing::parse(f[2]).ok_or_else(bad)?;
            if layers.insert((side, layer), ix).is_some() {
                return Err(Error::Format(format!("index strategy lists {} layer {layer} twice", side.as_str())));
            }
        }
        Ok(Self { layers })
    }
}

/// Per-layer `(u_src, u_tgt)` logits shared by all sites of the layer.
#[derive(Clone, Debug)]
pub struct WeightLearningState {
    logits: BTreeMap<(Side, usize), ParamId>,
}

impl WeightLearningState {
    /// Registers one trainable logit pair per layer, initialized to zero.
    pub fn new(num_layers: usize, store: &mut ParamStore) -> Self {
        let mut logits = BTreeMap::new();
        for side in Side::ALL {
            for l in 0..num_layers {
                let id = store.insert(format!("wl.{}.{l}", side.as_str()), Tensor::vector(vec![0.0, 0.0]), true);
                logits.insert((side, l), id);
            }
        }
        Self { logits }
    }

    pub fn logit_param(&self, side: Side, layer: usize) -> Option<ParamId> {
        self.logits.get(&(side, layer)).copied()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.logits.values().copied().collect()
    }

    /// Raw `(u_src, u_tgt)` per layer.
    pub fn raw(&self, store: &ParamStore) -> BTreeMap<(Side, usize), (f64, f64)> {
        self.logits
            .iter()
            .map(|(&k, &id)| {
                let d = store.get(id).data();
                (k, (d[0], d[1]))
            })
            .collect()
    }

    /// Softmax-normalized `(w_src, w_tgt)` per layer.
    pub fn weights(&self, store: &ParamStore) -> BTreeMap<(Side, usize), (f64, f64)> {
        self.raw(store).into_iter().map(|(k, (s, t))| (k, pair_softmax(s, t))).collect()
    }

    /// `side,layer,w_src,w_tgt` rows.
    pub fn weights_csv(&self, store: &ParamStore) -> String {
        let mut out = String::from("side,layer,w_src,w_tgt\n");
        for ((side, layer), (ws, wt)) in self.weights(store) {
            let _ = writeln!(out, "{},{layer},{ws:.12},{wt:.12}", side.as_str());
        }
        out
    }
}

fn pair_softmax(u_src: f64, u_tgt: f64) -> (f64, f64) {
    let w = softmax(&[u_src, u_tgt]).expect("two finite logits");
    (w[0], w[1])
}

/// Picks the heavier branch per layer; exact ties go to the target language.
pub fn resolve_index_strategy(raw: &BTreeMap<(Side, usize), (f64, f64)>) -> IndexStrategy {
    IndexStrategy {
        layers: raw
            .iter()
            .map(|(&k, &(s, t))| {
                let (ws, wt) = pair_softmax(s, t);
                (k, if ws > wt { Indexing::SourceIndexed } else { Indexing::TargetIndexed })
            })
            .collect(),
    }
}
