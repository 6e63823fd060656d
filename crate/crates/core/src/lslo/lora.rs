use std::collections::HashMap;

use crate::error::Result;
use crate::model::{Direction, Site, SiteAdapters};
use crate::numcore::{ParamId, Session, Var};

/// Plain single-pair LoRA: `B·A·x`.
pub fn lora_forward(sess: &mut Session<'_>, x: Var, a: ParamId, b: ParamId) -> Result<Var> {
    let a = sess.param(a);
    let b = sess.param(b);
    let ax = sess.graph.matmul_nt(x, a)?;
    Ok(sess.graph.matmul_nt(ax, b)?)
}

/// One language-agnostic `(A, B)` pair per site, ignoring the direction.
#[derive(Clone, Debug, Default)]
pub struct LoraStack {
    pairs: HashMap<Site, (ParamId, ParamId)>,
}

impl LoraStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site: Site, a: ParamId, b: ParamId) {
        self.pairs.insert(site, (a, b));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl SiteAdapters for LoraStack {
    fn delta(&self, sess: &mut Session<'_>, site: Site, x: Var, _dir: Direction) -> Result<Option<Var>> {
        match self.pairs.get(&site) {
            Some(&(a, b)) => lora_forward(sess, x, a, b).map(Some),
            None => Ok(None),
        }
    }
}
