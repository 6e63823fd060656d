//! Unstructured L1 pruning of adapter `B` matrices on a gradual schedule.
//!
//! Masks are recomputed at the start of every epoch from the current
//! magnitudes of `B ⊙ mask`. Entries masked earlier read as zero and win
//! ties, so with a nondecreasing ratio the zero set only grows.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lslo::{AdapterStack, ResourceType};
use crate::numcore::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    /// Target ratio `P`.
    pub target: f64,
    /// Last epoch without pruning, `E`.
    pub start: usize,
    /// Ramp length in epochs, `k`.
    pub duration: usize,
    /// Total epochs, `T`.
    pub total: usize,
}

impl PruneSchedule {
    pub fn new(target: f64, start: usize, duration: usize, total: usize) -> Result<Self> {
        let s = Self { target, start, duration, total };
        s.validate()?;
        Ok(s)
    }

    /// `E = 2, k = 8, T = 15` at the given target.
    pub fn standard(target: f64) -> Self {
        Self { target, start: 2, duration: 8, total: 15 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target) {
            return Err(Error::Config(format!("pruning target {} outside [0, 1)", self.target)));
        }
        if self.start == 0 || self.duration == 0 || self.total == 0 {
            return Err(Error::Config("pruning start, duration and total epochs must be positive".into()));
        }
        if self.start + self.duration > self.total {
            return Err(Error::Config(format!(
                "pruning ramp ends at epoch {} but training stops at {}; no epochs left to recover",
                self.start + self.duration,
                self.total
            )));
        }
        Ok(())
    }

    pub fn ratio(&self, epoch: usize) -> Result<f64> {
        schedule_ratio(epoch, self)
    }
}

/// Pruning ratio for 1-based `epoch`: zero through `E`, a cubic ramp to `P`
/// over the next `k` epochs, then `P`.
pub fn schedule_ratio(epoch: usize, sched: &PruneSchedule) -> Result<f64> {
    if epoch == 0 || epoch > sched.total {
        return Err(Error::Argument(format!("epoch {epoch} outside 1..={}", sched.total)));
    }
    let p = sched.target;
    Ok(if epoch <= sched.start {
        0.0
    } else if epoch <= sched.start + sched.duration {
        let remaining = 1.0 - (epoch - sched.start) as f64 / sched.duration as f64;
        p - p * remaining.powi(3)
    } else {
        p
    })
}

/// A `B` matrix: adapter index and language index within an [`AdapterStack`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BRef {
    pub adapter: usize,
    pub lang: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Each `B` is pruned on its own.
    PerMatrix,
    /// All languages' `B`s of one (side, layer) are ranked jointly.
    LayerwiseCrossLanguage,
    /// All of one language's `B`s across the model are ranked jointly.
    LanguageSpecificGlobal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneGroup {
    pub id: String,
    pub members: Vec<BRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunePlan {
    pub grouping: Grouping,
    pub groups: Vec<PruneGroup>,
}

impl PrunePlan {
    /// Groups the stack's `B` matrices. With a scope, languages of other
    /// resource types are left out of every group.
    pub fn build(stack: &AdapterStack, grouping: Grouping, scope: Option<&BTreeSet<ResourceType>>) -> Self {
        let in_scope = |lang: usize| scope.is_none_or(|s| s.contains(&stack.languages()[lang].resource_type));
        let mut groups: Vec<PruneGroup> = Vec::new();
        let mut push = |id: String, member: BRef| match groups.iter_mut().find(|g| g.id == id) {
            Some(g) => g.members.push(member),
            None => groups.push(PruneGroup { id, members: vec![member] }),
        };
        for (ai, adapter) in stack.adapters().iter().enumerate() {
            for (li, lang) in stack.languages().iter().enumerate() {
                if !in_scope(li) {
                    continue;
                }
                let site = adapter.site;
                let id = match grouping {
                    Grouping::PerMatrix => format!("{site}.{}", lang.code),
                    Grouping::LayerwiseCrossLanguage => format!("{}.{}", site.side.as_str(), site.layer),
                    Grouping::LanguageSpecificGlobal => lang.code.clone(),
                };
                push(id, BRef { adapter: ai, lang: li });
            }
        }
        Self { grouping, groups }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for g in &self.groups {
            for m in &g.members {
                if !seen.insert(*m) {
                    return Err(Error::Plan(format!(
                        "matrix (adapter {}, language {}) appears in more than one group; second in {}",
                        m.adapter, m.lang, g.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Number of entries pruned out of `total` at `ratio`.
pub fn pruned_count(ratio: f64, total: usize) -> usize {
    (ratio * total as f64).floor() as usize
}

/// Recomputes the masks of one group so that exactly
/// `floor(ratio · N)` of its `N` entries are masked: those of smallest
/// magnitude across all members jointly. Returns the number masked.
pub fn l1_prune_group(stack: &mut AdapterStack, store: &ParamStore, group: &PruneGroup, ratio: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("pruning ratio {ratio} outside [0, 1]")));
    }
    // (magnitude, not previously masked, member, position)
    let mut entries: Vec<(f64, bool, usize, usize)> = Vec::new();
    for (mi, m) in group.members.iter().enumerate() {
        let f = stack.adapters()[m.adapter]
            .factors(m.lang)
            .ok_or_else(|| Error::Plan(format!("group {} names a missing matrix", group.id)))?;
        let b = store.get(f.b).data();
        for (pos, (&v, &mask)) in b.iter().zip(f.mask.data()).enumerate() {
            let masked = mask == 0.0;
            let mag = if masked { 0.0 } else { v.abs() };
            entries.push((mag, !masked, mi, pos));
        }
    }
    let n_prune = pruned_count(ratio, entries.len());
    if n_prune > 0 && n_prune < entries.len() {
        entries.select_nth_unstable_by(n_prune - 1, |a, b| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
        });
    }
    for m in &group.members {
        let f = stack.adapters_mut()[m.adapter].factors_mut(m.lang).expect("checked above");
        f.mask.data_mut().fill(1.0);
    }
    for &(_, _, mi, pos) in &entries[..n_prune] {
        let m = group.members[mi];
        stack.adapters_mut()[m.adapter].factors_mut(m.lang).expect("checked above").mask.data_mut()[pos] = 0.0;
    }
    Ok(n_prune)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneLogEntry {
    pub epoch: usize,
    pub group_id: String,
    pub target_ratio: f64,
    pub zeroed: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub entries: Vec<PruneLogEntry>,
}

impl PruneLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,group_id,target_ratio,zeroed,total\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.group_id, e.target_ratio, e.zeroed, e.total);
        }
        out
    }
}

/// Epoch-start pruning hook.
#[derive(Clone, Debug)]
pub struct GradualPruner {
    pub schedule: PruneSchedule,
    pub plan: PrunePlan,
}

impl GradualPruner {
    pub fn new(schedule: PruneSchedule, plan: PrunePlan) -> Result<Self> {
        schedule.validate()?;
        plan.validate()?;
        Ok(Self { schedule, plan })
    }

    /// Re-masks every group at the epoch's ratio and zeroes masked entries.
    pub fn on_epoch_start(
        &self,
        epoch: usize,
        stack: &mut AdapterStack,
        store: &mut ParamStore,
    ) -> Result<Vec<PruneLogEntry>> {
        let ratio = self.schedule.ratio(epoch)?;
        let mut log = Vec::with_capacity(self.plan.groups.len());
        for g in &self.plan.groups {
            let zeroed = l1_prune_group(stack, store, g, ratio)?;
            let total =
                g.members.iter().map(|m| stack.adapters()[m.adapter].factors(m.lang).map_or(0, |f| f.mask.len())).sum();
            log.push(PruneLogEntry { epoch, group_id: g.id.clone(), target_ratio: ratio, zeroed, total });
        }
        stack.apply_masks(store);
        Ok(log)
    }
}

/// Drives `train_epoch` through the schedule, pruning before each epoch.
pub fn run_schedule<F>(
    stack: &mut AdapterStack,
    store: &mut ParamStore,
    schedule: &PruneSchedule,
    plan: &PrunePlan,
    mut train_epoch: F,
) -> Result<PruneLog>
where
    F: FnMut(usize, &mut AdapterStack, &mut ParamStore) -> Result<()>,
{
    let pruner = GradualPruner::new(*schedule, plan.clone())?;
    let mut log = PruneLog::default();
    for epoch in 1..=schedule.total {
        log.entries.extend(pruner.on_epoch_start(epoch, stack, store)?);
        train_epoch(epoch, stack, store)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
