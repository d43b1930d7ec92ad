//! Step planning and the deep-feature cache.
//!
//! Step `s` of a run is a Full step (recompute every block and refresh the
//! cache) iff `s % interval == 0`; all other steps are Cached and reuse the
//! stored features. The store keeps one entry per guidance branch so the two
//! halves of the batch can be moved between tiers independently.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DeepFeatures, UNetConfig};
use crate::error::{Error, Result};
use crate::ledger::Tier;
use crate::swap::{Slot, TierSwapper};
use crate::tensor::Tensor5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePolicy {
    pub interval: usize,
    pub cache_depth: usize,
}

impl CachePolicy {
    pub fn new(interval: usize, cache_depth: usize) -> Result<CachePolicy> {
        if interval == 0 {
            return Err(Error::InvalidArgument("cache interval must be ≥ 1".into()));
        }
        Ok(CachePolicy {
            interval,
            cache_depth,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Full,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub kinds: Vec<StepKind>,
}

impl StepPlan {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn full_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k == StepKind::Full).count()
    }

    pub fn cached_count(&self) -> usize {
        self.len() - self.full_count()
    }

    /// True if step `s` is the last one that reads the entries stored by
    /// the most recent Full step (or is itself a Full step with no readers).
    pub fn is_last_use(&self, s: usize) -> bool {
        self.kinds.get(s + 1).is_none_or(|k| *k == StepKind::Full)
    }
}

pub fn plan_steps(total_steps: usize, policy: &CachePolicy) -> Result<StepPlan> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument(
            "a run needs at least one step".into(),
        ));
    }
    if policy.interval == 0 {
        return Err(Error::InvalidArgument("cache interval must be ≥ 1".into()));
    }
    let kinds = (0..total_steps)
        .map(|s| {
            if s % policy.interval == 0 {
                StepKind::Full
            } else {
                StepKind::Cached
            }
        })
        .collect();
    Ok(StepPlan { kinds })
}

/// Bytes held by a full cache (both branches) for `frames` frames of an
/// `h × w` latent.
pub fn cache_bytes(cfg: &UNetConfig, frames: usize, h: usize, w: usize) -> Result<u64> {
    Ok(2 * cfg.deep_shape(frames, h, w)?.bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Uncond,
    Cond,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Uncond, Branch::Cond];

    pub fn index(self) -> usize {
        match self {
            Branch::Uncond => 0,
            Branch::Cond => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Branch> {
        Branch::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Cache(format!("no branch for batch index {i}")))
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Uncond => "uncond",
            Branch::Cond => "cond",
        })
    }
}

pub struct CacheEntry {
    pub branch: Branch,
    pub origin_step: usize,
    pub origin_t: usize,
    pub slot: Slot,
}

impl CacheEntry {
    pub fn tier(&self) -> Option<Tier> {
        self.slot.tier()
    }
}

/// Deep-feature store, one entry per branch. Single-driver: not meant to be
/// shared between threads.
pub struct CacheStore {
    entries: [Option<CacheEntry>; 2],
    swapper: Option<Arc<TierSwapper>>,
}

impl CacheStore {
    pub fn new(swapper: Option<Arc<TierSwapper>>) -> CacheStore {
        CacheStore {
            entries: [None, None],
            swapper,
        }
    }

    pub fn swapper(&self) -> Option<&Arc<TierSwapper>> {
        self.swapper.as_ref()
    }

    fn settle_slot(&self, slot: &mut Slot) -> Result<()> {
        match &self.swapper {
            Some(sw) => sw.settle(slot),
            None if slot.is_moving() => {
                Err(Error::Cache("entry in flight without a swapper".into()))
            }
            None => Ok(()),
        }
    }

    /// Replace the entry for `entry.branch`. The old entry is freed.
    pub fn store_entry(&mut self, entry: CacheEntry) -> Result<()> {
        let i = entry.branch.index();
        if let Some(mut old) = self.entries[i].take() {
            self.settle_slot(&mut old.slot)?;
        }
        self.entries[i] = Some(entry);
        Ok(())
    }

    /// Store the slabs of a full pass, one per branch.
    pub fn store(&mut self, deep: DeepFeatures, step: usize) -> Result<()> {
        let DeepFeatures { slabs, origin_t } = deep;
        for (i, slab) in slabs.into_iter().enumerate() {
            self.store_entry(CacheEntry {
                branch: Branch::from_index(i)?,
                origin_step: step,
                origin_t,
                slot: Slot::Resident(slab),
            })?;
        }
        Ok(())
    }

    pub fn entry(&self, branch: Branch) -> Option<&CacheEntry> {
        self.entries[branch.index()].as_ref()
    }

    pub fn live_entries(&self) -> usize {
        self.entries.iter().flatten().count()
    }

    /// Make `branch` resident on the fast tier, waiting on (or issuing) a
    /// transfer if needed.
    pub fn ensure_fast(&mut self, branch: Branch, step: usize) -> Result<()> {
        let mut slot = match self.entries[branch.index()].as_mut() {
            Some(e) => std::mem::replace(&mut e.slot, Slot::Empty),
            None => return Err(Error::Cache(format!("fetch of {branch} before any store"))),
        };
        let res = (|| {
            self.settle_slot(&mut slot)?;
            if slot.tier() == Some(Tier::Slow) {
                let sw = self.swapper.as_ref().expect("slow entries imply a swapper");
                let ticket = sw.prefetch(&mut slot, step, step)?;
                sw.await_ready(&ticket)?;
                sw.settle(&mut slot)?;
            }
            Ok(())
        })();
        self.entries[branch.index()]
            .as_mut()
            .expect("checked above")
            .slot = slot;
        res
    }

    /// The stored features for `branch`, made fast-resident first.
    pub fn fetch(&mut self, branch: Branch, step: usize) -> Result<&Tensor5> {
        self.ensure_fast(branch, step)?;
        self.resident(branch)
    }

    fn resident(&self, branch: Branch) -> Result<&Tensor5> {
        self.entry(branch)
            .and_then(|e| e.slot.tensor())
            .ok_or_else(|| Error::Cache(format!("{branch} entry not resident")))
    }

    /// Fast-resident features for every stored branch, in branch order.
    pub fn fetch_all(&mut self, step: usize) -> Result<Vec<&Tensor5>> {
        let present: Vec<Branch> = Branch::ALL
            .into_iter()
            .filter(|b| self.entry(*b).is_some())
            .collect();
        if present.is_empty() {
            return Err(Error::Cache("fetch before any store".into()));
        }
        for b in &present {
            self.ensure_fast(*b, step)?;
        }
        present.iter().map(|b| self.resident(*b)).collect()
    }

    /// Start moving every fast-resident entry to the slow tier.
    pub fn evict_all(&mut self, step: usize) -> Result<()> {
        let Some(sw) = self.swapper.clone() else {
            return Ok(());
        };
        for e in self.entries.iter_mut().flatten() {
            if e.slot.tier() == Some(Tier::Fast) && !e.slot.is_moving() {
                sw.evict(&mut e.slot, Some(step))?;
            }
        }
        Ok(())
    }

    /// Wait for every in-flight transfer to land.
    pub fn settle_all(&mut self) -> Result<()> {
        for i in 0..self.entries.len() {
            if let Some(mut e) = self.entries[i].take() {
                let r = self.settle_slot(&mut e.slot);
                self.entries[i] = Some(e);
                r?;
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) -> Result<()> {
        self.settle_all()?;
        self.entries = [None, None];
        Ok(())
    }
}

impl Drop for CacheStore {
    fn drop(&mut self) {
        let _ = self.settle_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{MemLedger, StageTag};
    use crate::swap::TransferEngine;
    use crate::tensor::Shape5;

    fn deep(l: &crate::ledger::Ledger, seed: u64) -> DeepFeatures {
        let s = Shape5::new(1, 2, 3, 4, 4).unwrap();
        DeepFeatures {
            slabs: vec![
                Tensor5::randn(l, s, seed).unwrap(),
                Tensor5::randn(l, s, seed + 1).unwrap(),
            ],
            origin_t: 9,
        }
    }

    #[test]
    fn plan_enumerations() {
        let p = plan_steps(8, &CachePolicy::new(2, 0).unwrap()).unwrap();
        let full: Vec<usize> = (0..8).filter(|s| p.kinds[*s] == StepKind::Full).collect();
        assert_eq!(full, vec![0, 2, 4, 6]);
        let p = plan_steps(8, &CachePolicy::new(3, 0).unwrap()).unwrap();
        let cached: Vec<usize> = (0..8).filter(|s| p.kinds[*s] == StepKind::Cached).collect();
        assert_eq!(cached, vec![1, 2, 4, 5, 7]);
        assert_eq!(
            plan_steps(5, &CachePolicy::new(1, 0).unwrap())
                .unwrap()
                .cached_count(),
            0
        );
        assert!(plan_steps(0, &CachePolicy::new(1, 0).unwrap()).is_err());
        assert!(CachePolicy::new(0, 0).is_err());
    }

    #[test]
    fn last_use() {
        let p = plan_steps(7, &CachePolicy::new(3, 0).unwrap()).unwrap();
        let last: Vec<usize> = (0..7).filter(|s| p.is_last_use(*s)).collect();
        assert_eq!(last, vec![2, 5, 6]);
    }

    #[test]
    fn cache_bytes_geometry() {
        let cfg = UNetConfig::default();
        // m = 0: up0 takes 16 channels at full latent resolution
        assert_eq!(
            cache_bytes(&cfg, 8, 16, 16).unwrap(),
            2 * 8 * 16 * 16 * 16 * 4
        );
        let deepest = UNetConfig {
            cache_depth: 2,
            ..UNetConfig::default()
        };
        assert_eq!(
            cache_bytes(&deepest, 8, 16, 16).unwrap(),
            2 * 8 * 32 * 4 * 4 * 4
        );
    }

    #[test]
    fn fetch_before_store_fails() {
        let mut c = CacheStore::new(None);
        assert!(c.fetch(Branch::Uncond, 0).is_err());
        assert!(c.fetch_all(0).is_err());
    }

    #[test]
    fn store_then_fetch_roundtrip() {
        let l = MemLedger::real();
        let d = deep(&l, 1);
        let copy = d.slabs[1].duplicate().unwrap();
        let mut c = CacheStore::new(None);
        c.store(d, 0).unwrap();
        assert!(c.fetch(Branch::Cond, 1).unwrap().bit_eq(&copy));
        assert_eq!(c.entry(Branch::Cond).unwrap().origin_t, 9);
    }

    #[test]
    fn second_store_replaces() {
        let l = MemLedger::real();
        let mut c = CacheStore::new(None);
        c.store(deep(&l, 1), 0).unwrap();
        let live = l.live_count();
        let second = deep(&l, 10);
        let copy = second.slabs[0].duplicate().unwrap();
        c.store(second, 2).unwrap();
        assert_eq!(l.live_count(), live + 1);
        assert_eq!(c.live_entries(), 2);
        assert!(c.fetch(Branch::Uncond, 3).unwrap().bit_eq(&copy));
        assert_eq!(c.entry(Branch::Uncond).unwrap().origin_step, 2);
    }

    #[test]
    fn evict_and_fetch_is_lossless() {
        for engine in [TransferEngine::Synchronous, TransferEngine::AsyncOverlapped] {
            let l = MemLedger::real();
            l.enter_stage(StageTag::Denoise);
            let sw = Arc::new(TierSwapper::new(engine, &l).unwrap());
            let mut c = CacheStore::new(Some(sw));
            let d = deep(&l, 4);
            let a = d.slabs[0].duplicate().unwrap();
            let bytes = d.bytes();
            c.store(d, 0).unwrap();
            let fast_before = l.occupancy(Tier::Fast);
            c.evict_all(0).unwrap();
            c.settle_all().unwrap();
            assert_eq!(l.occupancy(Tier::Fast), fast_before - bytes);
            assert_eq!(c.entry(Branch::Cond).unwrap().tier(), Some(Tier::Slow));
            let got = c.fetch_all(1).unwrap();
            assert!(got[0].bit_eq(&a));
            assert_eq!(c.entry(Branch::Uncond).unwrap().tier(), Some(Tier::Fast));
            assert!(l.violations().is_empty());
        }
    }
}
