//! Per-scale cache of window projections.
//!
//! Every scale carries a revision counter. A cached projection is served
//! only while its stamp equals the scale's current revision; invalidation
//! bumps the revision. Stale bundles are never returned.

use std::collections::HashMap;
use std::sync::Arc;

use crate::counter::OpCounter;
use crate::tensor::{LinearWeights, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Key,
    Value,
}

/// The parameter set a projection belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pathway {
    /// Local / top-down attention; projected with the source scale's weights.
    TopDown,
    /// Bottom-up attention into coarse scale `target`.
    BottomUp { target: usize },
}

/// Identifies one window (or coarse token group) of one scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SlotKey {
    pub pathway: Pathway,
    pub scale: usize,
    /// Batch element and window/group, flattened as `batch * count + index`.
    pub slot: usize,
}

/// Projections of one slot, stamped with the revision they were computed from.
#[derive(Clone, Debug, Default)]
pub struct QkvBundle {
    pub revision: u64,
    pub q: Option<Arc<Matrix>>,
    pub k: Option<Arc<Matrix>>,
    pub v: Option<Arc<Matrix>>,
}

impl QkvBundle {
    fn role(&mut self, role: Role) -> &mut Option<Arc<Matrix>> {
        match role {
            Role::Query => &mut self.q,
            Role::Key => &mut self.k,
            Role::Value => &mut self.v,
        }
    }
}

/// Where in the block a scale's features were modified.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvalidationSite {
    /// Self-attention at the coarsest active scale.
    CoarsestSelfAttention,
    /// Dense cross-attention of the top-down pass.
    TopDownCrossAttention,
    /// Parent-window cross-attention of the bottom-up pass.
    BottomUpCrossAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheEvent {
    pub scale: usize,
    pub site: InvalidationSite,
}

/// One lookup, in call order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheAccess {
    pub key: SlotKey,
    pub role: Role,
    pub revision: u64,
    pub hit: bool,
}

#[derive(Clone, Debug, Default)]
pub struct QkvCache {
    revisions: Vec<u64>,
    bundles: HashMap<SlotKey, QkvBundle>,
    hits: u64,
    misses: u64,
    events: Vec<CacheEvent>,
    accesses: Vec<CacheAccess>,
}

impl QkvCache {
    pub fn new(levels: usize) -> Self {
        Self { revisions: vec![0; levels], ..Self::default() }
    }

    /// Drop everything, including statistics and the event log.
    pub fn reset(&mut self, levels: usize) {
        self.revisions = vec![0; levels];
        self.bundles.clear();
        self.hits = 0;
        self.misses = 0;
        self.events.clear();
        self.accesses.clear();
    }

    pub fn revision(&self, scale: usize) -> u64 {
        self.revisions[scale]
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn events(&self) -> &[CacheEvent] {
        &self.events
    }

    pub fn accesses(&self) -> &[CacheAccess] {
        &self.accesses
    }

    /// Largest number of projections computed for one (slot, role) at one
    /// revision, over accesses matching `filter`.
    pub fn max_projections_per_revision(&self, filter: impl Fn(&CacheAccess) -> bool) -> u64 {
        let mut counts: HashMap<(SlotKey, Role, u64), u64> = HashMap::new();
        for a in self.accesses.iter().filter(|a| !a.hit && filter(a)) {
            *counts.entry((a.key, a.role, a.revision)).or_default() += 1;
        }
        counts.into_values().max().unwrap_or(0)
    }

    /// Return the `role` projection of `key`, computing it from `tokens` with
    /// `weights` only when no bundle of the current revision holds it.
    ///
    /// `tokens` must yield the slot's features at the scale's current revision.
    pub fn get_or_project(
        &mut self,
        key: SlotKey,
        role: Role,
        tokens: impl FnOnce() -> Matrix,
        weights: &LinearWeights,
        counter: &mut OpCounter,
    ) -> Arc<Matrix> {
        let current = self.revisions[key.scale];
        let bundle = self.bundles.entry(key).or_default();
        if bundle.revision != current {
            *bundle = QkvBundle { revision: current, ..QkvBundle::default() };
        }
        let slot = bundle.role(role);
        self.accesses.push(CacheAccess { key, role, revision: current, hit: slot.is_some() });
        if let Some(m) = slot {
            self.hits += 1;
            counter.record_cache_hit();
            return Arc::clone(m);
        }
        self.misses += 1;
        counter.record_cache_miss();
        let x = tokens();
        counter.record_projection(x.rows(), weights.in_dim(), weights.out_dim());
        let m = Arc::new(weights.forward(&x));
        *slot = Some(Arc::clone(&m));
        m
    }

    /// Mark every bundle of `scale` stale.
    pub fn invalidate(&mut self, scale: usize, site: InvalidationSite) {
        self.revisions[scale] += 1;
        self.events.push(CacheEvent { scale, site });
    }
}

/// Fetch a projection through the cache when present, otherwise compute it
/// fresh. Both paths run the same projection arithmetic.
pub(crate) fn acquire(
    cache: Option<&mut QkvCache>,
    key: SlotKey,
    role: Role,
    tokens: impl FnOnce() -> Matrix,
    weights: &LinearWeights,
    counter: &mut OpCounter,
) -> Arc<Matrix> {
    match cache {
        Some(c) => c.get_or_project(key, role, tokens, weights, counter),
        None => {
            let x = tokens();
            counter.record_projection(x.rows(), weights.in_dim(), weights.out_dim());
            Arc::new(weights.forward(&x))
        }
    }
}
