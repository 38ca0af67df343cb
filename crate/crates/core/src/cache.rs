//! Memory-budget planning and per-layer ARC expert caches.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::gatesim::GateWeights;
use crate::predict::{cross_layer_predict, PrefetchPolicy};
use crate::trace::{GateTrace, TraceError};

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("memory budget {budget} B is below the dense footprint {dense} B")]
    BudgetTooSmall { budget: u64, dense: u64 },
    #[error("hit rate is undefined without accesses")]
    NoAccesses,
    #[error("cache bit-width {0} has no configured expert size")]
    UnknownBits(u8),
    #[error("writing cache log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePlan {
    pub memory_budget: u64,
    pub cache_total: u64,
    pub per_layer_capacity: Vec<usize>,
    pub cached_bits: u8,
}

impl CachePlan {
    /// No expert slots at all.
    pub fn empty(num_layers: usize, cached_bits: u8) -> Self {
        Self {
            memory_budget: 0,
            cache_total: 0,
            per_layer_capacity: vec![0; num_layers],
            cached_bits,
        }
    }

    pub fn slots_used(&self) -> u64 {
        self.per_layer_capacity.iter().map(|&c| c as u64).sum()
    }

    /// Bytes held by expert slots plus the dense footprint.
    pub fn footprint(&self, cfg: &ModelConfig) -> u64 {
        self.slots_used() * cfg.expert_bytes_at(self.cached_bits) + cfg.dense_bytes
    }
}

fn cache_total(cfg: &ModelConfig, memory_budget: u64, cached_bits: u8) -> Result<u64, CacheError> {
    if memory_budget < cfg.dense_bytes {
        return Err(CacheError::BudgetTooSmall {
            budget: memory_budget,
            dense: cfg.dense_bytes,
        });
    }
    let slot = *cfg.expert_bytes.get(&cached_bits).ok_or(CacheError::UnknownBits(cached_bits))?;
    Ok((memory_budget - cfg.dense_bytes) / slot)
}

/// Splits `slots` evenly over `layers` (capped at `max` each), handing the
/// floor remainder to the first layers.
fn spread(slots: u64, layers: usize, max: usize) -> Vec<usize> {
    if layers == 0 {
        return Vec::new();
    }
    let base = slots / layers as u64;
    let extra = (slots % layers as u64) as usize;
    (0..layers)
        .map(|i| {
            let c = base + u64::from(i < extra);
            c.min(max as u64) as usize
        })
        .collect()
}

/// Shallow-favoring plan: layers `0..L` are filled to `num_experts` in order,
/// then whatever is left is split evenly over the deep layers.
pub fn plan_allocation(cfg: &ModelConfig, memory_budget: u64, cached_bits: u8) -> Result<CachePlan, CacheError> {
    let total = cache_total(cfg, memory_budget, cached_bits)?;
    let e = cfg.num_experts;
    let shallow = cfg.shallow_boundary.min(cfg.num_layers);
    let mut caps = Vec::with_capacity(cfg.num_layers);
    let mut left = total;
    for _ in 0..shallow {
        let c = left.min(e as u64);
        caps.push(c as usize);
        left -= c;
    }
    caps.extend(spread(left, cfg.num_layers - shallow, e));
    Ok(CachePlan {
        memory_budget,
        cache_total: total,
        per_layer_capacity: caps,
        cached_bits,
    })
}

/// Same slot count spread evenly over all layers.
pub fn uniform_plan(cfg: &ModelConfig, memory_budget: u64, cached_bits: u8) -> Result<CachePlan, CacheError> {
    let total = cache_total(cfg, memory_budget, cached_bits)?;
    Ok(CachePlan {
        memory_budget,
        cache_total: total,
        per_layer_capacity: spread(total, cfg.num_layers, cfg.num_experts),
        cached_bits,
    })
}

/// Smallest memory budget that yields `slots` cache slots at `cached_bits`.
pub fn budget_for_slots(cfg: &ModelConfig, slots: u64, cached_bits: u8) -> u64 {
    cfg.dense_bytes + slots * cfg.expert_bytes_at(cached_bits)
}

/// Shallow boundary from per-layer prefetch recall: the first layer whose
/// recall reaches 90% of the deep plateau (mean recall over the deeper half).
/// Layers without a measurement count as below threshold.
pub fn suggest_boundary(per_layer_recall: &[Option<f64>]) -> usize {
    let n = per_layer_recall.len();
    let deep: Vec<f64> = per_layer_recall[n / 2..].iter().flatten().copied().collect();
    if deep.is_empty() {
        return 0;
    }
    let plateau = deep.iter().sum::<f64>() / deep.len() as f64;
    per_layer_recall
        .iter()
        .position(|r| r.is_some_and(|r| r >= 0.9 * plateau))
        .unwrap_or(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    Hit,
    Miss,
}

const NIL: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    T1,
    T2,
    B1,
    B2,
    Absent,
}

impl Slot {
    fn idx(self) -> usize {
        match self {
            Slot::T1 => 0,
            Slot::T2 => 1,
            Slot::B1 => 2,
            Slot::B2 => 3,
            Slot::Absent => unreachable!("absent keys are in no list"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ends {
    lru: usize,
    mru: usize,
    len: usize,
}

const EMPTY: Ends = Ends {
    lru: NIL,
    mru: NIL,
    len: 0,
};

/// ARC over keys `0..universe`. The four lists share intrusive links
/// indexed by key, so every operation is O(1).
#[derive(Debug, Clone)]
pub struct ArcCache {
    capacity: usize,
    p: f64,
    slot: Vec<Slot>,
    prev: Vec<usize>,
    next: Vec<usize>,
    lists: [Ends; 4],
}

impl ArcCache {
    pub fn new(capacity: usize, universe: usize) -> Self {
        Self {
            capacity,
            p: 0.0,
            slot: vec![Slot::Absent; universe],
            prev: vec![NIL; universe],
            next: vec![NIL; universe],
            lists: [EMPTY; 4],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Adaptation target for the recency side.
    pub fn target(&self) -> f64 {
        self.p
    }

    pub fn contains(&self, key: usize) -> bool {
        matches!(self.slot[key], Slot::T1 | Slot::T2)
    }

    pub fn resident_len(&self) -> usize {
        self.len(Slot::T1) + self.len(Slot::T2)
    }

    /// Lengths of T1, T2, B1, B2.
    pub fn list_lens(&self) -> [usize; 4] {
        [self.lists[0].len, self.lists[1].len, self.lists[2].len, self.lists[3].len]
    }

    /// Keys of one list from LRU to MRU. 0..4 = T1, T2, B1, B2.
    pub fn list(&self, which: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.lists[which].len);
        let mut k = self.lists[which].lru;
        while k != NIL {
            out.push(k);
            k = self.next[k];
        }
        out
    }

    pub fn resident(&self) -> Vec<usize> {
        let mut r = self.list(0);
        r.extend(self.list(1));
        r.sort_unstable();
        r
    }

    fn len(&self, s: Slot) -> usize {
        self.lists[s.idx()].len
    }

    fn unlink(&mut self, key: usize) {
        let s = self.slot[key];
        let (p, n) = (self.prev[key], self.next[key]);
        let ends = &mut self.lists[s.idx()];
        if p == NIL {
            ends.lru = n;
        } else {
            self.next[p] = n;
        }
        if n == NIL {
            ends.mru = p;
        } else {
            self.prev[n] = p;
        }
        ends.len -= 1;
        self.prev[key] = NIL;
        self.next[key] = NIL;
        self.slot[key] = Slot::Absent;
    }

    fn push_mru(&mut self, key: usize, s: Slot) {
        if self.slot[key] != Slot::Absent {
            self.unlink(key);
        }
        let ends = &mut self.lists[s.idx()];
        self.prev[key] = ends.mru;
        if ends.mru == NIL {
            ends.lru = key;
        } else {
            self.next[ends.mru] = key;
        }
        ends.mru = key;
        ends.len += 1;
        self.slot[key] = s;
    }

    fn lru(&self, s: Slot) -> usize {
        self.lists[s.idx()].lru
    }

    fn replace(&mut self, in_b2: bool) {
        let t1 = self.len(Slot::T1);
        let from_t1 = t1 >= 1 && ((t1 as f64) > self.p || (in_b2 && (t1 as f64) == self.p));
        if from_t1 || self.len(Slot::T2) == 0 {
            let v = self.lru(Slot::T1);
            self.push_mru(v, Slot::B1);
        } else {
            let v = self.lru(Slot::T2);
            self.push_mru(v, Slot::B2);
        }
    }

    /// One reference to `key`.
    pub fn access(&mut self, key: usize) -> Access {
        let c = self.capacity;
        if c == 0 {
            return Access::Miss;
        }
        match self.slot[key] {
            Slot::T1 | Slot::T2 => {
                self.push_mru(key, Slot::T2);
                Access::Hit
            }
            Slot::B1 => {
                let (b1, b2) = (self.len(Slot::B1) as f64, self.len(Slot::B2) as f64);
                let delta = if b1 >= b2 { 1.0 } else { b2 / b1 };
                self.p = (self.p + delta).min(c as f64);
                self.replace(false);
                self.push_mru(key, Slot::T2);
                Access::Miss
            }
            Slot::B2 => {
                let (b1, b2) = (self.len(Slot::B1) as f64, self.len(Slot::B2) as f64);
                let delta = if b2 >= b1 { 1.0 } else { b1 / b2 };
                self.p = (self.p - delta).max(0.0);
                self.replace(true);
                self.push_mru(key, Slot::T2);
                Access::Miss
            }
            Slot::Absent => {
                let l1 = self.len(Slot::T1) + self.len(Slot::B1);
                if l1 == c {
                    if self.len(Slot::T1) < c {
                        let v = self.lru(Slot::B1);
                        self.unlink(v);
                        self.replace(false);
                    } else {
                        let v = self.lru(Slot::T1);
                        self.unlink(v);
                    }
                } else {
                    let total = l1 + self.len(Slot::T2) + self.len(Slot::B2);
                    if total >= c {
                        if total == 2 * c {
                            let v = self.lru(Slot::B2);
                            self.unlink(v);
                        }
                        self.replace(false);
                    }
                }
                self.push_mru(key, Slot::T1);
                Access::Miss
            }
        }
    }

    /// Makes keys resident without counting accesses. Only valid while the
    /// cache has free room.
    pub fn fill(&mut self, keys: impl IntoIterator<Item = usize>) {
        for k in keys {
            if !self.contains(k) {
                assert!(self.resident_len() < self.capacity, "fill past capacity");
                self.push_mru(k, Slot::T1);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCounters {
    pub hits: u64,
    pub accesses: u64,
}

impl HitCounters {
    pub fn record(&mut self, hit: bool) {
        self.accesses += 1;
        self.hits += u64::from(hit);
    }

    pub fn merge(&mut self, other: HitCounters) {
        self.hits += other.hits;
        self.accesses += other.accesses;
    }

    pub fn hit_rate(&self) -> Result<f64, CacheError> {
        hit_rate(self)
    }
}

pub fn hit_rate(counters: &HitCounters) -> Result<f64, CacheError> {
    if counters.accesses == 0 {
        return Err(CacheError::NoAccesses);
    }
    Ok(counters.hits as f64 / counters.accesses as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEvent {
    pub step: usize,
    pub layer: usize,
    pub expert: usize,
    pub outcome: Access,
    pub resident: usize,
}

/// One ARC per layer, sized by a [`CachePlan`].
#[derive(Debug, Clone)]
pub struct ExpertCache {
    layers: Vec<ArcCache>,
    counters: HitCounters,
    step: usize,
    log: Option<Vec<CacheEvent>>,
}

impl ExpertCache {
    pub fn new(plan: &CachePlan, num_experts: usize) -> Self {
        Self {
            layers: plan
                .per_layer_capacity
                .iter()
                .map(|&c| ArcCache::new(c, num_experts))
                .collect(),
            counters: HitCounters::default(),
            step: 0,
            log: None,
        }
    }

    /// Like [`ExpertCache::new`], with layers that can hold every expert
    /// already fully resident.
    pub fn preloaded(plan: &CachePlan, num_experts: usize) -> Self {
        let mut cache = Self::new(plan, num_experts);
        for arc in &mut cache.layers {
            if arc.capacity() >= num_experts {
                arc.fill(0..num_experts);
            }
        }
        cache
    }

    pub fn with_event_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn layer(&self, layer: usize) -> &ArcCache {
        &self.layers[layer]
    }

    pub fn contains(&self, layer: usize, expert: usize) -> bool {
        self.layers[layer].contains(expert)
    }

    pub fn counters(&self) -> HitCounters {
        self.counters
    }

    /// Advances the step number stamped on logged events.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn arc_access(&mut self, layer: usize, expert: usize) -> Access {
        let out = self.layers[layer].access(expert);
        self.counters.record(out == Access::Hit);
        if let Some(log) = &mut self.log {
            log.push(CacheEvent {
                step: self.step,
                layer,
                expert,
                outcome: out,
                resident: self.layers[layer].resident_len(),
            });
        }
        out
    }

    /// Feeds the gate's choice for `layer` to its ARC in ascending expert order.
    pub fn update_after_layer(&mut self, layer: usize, chosen: &[usize]) -> Vec<Access> {
        let mut sorted = chosen.to_vec();
        sorted.sort_unstable();
        sorted.into_iter().map(|e| self.arc_access(layer, e)).collect()
    }

    pub fn events(&self) -> Option<&[CacheEvent]> {
        self.log.as_deref()
    }

    pub fn write_event_log(&self, path: &Path) -> Result<(), CacheError> {
        let io = |source| CacheError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for ev in self.log.iter().flatten() {
            let line = serde_json::to_string(ev).expect("cache events serialize");
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Timing-free replay: an access hits if the expert is cached or appears in
/// the cross-layer prefetch list predicted from the previous layer.
pub fn replay_hit_rate(
    trace: &GateTrace,
    cfg: &ModelConfig,
    plan: &CachePlan,
    prefetch: Option<(&GateWeights, &PrefetchPolicy)>,
) -> Result<HitCounters, TraceError> {
    let mut cache = ExpertCache::preloaded(plan, cfg.num_experts);
    let mut counters = HitCounters::default();
    for (step, token) in trace.by_token(cfg.num_layers)?.iter().enumerate() {
        cache.set_step(step);
        for (layer, rec) in token.iter().enumerate() {
            let list = match prefetch {
                Some((w, policy)) if layer > 0 => token[layer - 1]
                    .gate_in()
                    .map(|h| cross_layer_predict(h, w, layer, policy, cfg.top_k)),
                _ => None,
            };
            for &e in &rec.chosen {
                let hit = cache.contains(layer, e) || list.as_ref().is_some_and(|l| l.contains(e));
                counters.record(hit);
            }
            cache.update_after_layer(layer, &rec.chosen);
        }
    }
    Ok(counters)
}
