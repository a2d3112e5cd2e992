//! Locality and parallelism measurements over schedule traces, plus the
//! analytical speedup model.
//!
//! The cache is fully associative LRU with one slot per tensor region,
//! keyed by `(region class, owner id)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::optim::OptimizerPolicy;
use crate::trace::{RegionClass, ScheduleTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    capacity: usize,
}

impl CacheConfig {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("cache capacity must be at least 1 slot".into()));
        }
        Ok(CacheConfig { capacity })
    }

    /// Slots for one layer's parameter, gradient and (if the policy keeps
    /// any) history regions.
    pub fn per_layer(policy: &OptimizerPolicy) -> Self {
        CacheConfig { capacity: if policy.has_history() { 3 } else { 2 } }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassStats {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheReport {
    pub per_class: BTreeMap<RegionClass, ClassStats>,
}

impl CacheReport {
    pub fn stats(&self, class: RegionClass) -> ClassStats {
        self.per_class.get(&class).copied().unwrap_or_default()
    }

    pub fn misses(&self, class: RegionClass) -> u64 {
        self.stats(class).misses
    }

    pub fn total_misses(&self) -> u64 {
        self.per_class.values().map(|s| s.misses).sum()
    }

    /// `key=value` lines, one per class and counter, then the total.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for class in RegionClass::ALL {
            let s = self.stats(class);
            let _ = writeln!(out, "{class}.hits={}", s.hits);
            let _ = writeln!(out, "{class}.misses={}", s.misses);
        }
        let _ = writeln!(out, "total.misses={}", self.total_misses());
        out
    }
}

struct Lru {
    capacity: usize,
    clock: u64,
    stamp: HashMap<(RegionClass, usize), u64>,
    by_age: BTreeMap<u64, (RegionClass, usize)>,
}

impl Lru {
    fn new(capacity: usize) -> Self {
        Lru { capacity, clock: 0, stamp: HashMap::new(), by_age: BTreeMap::new() }
    }

    /// Touches `key`; returns whether it was resident.
    fn touch(&mut self, key: (RegionClass, usize)) -> bool {
        self.clock += 1;
        let hit = match self.stamp.insert(key, self.clock) {
            Some(old) => {
                self.by_age.remove(&old);
                true
            }
            None => false,
        };
        self.by_age.insert(self.clock, key);
        if self.stamp.len() > self.capacity {
            let (_, victim) = self.by_age.pop_first().expect("cache is non-empty");
            self.stamp.remove(&victim);
        }
        hit
    }
}

/// Replays every memory transaction of `trace` through the cache.
pub fn simulate_cache(trace: &ScheduleTrace, config: CacheConfig) -> CacheReport {
    let mut report = CacheReport::default();
    for (class, hit) in simulate_cache_detailed(trace, config) {
        let s = report.per_class.entry(class).or_default();
        if hit {
            s.hits += 1;
        } else {
            s.misses += 1;
        }
    }
    report
}

/// Hit (`true`) or miss for each transaction, in trace order.
pub fn simulate_cache_detailed(trace: &ScheduleTrace, config: CacheConfig) -> Vec<(RegionClass, bool)> {
    let mut lru = Lru::new(config.capacity);
    trace
        .transactions()
        .map(|m| (m.class, lru.touch((m.class, m.owner))))
        .collect()
}

/// Number of tasks on the longest dependency chain.
pub fn critical_path_depth(trace: &ScheduleTrace) -> usize {
    let mut depth: Vec<usize> = Vec::with_capacity(trace.task_count());
    for task in trace.tasks() {
        let d = 1 + task.deps.iter().filter_map(|&p| depth.get(p)).max().copied().unwrap_or(0);
        depth.push(d);
    }
    depth.into_iter().max().unwrap_or(0)
}

pub fn transaction_count(trace: &ScheduleTrace, class: RegionClass) -> usize {
    trace.transactions().filter(|m| m.class == class).count()
}

/// Predicted iteration speedup when `t_saved` ms of optimizer time are
/// hidden: `(b*t_grad + t_opt) / (b*t_grad + t_opt - t_saved)`.
///
/// `t_grad` is forward+backward time per sample, `t_opt` the optimizer time.
pub fn predict_speedup(batch: f64, t_grad: f64, t_opt: f64, t_saved: f64) -> Result<f64> {
    if !(batch > 0.0) || !(t_grad >= 0.0) || !(t_opt >= 0.0) || !(t_saved >= 0.0) {
        return Err(Error::Domain(format!(
            "need b > 0 and non-negative times (b={batch}, t_grad={t_grad}, t_opt={t_opt}, t_saved={t_saved})"
        )));
    }
    let total = batch * t_grad + t_opt;
    if t_saved >= total {
        return Err(Error::Domain(format!("t_saved {t_saved} ms is not below the iteration time {total} ms")));
    }
    Ok(total / (total - t_saved))
}
