//! Per-class bounded priority queues of reliable features and the
//! entropy-weighted prototypes derived from them.
//!
//! Admission follows the dual criterion (`H ≤ σ` and `Δp ≥ δ`). A full queue
//! only accepts a feature with lower entropy than its current maximum, which
//! it then replaces. Every `evict_interval` ticks the lowest-entropy entry of
//! each non-empty queue is dropped so that the queues keep turning over.
//! Among equal entropies the oldest entry is the one removed.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numnet::cosine;
use crate::reliability::dual_criterion;

/// Entropy floor applied before inverse-entropy weighting.
pub const ENTROPY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
struct EntropyKey(f64);

impl PartialEq for EntropyKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}
impl Eq for EntropyKey {}
impl PartialOrd for EntropyKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EntropyKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub feature: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertOutcome {
    Inserted,
    ReplacedMaxEntropy,
    RejectedCriteria,
    RejectedFullHigherEntropy,
}

/// Bounded queue keyed by (entropy, insertion sequence).
#[derive(Debug, Clone, Default)]
pub struct ClassQueue {
    entries: BTreeMap<(EntropyKey, u64), Vec<f64>>,
}

impl ClassQueue {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_entropy(&self) -> Option<f64> {
        self.entries.keys().next_back().map(|(k, _)| k.0)
    }

    pub fn min_entropy(&self) -> Option<f64> {
        self.entries.keys().next().map(|(k, _)| k.0)
    }

    /// Entries in (entropy, age) order.
    pub fn entries(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.entries.iter().map(|((k, _), v)| (k.0, v.as_slice()))
    }

    /// Key of the oldest entry among those with maximal entropy.
    fn max_key(&self) -> Option<(EntropyKey, u64)> {
        let (top, _) = *self.entries.keys().next_back()?;
        self.entries.range((top, 0)..).next().map(|(k, _)| *k)
    }

    fn pop_min(&mut self) -> bool {
        self.entries.pop_first().is_some()
    }
}

#[derive(Debug)]
pub struct PrototypeStore {
    queues: Vec<ClassQueue>,
    cache: Vec<OnceLock<Option<Vec<f64>>>>,
    capacity: usize,
    evict_interval: u64,
    sigma: f64,
    delta: f64,
    feature_dim: usize,
    step: u64,
    seq: u64,
}

impl Clone for PrototypeStore {
    fn clone(&self) -> Self {
        PrototypeStore {
            queues: self.queues.clone(),
            cache: (0..self.queues.len()).map(|_| OnceLock::new()).collect(),
            ..*self
        }
    }
}

impl PrototypeStore {
    pub fn new(
        num_classes: usize,
        feature_dim: usize,
        capacity: usize,
        evict_interval: u64,
        sigma: f64,
        delta: f64,
    ) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 || capacity == 0 || evict_interval == 0 {
            return Err(Error::InvalidConfig(
                "prototype store needs classes, feature dim, capacity and evict interval >= 1".into(),
            ));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma {sigma} must be > 0")));
        }
        Ok(PrototypeStore {
            queues: vec![ClassQueue::default(); num_classes],
            cache: (0..num_classes).map(|_| OnceLock::new()).collect(),
            capacity,
            evict_interval,
            sigma,
            delta,
            feature_dim,
            step: 0,
            seq: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn queue(&self, class: usize) -> Option<&ClassQueue> {
        self.queues.get(class)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.queues.iter().map(ClassQueue::len).collect()
    }

    pub fn total(&self) -> usize {
        self.queues.iter().map(ClassQueue::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(ClassQueue::is_empty)
    }

    fn invalidate(&mut self, class: usize) {
        self.cache[class] = OnceLock::new();
    }

    /// Empties every queue and resets the step counter.
    pub fn clear(&mut self) {
        for c in 0..self.queues.len() {
            self.queues[c] = ClassQueue::default();
            self.invalidate(c);
        }
        self.step = 0;
    }

    pub fn try_insert(&mut self, class: usize, feature: &[f64], entropy: f64, plpd: f64) -> Result<InsertOutcome> {
        if class >= self.queues.len() {
            return Err(Error::InvalidClass { class, num_classes: self.queues.len() });
        }
        if feature.len() != self.feature_dim {
            return Err(Error::shape("PrototypeStore::try_insert", self.feature_dim, feature.len()));
        }
        if feature.iter().any(|v| !v.is_finite()) || !entropy.is_finite() {
            return Err(Error::NonFinite("prototype store feature"));
        }
        if !dual_criterion(entropy, plpd, self.sigma, self.delta) {
            return Ok(InsertOutcome::RejectedCriteria);
        }
        let h = entropy.max(ENTROPY_FLOOR);
        let key = (EntropyKey(h), self.seq);
        let q = &mut self.queues[class];
        let outcome = if q.len() < self.capacity {
            q.entries.insert(key, feature.to_vec());
            InsertOutcome::Inserted
        } else {
            let max = q.max_key().expect("full queue is non-empty");
            if h < max.0 .0 {
                q.entries.remove(&max);
                q.entries.insert(key, feature.to_vec());
                InsertOutcome::ReplacedMaxEntropy
            } else {
                return Ok(InsertOutcome::RejectedFullHigherEntropy);
            }
        };
        self.seq += 1;
        self.invalidate(class);
        Ok(outcome)
    }

    /// Advances the step counter; every `evict_interval` steps removes the
    /// lowest-entropy entry of each non-empty queue. Returns which classes
    /// lost an entry.
    pub fn tick(&mut self) -> Vec<bool> {
        self.step += 1;
        if !self.step.is_multiple_of(self.evict_interval) {
            return vec![false; self.queues.len()];
        }
        (0..self.queues.len())
            .map(|c| {
                let evicted = self.queues[c].pop_min();
                if evicted {
                    self.invalidate(c);
                }
                evicted
            })
            .collect()
    }

    /// Inverse-entropy weighted mean of a class queue; `None` when empty.
    pub fn prototype(&self, class: usize) -> Option<Vec<f64>> {
        let q = self.queues.get(class)?;
        self.cache[class]
            .get_or_init(|| {
                if q.is_empty() {
                    return None;
                }
                let mut acc = vec![0.0; self.feature_dim];
                let mut wsum = 0.0;
                for (h, z) in q.entries() {
                    let w = 1.0 / h;
                    wsum += w;
                    acc.iter_mut().zip(z).for_each(|(a, v)| *a += w * v);
                }
                acc.iter_mut().for_each(|a| *a /= wsum);
                Some(acc)
            })
            .clone()
    }

    /// Class whose prototype has the highest cosine similarity to `z`; ties
    /// go to the lowest class. `None` when every queue is empty.
    pub fn nearest_prototype(&self, z: &[f64]) -> Result<Option<(usize, f64)>> {
        if z.len() != self.feature_dim {
            return Err(Error::shape("nearest_prototype", self.feature_dim, z.len()));
        }
        if z.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm("nearest_prototype query"));
        }
        let mut best: Option<(usize, f64)> = None;
        for c in 0..self.queues.len() {
            let Some(p) = self.prototype(c) else { continue };
            // an all-zero prototype (possible with ReLU features) is skipped
            let Some(s) = cosine(z, &p) else { continue };
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        Ok(best)
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            capacity: self.capacity,
            evict_interval: self.evict_interval,
            sigma: self.sigma,
            delta: self.delta,
            feature_dim: self.feature_dim,
            step: self.step,
            classes: self
                .queues
                .iter()
                .enumerate()
                .map(|(c, q)| {
                    let entries = q
                        .entries
                        .iter()
                        .map(|((k, _), z)| QueueEntry { feature: z.clone(), entropy: k.0 })
                        .collect();
                    (c, entries)
                })
                .collect(),
        }
    }

    /// Rebuilds a store from a snapshot. Entry age follows list order.
    pub fn from_snapshot(s: &StoreSnapshot) -> Result<Self> {
        let num_classes = s.classes.keys().next_back().map_or(0, |c| c + 1);
        let mut store = PrototypeStore::new(num_classes, s.feature_dim, s.capacity, s.evict_interval, s.sigma, s.delta)?;
        store.step = s.step;
        for (&c, entries) in &s.classes {
            if entries.len() > s.capacity {
                return Err(Error::InvalidConfig(format!("class {c} holds more than {} entries", s.capacity)));
            }
            for e in entries {
                if e.feature.len() != s.feature_dim {
                    return Err(Error::shape("StoreSnapshot entry", s.feature_dim, e.feature.len()));
                }
                let key = (EntropyKey(e.entropy.max(ENTROPY_FLOOR)), store.seq);
                store.queues[c].entries.insert(key, e.feature.clone());
                store.seq += 1;
            }
        }
        Ok(store)
    }
}

/// JSON form of a store: class → entries in (entropy, age) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub capacity: usize,
    pub evict_interval: u64,
    pub sigma: f64,
    pub delta: f64,
    pub feature_dim: usize,
    pub step: u64,
    pub classes: BTreeMap<usize, Vec<QueueEntry>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(k: usize, p: u64) -> PrototypeStore {
        PrototypeStore::new(3, 2, k, p, 0.5, 0.2).unwrap()
    }

    #[test]
    fn empty_queue_accepts_passing_sample() {
        let mut s = store(10, 50);
        assert_eq!(s.try_insert(0, &[1.0, 0.0], 0.3, 0.3).unwrap(), InsertOutcome::Inserted);
        assert_eq!(s.sizes(), vec![1, 0, 0]);
    }

    #[test]
    fn gate_rejects_regardless_of_state() {
        let mut s = store(10, 50);
        assert_eq!(s.try_insert(1, &[1.0, 0.0], 0.6, 0.9).unwrap(), InsertOutcome::RejectedCriteria);
        assert_eq!(s.try_insert(1, &[1.0, 0.0], 0.1, 0.1).unwrap(), InsertOutcome::RejectedCriteria);
        assert!(s.is_empty());
    }

    #[test]
    fn full_queue_replaces_max_entropy() {
        let mut s = store(10, 50);
        for i in 0..9 {
            let h = 0.05 + 0.04 * i as f64;
            s.try_insert(0, &[i as f64, 1.0], h, 0.5).unwrap();
        }
        assert_eq!(s.try_insert(0, &[0.0, 1.0], 0.45, 0.5).unwrap(), InsertOutcome::Inserted);
        assert_eq!(s.queue(0).unwrap().len(), 10);
        assert!((s.queue(0).unwrap().max_entropy().unwrap() - 0.45).abs() < 1e-15);
        assert_eq!(s.try_insert(0, &[5.0, 5.0], 0.30, 0.5).unwrap(), InsertOutcome::ReplacedMaxEntropy);
        assert!(s.queue(0).unwrap().max_entropy().unwrap() <= 0.45);
        assert_eq!(s.try_insert(0, &[5.0, 5.0], 0.49, 0.5).unwrap(), InsertOutcome::RejectedFullHigherEntropy);
    }

    #[test]
    fn tick_evicts_lowest_entropy_on_schedule() {
        let mut s = store(10, 3);
        s.try_insert(2, &[1.0, 0.0], 0.2, 0.5).unwrap();
        s.try_insert(2, &[0.0, 1.0], 0.1, 0.5).unwrap();
        assert_eq!(s.tick(), vec![false; 3]);
        assert_eq!(s.tick(), vec![false; 3]);
        assert_eq!(s.tick(), vec![false, false, true]);
        let q = s.queue(2).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q.min_entropy(), Some(0.2));
    }

    #[test]
    fn every_tick_evicts_with_unit_interval() {
        let mut s = store(10, 1);
        for h in [0.1, 0.2, 0.3] {
            s.try_insert(0, &[1.0, h], h, 0.5).unwrap();
        }
        for left in [2, 1, 0, 0] {
            s.tick();
            assert_eq!(s.queue(0).unwrap().len(), left);
        }
        let mut empty = store(4, 2);
        for _ in 0..7 {
            empty.tick();
        }
        assert!(empty.is_empty());
    }

    #[test]
    fn prototype_examples() {
        let mut s = store(10, 50);
        assert_eq!(s.prototype(0), None);
        s.try_insert(0, &[3.0, -1.0], 0.3, 0.5).unwrap();
        assert_eq!(s.prototype(0), Some(vec![3.0, -1.0]));

        let mut s = PrototypeStore::new(2, 2, 10, 50, 2.0, 0.2).unwrap();
        s.try_insert(1, &[1.0, 0.0], 0.5, 0.5).unwrap();
        s.try_insert(1, &[0.0, 1.0], 1.0, 0.5).unwrap();
        let p = s.prototype(1).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);

        let mut s = store(10, 50);
        for z in [[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]] {
            s.try_insert(0, &z, 0.25, 0.5).unwrap();
        }
        let p = s.prototype(0).unwrap();
        assert!((p[0] - 3.0).abs() < 1e-15 && (p[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_entropy_is_floored() {
        let mut s = store(10, 50);
        s.try_insert(0, &[1.0, 0.0], 0.0, 0.5).unwrap();
        s.try_insert(0, &[0.0, 1.0], 0.5, 0.5).unwrap();
        assert_eq!(s.queue(0).unwrap().min_entropy(), Some(ENTROPY_FLOOR));
        let p = s.prototype(0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn nearest_prototype_examples() {
        let mut s = store(10, 50);
        assert_eq!(s.nearest_prototype(&[1.0, 0.0]).unwrap(), None);
        s.try_insert(0, &[1.0, 0.0], 0.2, 0.5).unwrap();
        s.try_insert(1, &[0.0, 1.0], 0.2, 0.5).unwrap();
        assert_eq!(s.nearest_prototype(&[0.9, 0.1]).unwrap().unwrap().0, 0);
        let (c, sim) = s.nearest_prototype(&[0.0, 2.0]).unwrap().unwrap();
        assert_eq!(c, 1);
        assert!((sim - 1.0).abs() < 1e-15);
        // equal similarity → lower class
        assert_eq!(s.nearest_prototype(&[1.0, 1.0]).unwrap().unwrap().0, 0);
        assert!(s.nearest_prototype(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn errors_on_bad_class_and_dimension() {
        let mut s = store(10, 50);
        assert!(matches!(s.try_insert(3, &[0.0, 1.0], 0.1, 0.5), Err(Error::InvalidClass { .. })));
        assert!(s.try_insert(0, &[0.0], 0.1, 0.5).is_err());
    }

    #[test]
    fn equal_entropy_ties_drop_oldest() {
        let mut s = store(2, 1);
        s.try_insert(0, &[1.0, 0.0], 0.3, 0.5).unwrap();
        s.try_insert(0, &[0.0, 1.0], 0.3, 0.5).unwrap();
        // replacement removes the older of the two max-entropy entries
        s.try_insert(0, &[2.0, 2.0], 0.1, 0.5).unwrap();
        let left: Vec<Vec<f64>> = s.queue(0).unwrap().entries().map(|(_, z)| z.to_vec()).collect();
        assert_eq!(left, vec![vec![2.0, 2.0], vec![0.0, 1.0]]);
        s.tick();
        s.try_insert(0, &[3.0, 3.0], 0.3, 0.5).unwrap();
        // eviction of the min-entropy tie also removes the older entry
        s.tick();
        let left: Vec<Vec<f64>> = s.queue(0).unwrap().entries().map(|(_, z)| z.to_vec()).collect();
        assert_eq!(left, vec![vec![3.0, 3.0]]);
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let mut s = store(4, 50);
        s.try_insert(0, &[0.25, 1.5], 0.3, 0.5).unwrap();
        s.try_insert(2, &[0.1, 0.2], 0.05, 0.5).unwrap();
        s.tick();
        let json = serde_json::to_string(&s.snapshot()).unwrap();
        let back: StoreSnapshot = serde_json::from_str(&json).unwrap();
        let restored = PrototypeStore::from_snapshot(&back).unwrap();
        assert_eq!(restored.snapshot(), s.snapshot());
        assert_eq!(restored.prototype(2), s.prototype(2));
    }
}
