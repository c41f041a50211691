//! Fixed-capacity replay memory with reservoir updates.
//!
//! Every sample ever offered has equal marginal inclusion probability
//! (Algorithm R): while the bank has room each sample is stored, and once
//! full the t-th offered sample replaces a uniformly random slot with
//! probability `capacity / t`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::stream::Sample;

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    slots: Vec<Sample>,
    seen: u64,
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: Vec::with_capacity(capacity),
            seen: 0,
            by_class: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of samples ever offered, including rejected ones.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    /// Classes currently present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.by_class.keys().copied().collect()
    }

    pub fn class_count(&self, label: usize) -> usize {
        self.by_class.get(&label).map_or(0, Vec::len)
    }

    pub fn samples_of_class(&self, label: usize) -> Vec<&Sample> {
        self.by_class
            .get(&label)
            .map(|idx| idx.iter().map(|&i| &self.slots[i]).collect())
            .unwrap_or_default()
    }

    pub fn slots(&self) -> &[Sample] {
        &self.slots
    }

    /// Offers every sample of the batch to the reservoir.
    pub fn update<R: Rng>(&mut self, batch: &[Sample], rng: &mut R) {
        for sample in batch {
            self.offer(sample.clone(), rng);
        }
    }

    fn offer<R: Rng>(&mut self, sample: Sample, rng: &mut R) {
        self.seen += 1;
        if self.slots.len() < self.capacity {
            self.index_insert(sample.label, self.slots.len());
            self.slots.push(sample);
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let j = rng.random_range(0..self.seen);
        if (j as usize) < self.capacity {
            let slot = j as usize;
            let old_label = self.slots[slot].label;
            self.index_remove(old_label, slot);
            self.index_insert(sample.label, slot);
            self.slots[slot] = sample;
        }
    }

    fn index_insert(&mut self, label: usize, slot: usize) {
        self.by_class.entry(label).or_default().push(slot);
    }

    fn index_remove(&mut self, label: usize, slot: usize) {
        let entry = self.by_class.get_mut(&label).expect("index out of sync");
        entry.retain(|&s| s != slot);
        if entry.is_empty() {
            self.by_class.remove(&label);
        }
    }

    /// Draws `min(k, len)` stored samples uniformly without replacement.
    pub fn sample_uniform<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<Sample> {
        let n = k.min(self.slots.len());
        if n == 0 {
            return Vec::new();
        }
        rand::seq::index::sample(rng, self.slots.len(), n)
            .into_iter()
            .map(|i| self.slots[i].clone())
            .collect()
    }

    /// Draws `k` samples from each of the two classes, uniform within class;
    /// falls back to drawing with replacement when a class holds fewer than
    /// `k` members.
    pub fn samples_of_classes<R: Rng>(
        &self,
        class_a: usize,
        class_b: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let a = self.draw_class(class_a, k, rng)?;
        let b = self.draw_class(class_b, k, rng)?;
        Ok((a, b))
    }

    fn draw_class<R: Rng>(&self, label: usize, k: usize, rng: &mut R) -> Result<Vec<Sample>> {
        let idx = self.by_class.get(&label).ok_or(Error::ClassUnavailable(label))?;
        if k == 0 {
            return Ok(Vec::new());
        }
        if idx.len() >= k {
            Ok(rand::seq::index::sample(rng, idx.len(), k)
                .into_iter()
                .map(|i| self.slots[idx[i]].clone())
                .collect())
        } else {
            Ok((0..k)
                .map(|_| self.slots[idx[rng.random_range(0..idx.len())]].clone())
                .collect())
        }
    }

    #[cfg(test)]
    fn check_index(&self) {
        let mut total = 0;
        for (label, idx) in &self.by_class {
            for &slot in idx {
                assert_eq!(self.slots[slot].label, *label, "index points at wrong label");
            }
            total += idx.len();
        }
        assert_eq!(total, self.slots.len(), "index does not cover all slots");
    }
}
