//! Task-balanced rehearsal buffer.
//!
//! Capacity is split evenly across the tasks seen so far (earlier tasks take
//! the remainder), and each task's allocation is filled with an even number
//! of entries so original/imagined pairs stay matched. The buffer is rebuilt
//! after every task from the retained validation splits; subsampling uses
//! seeded reservoir sampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{TaskId, Window};

pub const DEFAULT_CAPACITY: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Prospective,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RehearsalEntry {
    pub window: Window,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    capacity: usize,
    per_task: BTreeMap<TaskId, Vec<RehearsalEntry>>,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize) -> Self {
        RehearsalBuffer { capacity, per_task: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_len(&self) -> usize {
        self.per_task.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.per_task.keys().copied().collect()
    }

    pub fn task_entries(&self, task: TaskId) -> &[RehearsalEntry] {
        self.per_task.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn counts(&self) -> BTreeMap<TaskId, usize> {
        self.per_task.iter().map(|(t, v)| (*t, v.len())).collect()
    }

    pub fn provenance_counts(&self) -> BTreeMap<Provenance, usize> {
        let mut out = BTreeMap::new();
        for entry in self.per_task.values().flatten() {
            *out.entry(entry.provenance).or_insert(0) += 1;
        }
        out
    }

    /// Per-task allocation for `tasks` tasks: one uniform even quota, so
    /// per-task counts stay balanced and original/imagined entries stay
    /// paired. Any capacity remainder is left unused.
    pub fn allocation(&self, tasks: usize) -> Vec<usize> {
        assert!(tasks > 0);
        let quota = 2 * (self.capacity / 2 / tasks);
        vec![quota; tasks]
    }

    /// Replace one task's entries. Enforces the capacity invariant.
    pub fn set_task_entries(&mut self, task: TaskId, entries: Vec<RehearsalEntry>) -> Result<()> {
        let others: usize =
            self.per_task.iter().filter(|(t, _)| **t != task).map(|(_, v)| v.len()).sum();
        if others + entries.len() > self.capacity {
            return Err(Error::Usage(format!(
                "buffer capacity {} exceeded: {} existing + {} new",
                self.capacity,
                others,
                entries.len()
            )));
        }
        self.per_task.insert(task, entries);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.per_task.clear();
    }

    /// Max per-task count minus min per-task count; balanced means <= 1.
    pub fn balance_spread(&self) -> usize {
        let counts: Vec<usize> = self.per_task.values().map(Vec::len).collect();
        match (counts.iter().max(), counts.iter().min()) {
            (Some(max), Some(min)) => max - min,
            _ => 0,
        }
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Reservoir-sample `k` items from an iterator (Algorithm R); order of the
/// result follows the stream.
pub fn reservoir_sample<T, I: IntoIterator<Item = T>>(
    items: I,
    k: usize,
    rng: &mut impl Rng,
) -> Vec<T> {
    let mut reservoir: Vec<T> = Vec::with_capacity(k);
    if k == 0 {
        return reservoir;
    }
    for (i, item) in items.into_iter().enumerate() {
        if i < k {
            reservoir.push(item);
        } else {
            let j = rng.gen_range(0..=i);
            if j < k {
                reservoir[j] = item;
            }
        }
    }
    reservoir
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(task: TaskId, provenance: Provenance) -> RehearsalEntry {
        RehearsalEntry {
            window: Window {
                inputs: Tensor::filled(vec![2, 2], task as f64),
                target: 0.5,
                task,
                step: 3,
            },
            provenance,
        }
    }

    #[test]
    fn test_allocation_balanced_and_even() {
        for capacity in [60, 299, 3000, 3001] {
            let buf = RehearsalBuffer::new(capacity);
            for tasks in 1..=9 {
                let alloc = buf.allocation(tasks);
                assert!(alloc.iter().sum::<usize>() <= capacity);
                assert!(alloc.iter().all(|a| a % 2 == 0));
                let max = alloc.iter().max().unwrap();
                let min = alloc.iter().min().unwrap();
                assert!(max - min == 0, "tasks={tasks}: {alloc:?}");
            }
        }
    }

    #[test]
    fn test_capacity_enforced() {
        let mut buf = RehearsalBuffer::new(4);
        buf.set_task_entries(0, vec![entry(0, Provenance::Original); 2]).unwrap();
        buf.set_task_entries(1, vec![entry(1, Provenance::Original); 2]).unwrap();
        assert!(buf.set_task_entries(2, vec![entry(2, Provenance::Original); 1]).is_err());
        // replacing an existing task's entries stays legal
        buf.set_task_entries(0, vec![entry(0, Provenance::Original); 2]).unwrap();
        assert_eq!(buf.total_len(), 4);
    }

    #[test]
    fn test_balance_spread() {
        let mut buf = RehearsalBuffer::new(10);
        buf.set_task_entries(0, vec![entry(0, Provenance::Original); 3]).unwrap();
        buf.set_task_entries(1, vec![entry(1, Provenance::Original); 2]).unwrap();
        assert_eq!(buf.balance_spread(), 1);
    }

    #[test]
    fn test_dump_restore_preserves_provenance() {
        let mut buf = RehearsalBuffer::new(8);
        buf.set_task_entries(
            0,
            vec![entry(0, Provenance::Original), entry(0, Provenance::Prospective)],
        )
        .unwrap();
        buf.set_task_entries(1, vec![entry(1, Provenance::Noise)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.json");
        buf.dump(&path).unwrap();
        let restored = RehearsalBuffer::restore(&path).unwrap();
        assert_eq!(restored, buf);
        assert_eq!(restored.provenance_counts()[&Provenance::Prospective], 1);
    }

    #[test]
    fn test_reservoir_sample_deterministic_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sample = reservoir_sample(0..1000, 10, &mut rng);
        assert_eq!(sample.len(), 10);
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample, reservoir_sample(0..1000, 10, &mut rng2));
        // fewer items than k: take all
        let mut rng3 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(reservoir_sample(0..3, 10, &mut rng3), vec![0, 1, 2]);
    }

    #[test]
    fn test_reservoir_sample_roughly_uniform() {
        // each of 100 items should land in a k=10 sample ~ 1000 times over
        // 10k draws; loose 3-sigma band
        let mut hits = vec![0u32; 100];
        for trial in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            for v in reservoir_sample(0..100, 10, &mut rng) {
                hits[v] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            assert!((700..1300).contains(&h), "item {i} drawn {h} times");
        }
    }
}
