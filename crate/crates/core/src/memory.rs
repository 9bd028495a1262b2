//! Transition storage: the shared replay buffer of the RL agent and the
//! small per-agent genetic memory that offspring inherit.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("cannot sample from an empty memory")]
    Empty,
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("memory dump I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("memory dump line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

/// One environment step. `done` marks a true terminal state (bootstrapping
/// stops there); time-limit truncation is not terminal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO ring of transitions. Entries are reference counted so that
/// inheritance and the shared buffer never copy the vectors themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneticMemory {
    capacity: usize,
    entries: VecDeque<Arc<Transition>>,
    pushed: u64,
}

impl GeneticMemory {
    pub const DEFAULT_CAPACITY: usize = 8000;

    pub fn new(capacity: usize) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total pushes over the lifetime of this memory, evicted entries included.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        self.push_shared(Arc::new(t));
    }

    pub fn push_shared(&mut self, t: Arc<Transition>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
        self.pushed += 1;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Arc<Transition>> + '_ {
        self.entries.iter()
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.entries.iter().map(|t| t.state.as_slice())
    }

    /// The `n` most recently pushed entries still retained, oldest first.
    pub fn newest(&self, n: usize) -> impl Iterator<Item = &Arc<Transition>> + '_ {
        self.entries.iter().skip(self.entries.len().saturating_sub(n))
    }

    /// `n` states drawn uniformly with replacement.
    pub fn sample_states<'a, R: Rng + ?Sized>(
        &'a self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<&'a [f64]>, MemoryError> {
        if self.entries.is_empty() {
            return Err(MemoryError::Empty);
        }
        let len = self.entries.len();
        Ok((0..n)
            .map(|_| self.entries[rng.random_range(0..len)].state.as_slice())
            .collect())
    }

    /// Copy for a mutated child: same capacity, same entries, same order.
    pub fn inherit_full(&self) -> Self {
        self.clone()
    }

    /// Memory of a crossover child: the newest `capacity / 2` (floor) entries
    /// of each parent, shuffled. Parents holding fewer contribute all they have.
    pub fn inherit_crossover<R: Rng + ?Sized>(
        x: &Self,
        y: &Self,
        capacity: usize,
        rng: &mut R,
    ) -> Result<Self, MemoryError> {
        let mut child = Self::new(capacity)?;
        let half = capacity / 2;
        let mut picked: Vec<Arc<Transition>> =
            x.newest(half).chain(y.newest(half)).cloned().collect();
        picked.shuffle(rng);
        for t in picked {
            child.push_shared(t);
        }
        Ok(child)
    }

    /// Writes one JSON record per line, oldest first.
    pub fn dump(&self, path: &Path) -> Result<(), MemoryError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(
            w,
            "{}",
            serde_json::json!({ "capacity": self.capacity, "pushed": self.pushed })
        )?;
        for t in &self.entries {
            serde_json::to_writer(&mut w, t.as_ref()).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        #[derive(Deserialize)]
        struct Header {
            capacity: usize,
            pushed: u64,
        }
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?)
                .map_err(|source| MemoryError::Parse { line: 1, source })?,
            None => return Err(MemoryError::Empty),
        };
        let mut mem = Self::new(header.capacity)?;
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line)
                .map_err(|source| MemoryError::Parse { line: i + 1, source })?;
            mem.push(t);
        }
        mem.pushed = header.pushed.max(mem.entries.len() as u64);
        Ok(mem)
    }
}

/// The RL agent's large replay buffer, fed by every rollout in the run.
#[derive(Clone, Debug)]
pub struct SharedReplayBuffer {
    capacity: usize,
    entries: VecDeque<Arc<Transition>>,
}

impl SharedReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 1_000_000;

    pub fn new(capacity: usize) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, t: Arc<Transition>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.entries.get(i).map(Arc::as_ref)
    }

    /// Uniform draw with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(
        &'a self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<&'a Transition>, MemoryError> {
        if self.entries.is_empty() {
            return Err(MemoryError::Empty);
        }
        let len = self.entries.len();
        Ok((0..n)
            .map(|_| self.entries[rng.random_range(0..len)].as_ref())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    pub(crate) fn tr(id: f64) -> Transition {
        Transition {
            state: vec![id],
            action: vec![0.0],
            reward: id,
            next_state: vec![id + 0.5],
            done: false,
        }
    }

    fn ids(m: &GeneticMemory) -> Vec<f64> {
        m.iter().map(|t| t.state[0]).collect()
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut m = GeneticMemory::new(2).unwrap();
        for i in 1..=3 {
            m.push(tr(i as f64));
        }
        assert_eq!(ids(&m), vec![2.0, 3.0]);
        assert_eq!(m.pushed(), 3);
        assert!(GeneticMemory::new(0).is_err());
        assert_eq!(GeneticMemory::DEFAULT_CAPACITY, 8000);
    }

    #[test]
    fn size_tracks_pushes_below_capacity() {
        let mut m = GeneticMemory::new(10).unwrap();
        for i in 0..7 {
            m.push(tr(i as f64));
        }
        assert_eq!(m.len(), 7);
    }

    #[test]
    fn sample_from_single_entry_and_empty() {
        let mut m = GeneticMemory::new(4).unwrap();
        let mut rng = rng_from(1, &[]);
        assert!(matches!(m.sample_states(3, &mut rng), Err(MemoryError::Empty)));
        m.push(tr(9.0));
        let s = m.sample_states(3, &mut rng).unwrap();
        assert_eq!(s, vec![&[9.0][..]; 3]);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut m = GeneticMemory::new(100).unwrap();
        for i in 0..100 {
            m.push(tr(i as f64));
        }
        let a = m.sample_states(20, &mut rng_from(5, &[])).unwrap();
        let b = m.sample_states(20, &mut rng_from(5, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform() {
        // chi-square over 10 cells, 1e5 draws; 99.9% quantile with 9 dof is 27.88
        let mut m = GeneticMemory::new(10).unwrap();
        for i in 0..10 {
            m.push(tr(i as f64));
        }
        let mut rng = rng_from(42, &[]);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for s in m.sample_states(draws, &mut rng).unwrap() {
            counts[s[0] as usize] += 1;
        }
        let expected = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 27.88, "chi2 {chi2}");
        for &c in &counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn inherit_full_is_isolated() {
        let mut parent = GeneticMemory::new(5).unwrap();
        for i in 0..3 {
            parent.push(tr(i as f64));
        }
        let mut child = parent.inherit_full();
        assert_eq!(ids(&child), vec![0.0, 1.0, 2.0]);
        child.push(tr(3.0));
        assert_eq!(ids(&parent), vec![0.0, 1.0, 2.0]);
        assert_eq!(ids(&child), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn inherit_crossover_takes_latest_halves() {
        let mut x = GeneticMemory::new(8).unwrap();
        let mut y = GeneticMemory::new(8).unwrap();
        for i in 1..=5 {
            x.push(tr(i as f64));
            y.push(tr(100.0 + i as f64));
        }
        let child = GeneticMemory::inherit_crossover(&x, &y, 4, &mut rng_from(0, &[])).unwrap();
        let mut got = ids(&child);
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![4.0, 5.0, 104.0, 105.0]);
        assert_eq!(child.capacity(), 4);
    }

    #[test]
    fn inherit_crossover_boundaries() {
        let empty = GeneticMemory::new(8).unwrap();
        let mut y = GeneticMemory::new(8).unwrap();
        for i in 1..=3 {
            y.push(tr(i as f64));
        }
        let mut rng = rng_from(3, &[]);
        let child = GeneticMemory::inherit_crossover(&empty, &y, 4, &mut rng).unwrap();
        let mut got = ids(&child);
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![2.0, 3.0]);
        let none = GeneticMemory::inherit_crossover(&empty, &empty, 4, &mut rng).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn dump_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.jsonl");
        let mut m = GeneticMemory::new(3).unwrap();
        for i in 0..5 {
            m.push(Transition {
                state: vec![i as f64 * 0.1, -1.0 / 3.0],
                action: vec![0.7],
                reward: -0.123456789,
                next_state: vec![1e-300, 2.5],
                done: i == 4,
            });
        }
        m.dump(&path).unwrap();
        let back = GeneticMemory::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn shared_buffer_ring_and_sampling() {
        let mut b = SharedReplayBuffer::new(3).unwrap();
        let mut rng = rng_from(1, &[]);
        assert!(b.sample(2, &mut rng).is_err());
        for i in 0..5 {
            b.push(Arc::new(tr(i as f64)));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).unwrap().state, vec![2.0]);
        let s = b.sample(128, &mut rng).unwrap();
        assert_eq!(s.len(), 128);
        assert!(s.iter().all(|t| t.state[0] >= 2.0));
    }
}
