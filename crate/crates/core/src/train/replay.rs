use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng;

use super::TrainError;

/// Fixed-capacity FIFO store with uniform sampling (with replacement).
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self, TrainError> {
        if capacity == 0 {
            return Err(TrainError::Config("replay capacity must be at least 1".into()));
        }
        Ok(ReplayBuffer {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `item`, evicting the oldest entry when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` uniformly drawn entries.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>, TrainError> {
        if self.items.is_empty() {
            return Err(TrainError::EmptyReplay);
        }
        Ok((0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect())
    }
}
