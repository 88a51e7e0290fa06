use crate::error::{Error, Result};
use crate::numcore::Prng;
use crate::pixelworld::{Action, Observation};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f32,
    pub next_obs: Observation,
    /// Episode ended by reaching the target; horizon cut-offs are not terminal.
    pub terminal: bool,
}

/// Fixed-capacity ring buffer; frames are shared, not copied.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `batch` uniform draws with replacement.
    pub fn sample(&self, rng: &mut Prng, batch: usize) -> Result<Vec<&Transition>> {
        if self.items.len() < batch {
            return Err(Error::Protocol(format!(
                "replay holds {} transitions, batch needs {batch}",
                self.items.len()
            )));
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.below(self.items.len() as u64) as usize])
            .collect())
    }
}
