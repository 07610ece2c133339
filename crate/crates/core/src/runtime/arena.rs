//! Capacity-enforced allocation ledgers for the two memory tiers.
//!
//! Arenas track byte budgets, not real buffers: exceeding one signals that a
//! policy's working set does not fit the tier, before any compute runs.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Device,
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Handle(u64);

#[derive(Debug)]
pub struct Arena {
    tier: Tier,
    capacity: u64,
    used: u64,
    peak: u64,
    next: u64,
    allocations: HashMap<Handle, (u64, String)>,
}

impl Arena {
    pub fn new(tier: Tier, capacity: u64) -> Self {
        Arena {
            tier,
            capacity,
            used: 0,
            peak: 0,
            next: 0,
            allocations: HashMap::new(),
        }
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    /// High-water mark of `used`.
    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn alloc(&mut self, bytes: u64, tag: impl Into<String>) -> Result<Handle> {
        let tag = tag.into();
        if self.used + bytes > self.capacity {
            return Err(Error::CapacityExceeded(format!(
                "{:?} arena: {} bytes for `{tag}` on top of {} used exceeds capacity {}",
                self.tier, bytes, self.used, self.capacity
            )));
        }
        self.used += bytes;
        self.peak = self.peak.max(self.used);
        let handle = Handle(self.next);
        self.next += 1;
        self.allocations.insert(handle, (bytes, tag));
        debug_assert!(self.used <= self.capacity);
        Ok(handle)
    }

    pub fn free(&mut self, handle: Handle) -> Result<u64> {
        match self.allocations.remove(&handle) {
            Some((bytes, _)) => {
                self.used -= bytes;
                Ok(bytes)
            }
            None => Err(Error::InvalidState(format!(
                "free of unknown handle {handle:?} in {:?} arena",
                self.tier
            ))),
        }
    }

    /// Sum of live allocation sizes; always equals `used`.
    pub fn accounted(&self) -> u64 {
        self.allocations.values().map(|(b, _)| *b).sum()
    }
}
