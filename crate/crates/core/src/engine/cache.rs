//! Per-(layer, KV-head) partitioned key/value storage.
//!
//! Each head's keys and values live in their own contiguous pre-allocated
//! block, so a head group can be copied between tiers as a unit.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct HeadBlock {
    k: Vec<f32>,
    v: Vec<f32>,
    len: usize,
}

#[derive(Debug, Clone)]
pub struct HeadKvCache {
    layers: usize,
    kv_heads: usize,
    head_dim: usize,
    capacity: usize,
    blocks: Vec<HeadBlock>,
}

impl HeadKvCache {
    /// Pre-allocates every block at full `capacity` tokens.
    pub fn new(layers: usize, kv_heads: usize, head_dim: usize, capacity: usize) -> Self {
        let block = HeadBlock {
            k: vec![0.0; capacity * head_dim],
            v: vec![0.0; capacity * head_dim],
            len: 0,
        };
        HeadKvCache {
            layers,
            kv_heads,
            head_dim,
            capacity,
            blocks: vec![block; layers * kv_heads],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn index(&self, layer: usize, head: usize) -> usize {
        assert!(layer < self.layers && head < self.kv_heads);
        layer * self.kv_heads + head
    }

    pub fn len(&self, layer: usize, head: usize) -> usize {
        self.blocks[self.index(layer, head)].len
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(|b| b.len == 0)
    }

    /// Tokens cached, asserting every block agrees (holds at step boundaries).
    pub fn uniform_len(&self) -> usize {
        let len = self.blocks[0].len;
        debug_assert!(
            self.blocks.iter().all(|b| b.len == len),
            "cache blocks advanced unevenly"
        );
        len
    }

    /// Append `rows` tokens of K and V (each `rows * head_dim` values) to one
    /// head's block. Returns the block's new length.
    pub fn append(
        &mut self,
        layer: usize,
        head: usize,
        k_rows: &[f32],
        v_rows: &[f32],
    ) -> Result<usize> {
        if k_rows.len() != v_rows.len() || !k_rows.len().is_multiple_of(self.head_dim) {
            return Err(Error::ShapeMismatch(format!(
                "append of {} K values / {} V values is not whole rows of width {}",
                k_rows.len(),
                v_rows.len(),
                self.head_dim
            )));
        }
        let rows = k_rows.len() / self.head_dim;
        let idx = self.index(layer, head);
        let block = &mut self.blocks[idx];
        if block.len + rows > self.capacity {
            return Err(Error::CapacityExceeded(format!(
                "cache block (layer {layer}, head {head}) holds {} of {} tokens; cannot append {rows}",
                block.len, self.capacity
            )));
        }
        let start = block.len * self.head_dim;
        block.k[start..start + k_rows.len()].copy_from_slice(k_rows);
        block.v[start..start + v_rows.len()].copy_from_slice(v_rows);
        block.len += rows;
        Ok(block.len)
    }

    /// Filled K and V regions plus token count for one head.
    pub fn head(&self, layer: usize, head: usize) -> (&[f32], &[f32], usize) {
        let block = &self.blocks[self.index(layer, head)];
        let end = block.len * self.head_dim;
        (&block.k[..end], &block.v[..end], block.len)
    }

    /// Mutable view of one head's cached keys. Fault-injection hook for
    /// negative-control tests; not used by the runtime itself.
    pub fn k_values_mut(&mut self, layer: usize, head: usize) -> &mut [f32] {
        let dim = self.head_dim;
        let idx = self.index(layer, head);
        let block = &mut self.blocks[idx];
        let end = block.len * dim;
        &mut block.k[..end]
    }

    /// Bytes this cache would occupy at `dtype_bytes` per element, counting
    /// filled tokens only.
    pub fn filled_bytes(&self, dtype_bytes: u64) -> u64 {
        self.blocks
            .iter()
            .map(|b| 2 * (b.len * self.head_dim) as u64 * dtype_bytes)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_advances_len() {
        let mut cache = HeadKvCache::new(2, 2, 4, 16);
        let rows = vec![1.0; 4 * 4];
        assert_eq!(cache.append(0, 0, &rows, &rows).unwrap(), 4);
        assert_eq!(cache.len(0, 0), 4);
        assert_eq!(cache.len(0, 1), 0);
    }

    #[test]
    fn append_beyond_capacity_fails() {
        let mut cache = HeadKvCache::new(1, 1, 4, 4);
        let rows = vec![0.5; 4 * 4];
        cache.append(0, 0, &rows, &rows).unwrap();
        let err = cache.append(0, 0, &rows[..4], &rows[..4]).unwrap_err();
        assert!(matches!(err, Error::CapacityExceeded(_)));
    }

    #[test]
    fn two_appends_equal_one() {
        let dim = 3;
        let all: Vec<f32> = (0..8 * dim).map(|i| i as f32 * 0.1).collect();
        let also: Vec<f32> = all.iter().map(|v| v + 0.5).collect();

        let mut split = HeadKvCache::new(1, 1, dim, 8);
        split.append(0, 0, &all[..4 * dim], &also[..4 * dim]).unwrap();
        split.append(0, 0, &all[4 * dim..], &also[4 * dim..]).unwrap();

        let mut whole = HeadKvCache::new(1, 1, dim, 8);
        whole.append(0, 0, &all, &also).unwrap();

        let (k1, v1, n1) = split.head(0, 0);
        let (k2, v2, n2) = whole.head(0, 0);
        assert_eq!(n1, n2);
        assert_eq!(k1, k2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn earlier_rows_unchanged_by_append() {
        let dim = 2;
        let mut cache = HeadKvCache::new(1, 1, dim, 8);
        let first = [1.0, 2.0, 3.0, 4.0];
        cache.append(0, 0, &first, &first).unwrap();
        let snapshot: Vec<f32> = cache.head(0, 0).0.to_vec();
        cache.append(0, 0, &[9.0, 9.0], &[9.0, 9.0]).unwrap();
        assert_eq!(&cache.head(0, 0).0[..4], snapshot.as_slice());
    }
}
