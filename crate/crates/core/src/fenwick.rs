//! Binary indexed tree over non-negative integer slot weights.

/// Prefix-sum tree supporting point updates and weighted slot lookup in `O(log n)`.
#[derive(Clone, Debug)]
pub struct FenwickTree {
    tree: Vec<u64>,
    weights: Vec<u64>,
    total: u64,
    top: usize,
}

impl FenwickTree {
    pub fn with_capacity(len: usize) -> Self {
        Self::from_weights(&vec![0; len])
    }

    /// Builds the tree in linear time.
    pub fn from_weights(weights: &[u64]) -> Self {
        let len = weights.len();
        let mut tree = vec![0u64; len + 1];
        tree[1..].copy_from_slice(weights);
        for i in 1..=len {
            let parent = i + (i & i.wrapping_neg());
            if parent <= len {
                tree[parent] += tree[i];
            }
        }
        let top = if len == 0 { 0 } else { 1 << (usize::BITS - 1 - len.leading_zeros()) };
        Self { tree, weights: weights.to_vec(), total: weights.iter().sum(), top }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn weight(&self, slot: usize) -> u64 {
        self.weights[slot]
    }

    pub fn weights(&self) -> &[u64] {
        &self.weights
    }

    pub fn set(&mut self, slot: usize, weight: u64) {
        let old = self.weights[slot];
        if weight == old {
            return;
        }
        self.weights[slot] = weight;
        self.total = self.total - old + weight;
        let mut i = slot + 1;
        if weight > old {
            let d = weight - old;
            while i < self.tree.len() {
                self.tree[i] += d;
                i += i & i.wrapping_neg();
            }
        } else {
            let d = old - weight;
            while i < self.tree.len() {
                self.tree[i] -= d;
                i += i & i.wrapping_neg();
            }
        }
    }

    /// Sum of weights of slots `0..end`.
    pub fn prefix(&self, end: usize) -> u64 {
        let mut i = end;
        let mut acc = 0;
        while i > 0 {
            acc += self.tree[i];
            i &= i - 1;
        }
        acc
    }

    /// Slot containing unit `target`, i.e. the unique `s` with
    /// `prefix(s) ≤ target < prefix(s + 1)`. Requires `target < total()`.
    pub fn find(&self, target: u64) -> usize {
        debug_assert!(target < self.total);
        let mut pos = 0usize;
        let mut rem = target;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next < self.tree.len() && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}
