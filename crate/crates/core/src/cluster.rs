//! Exact finite-n configuration: a multiset of cluster sizes behind a weighted index.

use crate::error::{Error, Result};
use crate::fenwick::FenwickTree;

/// Cluster sizes of an `n`-vertex configuration.
///
/// Each live cluster occupies one slot of a Fenwick tree whose weight is its
/// size, so a uniformly random vertex maps to its cluster in `O(log n)`.
/// Slots vacated by merges go on a free list and are reused by burns; at most
/// `n` clusters exist, so `n` slots always suffice.
#[derive(Clone, Debug)]
pub struct ClusterState {
    n: u64,
    index: FenwickTree,
    free: Vec<usize>,
    /// `counts[k]` = number of clusters of size `k`.
    counts: Vec<u64>,
    clusters: usize,
    max_size: usize,
    square_sum: u64,
}

/// Handle to a live cluster.
pub type Slot = usize;

impl ClusterState {
    /// `n` singletons.
    pub fn monodisperse(n: u64) -> Self {
        Self::from_sizes(n, &vec![1; n as usize]).expect("monodisperse state is valid")
    }

    pub fn from_sizes(n: u64, sizes: &[usize]) -> Result<Self> {
        if sizes.contains(&0) {
            return Err(Error::StateCorruption("cluster of size 0".into()));
        }
        let sum: u64 = sizes.iter().map(|&s| s as u64).sum();
        if sum != n {
            return Err(Error::StateCorruption(format!("sizes sum to {sum}, expected {n}")));
        }
        let cap = n as usize;
        let mut weights = vec![0u64; cap];
        for (w, &s) in weights.iter_mut().zip(sizes) {
            *w = s as u64;
        }
        let mut counts = vec![0u64; cap + 1];
        for &s in sizes {
            counts[s] += 1;
        }
        Ok(Self {
            n,
            index: FenwickTree::from_weights(&weights),
            free: (sizes.len()..cap).rev().collect(),
            counts,
            clusters: sizes.len(),
            max_size: sizes.iter().copied().max().unwrap_or(0),
            square_sum: sizes.iter().map(|&s| (s as u64) * (s as u64)).sum(),
        })
    }

    /// Configuration with exact vertex masses `V_k` (index 0 holds `V_1`).
    pub fn from_masses(masses: &[u64]) -> Result<Self> {
        let mut sizes = Vec::new();
        for (i, &m) in masses.iter().enumerate() {
            let k = i + 1;
            if m % k as u64 != 0 {
                return Err(Error::StateCorruption(format!("V_{k} = {m} is not a multiple of {k}")));
            }
            sizes.extend(std::iter::repeat_n(k, (m / k as u64) as usize));
        }
        Self::from_sizes(masses.iter().sum(), &sizes)
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters
    }

    pub fn max_cluster(&self) -> usize {
        self.max_size
    }

    pub fn size(&self, slot: Slot) -> usize {
        self.index.weight(slot) as usize
    }

    /// Number of clusters of size `k`.
    pub fn count(&self, k: usize) -> u64 {
        self.counts.get(k).copied().unwrap_or(0)
    }

    /// Cluster holding vertex number `u ∈ [0, n)` in slot order.
    pub fn cluster_of_vertex(&self, u: u64) -> Slot {
        self.index.find(u)
    }

    /// `Σ_k k·V_k = Σ_clusters s²`: ordered vertex pairs sharing a cluster (including `u = v`).
    pub fn same_cluster_pairs(&self) -> u64 {
        self.square_sum
    }

    /// Exact vertex masses `V_k = k · #clusters(k)` up to the largest cluster.
    pub fn masses(&self) -> Vec<u64> {
        (1..=self.max_size.max(1)).map(|k| k as u64 * self.count(k)).collect()
    }

    /// Live cluster sizes in slot order.
    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.index.weights().iter().filter(|&&w| w > 0).map(|&w| w as usize)
    }

    /// Joins the clusters in slots `a` and `b` into `a`; returns the new size.
    pub fn merge(&mut self, a: Slot, b: Slot) -> usize {
        debug_assert_ne!(a, b);
        let sa = self.size(a);
        let sb = self.size(b);
        let s = sa + sb;
        self.counts[sa] -= 1;
        self.counts[sb] -= 1;
        self.counts[s] += 1;
        self.index.set(a, s as u64);
        self.index.set(b, 0);
        self.free.push(b);
        self.clusters -= 1;
        self.square_sum += 2 * (sa as u64) * (sb as u64);
        if s > self.max_size {
            self.max_size = s;
        }
        s
    }

    /// Breaks the cluster in `slot` into singletons; returns its former size.
    pub fn shatter(&mut self, slot: Slot) -> usize {
        let k = self.size(slot);
        if k <= 1 {
            return k;
        }
        self.counts[k] -= 1;
        self.counts[1] += k as u64;
        self.index.set(slot, 1);
        for _ in 1..k {
            let s = self.free.pop().expect("free slot available for every vertex");
            self.index.set(s, 1);
        }
        self.clusters += k - 1;
        self.square_sum -= (k as u64) * (k as u64) - k as u64;
        while self.max_size > 1 && self.counts[self.max_size] == 0 {
            self.max_size -= 1;
        }
        k
    }

    /// Full consistency check of sizes, counts and index.
    pub fn validate(&self) -> Result<()> {
        let sizes: Vec<usize> = self.sizes().collect();
        let sum: u64 = sizes.iter().map(|&s| s as u64).sum();
        if sum != self.n || self.index.total() != self.n {
            return Err(Error::StateCorruption(format!("mass {sum} != n = {}", self.n)));
        }
        if sizes.len() != self.clusters {
            return Err(Error::StateCorruption("cluster count drifted".into()));
        }
        let mut counts = vec![0u64; self.counts.len()];
        for &s in &sizes {
            counts[s] += 1;
        }
        if counts != self.counts {
            return Err(Error::StateCorruption("size histogram drifted".into()));
        }
        if sizes.iter().copied().max().unwrap_or(0) != self.max_size {
            return Err(Error::StateCorruption("max cluster drifted".into()));
        }
        if sizes.iter().map(|&s| (s as u64) * (s as u64)).sum::<u64>() != self.square_sum {
            return Err(Error::StateCorruption("square sum drifted".into()));
        }
        if self.free.len() + self.clusters != self.index.len() {
            return Err(Error::StateCorruption("free list out of sync".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_and_shatter_keep_mass() {
        let mut s = ClusterState::monodisperse(6);
        let a = s.cluster_of_vertex(0);
        let b = s.cluster_of_vertex(5);
        assert_eq!(s.merge(a, b), 2);
        let c = s.cluster_of_vertex(3);
        assert_eq!(s.merge(a, c), 3);
        s.validate().unwrap();
        assert_eq!(s.masses(), vec![3, 0, 3]);
        assert_eq!(s.same_cluster_pairs(), 3 + 9);
        assert_eq!(s.shatter(a), 3);
        s.validate().unwrap();
        assert_eq!(s.masses(), vec![6]);
        assert_eq!(s.cluster_count(), 6);
        assert_eq!(s.max_cluster(), 1);
    }

    #[test]
    fn from_masses_round_trips() {
        let s = ClusterState::from_masses(&[2, 4, 0, 4]).unwrap();
        assert_eq!(s.n(), 10);
        assert_eq!(s.masses(), vec![2, 4, 0, 4]);
        s.validate().unwrap();
        assert!(ClusterState::from_masses(&[1, 3]).is_err());
    }
}
