//! Bags of latent vectors and their padded batch form.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// A non-empty unordered multiset of d-dimensional vectors, stored as the
/// rows of a matrix. Row order is incidental; every consumer must be
/// permutation invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct BagOfVectors {
    rows: Tensor,
}

impl BagOfVectors {
    pub fn new(rows: Tensor) -> Self {
        assert_eq!(rows.rank(), 2, "bag must be a matrix of row vectors");
        assert!(rows.rows() >= 1, "bag must hold at least one vector");
        BagOfVectors { rows }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Self::new(Tensor::from_rows(rows))
    }

    pub fn single(v: Vec<f64>) -> Self {
        Self::from_rows(&[v])
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    #[allow(clippy::len_without_is_empty)] // bags are never empty
    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.rows
    }

    pub fn into_tensor(self) -> Tensor {
        self.rows
    }

    /// The bag with rows rearranged by `perm` (a permutation of 0..len).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.len());
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| self.row(i).to_vec()).collect();
        Self::from_rows(&rows)
    }

    /// First `n` rows as a new bag.
    pub fn prefix(&self, n: usize) -> Self {
        assert!(n >= 1 && n <= self.len(), "prefix {n} of bag sized {}", self.len());
        let rows: Vec<Vec<f64>> = (0..n).map(|i| self.row(i).to_vec()).collect();
        Self::from_rows(&rows)
    }

    pub fn constant(&self, g: &Graph) -> NodeId {
        g.constant(self.rows.clone())
    }
}

/// Several bags padded into one rectangular block, one row mask marking the
/// live rows. Dead rows are storage only: consumers gather live rows per
/// example, so no loss, attention weight, or gradient ever touches padding.
#[derive(Clone, Debug)]
pub struct BatchedBags {
    storage: Tensor,
    sizes: Vec<usize>,
    n_max: usize,
}

impl BatchedBags {
    pub fn batch(bags: &[BagOfVectors]) -> Self {
        assert!(!bags.is_empty(), "cannot batch zero bags");
        let d = bags[0].dim();
        let n_max = bags.iter().map(BagOfVectors::len).max().unwrap();
        let mut data = vec![0.0; bags.len() * n_max * d];
        let mut sizes = Vec::with_capacity(bags.len());
        for (b, bag) in bags.iter().enumerate() {
            assert_eq!(bag.dim(), d, "bags of mixed dimension");
            for i in 0..bag.len() {
                let off = (b * n_max + i) * d;
                data[off..off + d].copy_from_slice(bag.row(i));
            }
            sizes.push(bag.len());
        }
        BatchedBags { storage: Tensor::matrix(bags.len() * n_max, d, data), sizes, n_max }
    }

    pub fn unbatch(&self) -> Vec<BagOfVectors> {
        (0..self.sizes.len())
            .map(|b| {
                let rows: Vec<Vec<f64>> = self
                    .live_rows(b)
                    .map(|r| self.storage.row(r).to_vec())
                    .collect();
                BagOfVectors::from_rows(&rows)
            })
            .collect()
    }

    pub fn batch_size(&self) -> usize {
        self.sizes.len()
    }

    pub fn size_of(&self, b: usize) -> usize {
        self.sizes[b]
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn storage(&self) -> &Tensor {
        &self.storage
    }

    /// Storage row indices holding example `b`'s vectors.
    pub fn live_rows(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.sizes[b]).map(move |i| b * self.n_max + i)
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.storage.rows()];
        for b in 0..self.sizes.len() {
            for r in self.live_rows(b) {
                m[r] = true;
            }
        }
        m
    }

    /// Gathers example `b`'s live rows out of a graph node holding the full
    /// storage block.
    pub fn example_node(&self, g: &Graph, storage_node: NodeId, b: usize) -> NodeId {
        let idx: Vec<usize> = self.live_rows(b).collect();
        g.gather_rows(storage_node, &idx)
    }
}
