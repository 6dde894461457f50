//! Exact Euclidean nearest-neighbour search.
//!
//! Two interchangeable backends: a linear scan and a kd-tree with
//! bounding-box pruning. Both rank neighbours by `(squared distance, index)`,
//! so ties resolve to the lowest reference index and the two backends agree
//! exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    BruteForce,
    KdTree,
    /// kd-tree in low dimension, linear scan otherwise.
    #[default]
    Auto,
}

impl Backend {
    fn resolve(self, dim: usize) -> Backend {
        match self {
            Backend::Auto if dim <= 16 => Backend::KdTree,
            Backend::Auto => Backend::BruteForce,
            b => b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Bounded max-heap keeping the `k` best neighbours.
struct Best {
    k: usize,
    heap: BinaryHeap<Neighbor>,
}

impl Best {
    fn new(k: usize) -> Self {
        Best {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, n: Neighbor) {
        if self.heap.len() < self.k {
            self.heap.push(n);
        } else if let Some(worst) = self.heap.peek() {
            if n < *worst {
                self.heap.pop();
                self.heap.push(n);
            }
        }
    }

    fn bound(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map_or(f64::INFINITY, |n| n.dist2)
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec()
    }
}

const LEAF_SIZE: usize = 16;

#[derive(Debug)]
struct Node {
    start: usize,
    end: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    children: Option<(usize, usize)>,
}

#[derive(Debug)]
struct KdTree {
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    fn build(data: &[f64], dim: usize, n: usize) -> Self {
        let mut tree = KdTree {
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build_node(data, dim, 0, n);
        }
        tree
    }

    fn build_node(&mut self, data: &[f64], dim: usize, start: usize, end: usize) -> usize {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &self.order[start..end] {
            let p = &data[i * dim..(i + 1) * dim];
            for j in 0..dim {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        let id = self.nodes.len();
        let spread = |j: usize| hi[j] - lo[j];
        let axis = (0..dim).max_by(|&a, &b| spread(a).total_cmp(&spread(b)).then(b.cmp(&a)));
        self.nodes.push(Node {
            start,
            end,
            lo,
            hi,
            children: None,
        });
        let Some(axis) = axis else { return id };
        if end - start <= LEAF_SIZE || self.nodes[id].hi[axis] <= self.nodes[id].lo[axis] {
            return id;
        }
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data[a * dim + axis]
                .total_cmp(&data[b * dim + axis])
                .then(a.cmp(&b))
        });
        let left = self.build_node(data, dim, start, mid);
        let right = self.build_node(data, dim, mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    /// Lower bound on the squared distance from `q` to any point in `node`.
    /// Computed with the same per-axis arithmetic as the true distance so it
    /// never exceeds it after rounding.
    fn min_dist2(node: &Node, q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&x, &lo), &hi) in q.iter().zip(&node.lo).zip(&node.hi) {
            let d = if x < lo {
                lo - x
            } else if x > hi {
                x - hi
            } else {
                0.0
            };
            acc += d * d;
        }
        acc
    }
}

/// Immutable neighbour index over `n` points of dimension `dim`.
#[derive(Debug)]
pub struct KnnIndex {
    data: Vec<f64>,
    dim: usize,
    n: usize,
    tree: Option<KdTree>,
}

impl KnnIndex {
    pub fn build(data: Vec<f64>, dim: usize, backend: Backend) -> Self {
        let n = if dim == 0 { 0 } else { data.len() / dim };
        let tree = match backend.resolve(dim) {
            Backend::KdTree => Some(KdTree::build(&data, dim, n)),
            _ => None,
        };
        KnnIndex { data, dim, n, tree }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backend(&self) -> Backend {
        if self.tree.is_some() {
            Backend::KdTree
        } else {
            Backend::BruteForce
        }
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The `k` nearest points to `query`, nearest first, optionally skipping
    /// one reference index (the query itself).
    pub fn k_nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut best = Best::new(k);
        if k == 0 {
            return Vec::new();
        }
        match &self.tree {
            None => {
                for i in 0..self.n {
                    if Some(i) != exclude {
                        best.offer(Neighbor {
                            index: i,
                            dist2: squared_distance(query, self.point(i)),
                        });
                    }
                }
            }
            Some(tree) if !tree.nodes.is_empty() => self.search(tree, 0, query, exclude, &mut best),
            Some(_) => {}
        }
        best.into_sorted()
    }

    fn search(&self, tree: &KdTree, node: usize, query: &[f64], exclude: Option<usize>, best: &mut Best) {
        let nd = &tree.nodes[node];
        match nd.children {
            None => {
                for &i in &tree.order[nd.start..nd.end] {
                    if Some(i) != exclude {
                        best.offer(Neighbor {
                            index: i,
                            dist2: squared_distance(query, self.point(i)),
                        });
                    }
                }
            }
            Some((l, r)) => {
                let dl = KdTree::min_dist2(&tree.nodes[l], query);
                let dr = KdTree::min_dist2(&tree.nodes[r], query);
                let (first, df, second, ds) = if dl <= dr { (l, dl, r, dr) } else { (r, dr, l, dl) };
                if df <= best.bound() {
                    self.search(tree, first, query, exclude, best);
                }
                if ds <= best.bound() {
                    self.search(tree, second, query, exclude, best);
                }
            }
        }
    }

    /// Number of points with squared distance `<= radius2` from `query`.
    pub fn count_within(&self, query: &[f64], radius2: f64, exclude: Option<usize>) -> usize {
        match &self.tree {
            None => (0..self.n)
                .filter(|&i| Some(i) != exclude && squared_distance(query, self.point(i)) <= radius2)
                .count(),
            Some(tree) if !tree.nodes.is_empty() => self.count_node(tree, 0, query, radius2, exclude),
            Some(_) => 0,
        }
    }

    fn count_node(&self, tree: &KdTree, node: usize, query: &[f64], radius2: f64, exclude: Option<usize>) -> usize {
        let nd = &tree.nodes[node];
        if KdTree::min_dist2(nd, query) > radius2 {
            return 0;
        }
        match nd.children {
            None => tree.order[nd.start..nd.end]
                .iter()
                .filter(|&&i| Some(i) != exclude && squared_distance(query, self.point(i)) <= radius2)
                .count(),
            Some((l, r)) => {
                self.count_node(tree, l, query, radius2, exclude) + self.count_node(tree, r, query, radius2, exclude)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_break_on_lowest_index() {
        let data = vec![1.0, -1.0, 1.0, 0.5];
        for backend in [Backend::BruteForce, Backend::KdTree] {
            let idx = KnnIndex::build(data.clone(), 1, backend);
            let nn = idx.k_nearest(&[0.0], 3, None);
            let order: Vec<_> = nn.iter().map(|n| n.index).collect();
            assert_eq!(order, vec![3, 0, 1]);
            assert_eq!(idx.count_within(&[0.0], 1.0, None), 4);
            assert_eq!(idx.count_within(&[0.0], 1.0, Some(3)), 3);
        }
    }

    #[test]
    fn exclude_skips_self() {
        let idx = KnnIndex::build(vec![0.0, 0.0, 3.0, 4.0], 2, Backend::KdTree);
        let nn = idx.k_nearest(&[0.0, 0.0], 1, Some(0));
        assert_eq!(nn[0].index, 1);
        assert_eq!(nn[0].dist2, 25.0);
        assert!(idx.k_nearest(&[0.0, 0.0], 0, None).is_empty());
    }

    proptest! {
        #[test]
        fn backends_agree(
            dim in 1usize..5,
            raw in prop::collection::vec(-3i32..3, 4..400),
            k in 1usize..8,
            q in prop::collection::vec(-3i32..3, 4),
        ) {
            // Integer grid coordinates produce many exact ties.
            let n = raw.len() / dim;
            let data: Vec<f64> = raw[..n * dim].iter().map(|&v| v as f64 * 0.5).collect();
            let query: Vec<f64> = q.iter().cycle().take(dim).map(|&v| v as f64 * 0.5).collect();
            let brute = KnnIndex::build(data.clone(), dim, Backend::BruteForce);
            let tree = KnnIndex::build(data, dim, Backend::KdTree);
            prop_assert_eq!(brute.k_nearest(&query, k, Some(0)), tree.k_nearest(&query, k, Some(0)));
            for r in [0.0, 0.25, 1.0, 4.0] {
                prop_assert_eq!(brute.count_within(&query, r, None), tree.count_within(&query, r, None));
            }
        }
    }
}
