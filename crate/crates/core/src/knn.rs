//! Exact k-nearest-neighbor search with a static k-d tree.
//!
//! Results are ordered by `(squared distance, index)`, so equidistant points
//! resolve toward the smaller index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{NpviError, Result};
use crate::kernel::{squared_distance, Points};
use crate::scalar::Scalar;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree over a copy of the input points.
#[derive(Debug, Clone)]
pub struct KdTree<T> {
    dim: usize,
    /// Coordinates reordered so each leaf is contiguous.
    coords: Vec<T>,
    /// `perm[p]` is the original index of the point stored at slot `p`.
    perm: Vec<usize>,
    nodes: Vec<Node<T>>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate<T> {
    d2: T,
    index: usize,
}

impl<T: Scalar> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Candidate<T> {}

impl<T: Scalar> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Distances are finite (checked at build), so partial_cmp never fails.
        self.d2
            .partial_cmp(&other.d2)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}

/// One query result: original index and squared Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    pub index: usize,
    pub dist2: T,
}

impl<T: Scalar> KdTree<T> {
    pub fn build(points: &Points<T>) -> Result<Self> {
        if points.is_empty() {
            return Err(NpviError::input("cannot index an empty point set"));
        }
        if !points.all_finite() {
            return Err(NpviError::input("point coordinates must be finite"));
        }
        let dim = points.dim();
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        build_node(points, &mut perm, 0, &mut nodes);
        let mut coords = Vec::with_capacity(points.coords().len());
        for &i in &perm {
            coords.extend_from_slice(points.point(i));
        }
        Ok(Self {
            dim,
            coords,
            perm,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `k` nearest stored points to `query`, nearest first.
    pub fn nearest(&self, query: &[T], k: usize) -> Vec<Neighbor<T>> {
        self.nearest_filtered(query, k, |_| true)
    }

    /// The `k` nearest stored points whose original index satisfies `accept`.
    pub fn nearest_filtered(
        &self,
        query: &[T],
        k: usize,
        accept: impl Fn(usize) -> bool,
    ) -> Vec<Neighbor<T>> {
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate<T>> = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &accept, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                index: c.index,
                dist2: c.d2,
            })
            .collect()
    }

    fn search(
        &self,
        node: usize,
        query: &[T],
        k: usize,
        accept: &impl Fn(usize) -> bool,
        heap: &mut BinaryHeap<Candidate<T>>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let index = self.perm[slot];
                    if !accept(index) {
                        continue;
                    }
                    let p = &self.coords[slot * self.dim..(slot + 1) * self.dim];
                    let cand = Candidate {
                        d2: squared_distance(query, p),
                        index,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff <= T::zero() {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, k, accept, heap);
                // Ties on the boundary can still hold a smaller index, so only
                // prune when the plane is strictly farther than the worst kept.
                let visit_far = heap.len() < k || diff * diff <= heap.peek().expect("non-empty").d2;
                if visit_far {
                    self.search(far, query, k, accept, heap);
                }
            }
        }
    }
}

fn build_node<T: Scalar>(
    points: &Points<T>,
    perm: &mut [usize],
    offset: usize,
    nodes: &mut Vec<Node<T>>,
) -> usize {
    let id = nodes.len();
    if perm.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + perm.len(),
        });
        return id;
    }
    // Split on the dimension with the widest spread.
    let dim = (0..points.dim())
        .map(|d| {
            let (lo, hi) = perm
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &i| {
                    let v = points.point(i)[d];
                    (lo.min(v), hi.max(v))
                });
            (d, hi - lo)
        })
        .fold((0, T::neg_infinity()), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
        .0;
    let mid = perm.len() / 2;
    perm.select_nth_unstable_by(mid, |&a, &b| {
        points.point(a)[dim]
            .partial_cmp(&points.point(b)[dim])
            .unwrap_or(Ordering::Equal)
    });
    let value = points.point(perm[mid])[dim];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (lo, hi) = perm.split_at_mut(mid);
    let left = build_node(points, lo, offset, nodes);
    let right = build_node(points, hi, offset + mid, nodes);
    nodes[id] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    id
}

/// Linear scan reference, ordered like the tree results.
pub fn brute_force_nearest<T: Scalar>(
    points: &Points<T>,
    query: &[T],
    k: usize,
    accept: impl Fn(usize) -> bool,
) -> Vec<Neighbor<T>> {
    let mut all: Vec<Candidate<T>> = (0..points.len())
        .filter(|&i| accept(i))
        .map(|i| Candidate {
            d2: squared_distance(query, points.point(i)),
            index: i,
        })
        .collect();
    all.sort();
    all.truncate(k);
    all.into_iter()
        .map(|c| Neighbor {
            index: c.index,
            dist2: c.d2,
        })
        .collect()
}
