//! Exact nearest-neighbour search.
//!
//! Every query returns exactly what an exhaustive scan would: candidates are
//! ordered by `(squared distance, index)`, so equal distances resolve to the
//! lowest point index. Subtrees are only pruned when their lower bound is
//! strictly greater than the current worst candidate, which keeps tied points
//! reachable.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Point3;

use crate::cloud::{dist2, SemanticCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    pub d2: f64,
    pub idx: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a borrowed-then-copied point set.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Point3<f64>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn from_cloud(cloud: &SemanticCloud) -> Self {
        Self::new(cloud.points())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (
            self.points[self.order[start]],
            self.points[self.order[start]],
        );
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let spread = hi - lo;
        let axis = spread.imax();
        if spread[axis] == 0.0 {
            // all coincident
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Nearest point index and its squared distance.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = Candidate {
            d2: f64::INFINITY,
            idx: usize::MAX,
        };
        self.nearest_in(0, q, &mut best);
        Some((best.idx, best.d2))
    }

    fn nearest_in(&self, node: usize, q: &Point3<f64>, best: &mut Candidate) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        d2: dist2(q, &self.points[i]),
                        idx: i,
                    };
                    if c < *best {
                        *best = c;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_in(near, q, best);
                if diff * diff <= best.d2 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest indices, ascending by `(distance, index)`.
    pub fn knn(&self, q: &Point3<f64>, k: usize) -> Vec<usize> {
        self.knn_with_dist2(q, k)
            .into_iter()
            .map(|(i, _)| i)
            .collect()
    }

    pub fn knn_with_dist2(&self, q: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_in(0, q, k, &mut heap);
        let mut out = heap.into_sorted_vec();
        out.truncate(k);
        out.into_iter().map(|c| (c.idx, c.d2)).collect()
    }

    fn knn_in(&self, node: usize, q: &Point3<f64>, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        d2: dist2(q, &self.points[i]),
                        idx: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_in(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.knn_in(far, q, k, heap);
                }
            }
        }
    }
}

/// Indices of the `k` nearest points of `cloud` to `query`.
pub fn knn(query: &Point3<f64>, cloud: &SemanticCloud, k: usize) -> Result<Vec<usize>> {
    cloud.require_non_empty("knn")?;
    if k == 0 || k > cloud.len() {
        return Err(Error::precondition(format!(
            "k = {k} must be in 1..={}",
            cloud.len()
        )));
    }
    Ok(KdTree::from_cloud(cloud).knn(query, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Space;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(q: &Point3<f64>, pts: &[Point3<f64>], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (dist2(q, p), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // Grid with many equidistant points; duplicates included.
        let mut pts = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    pts.push(Point3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        pts.extend(pts.clone());
        let tree = KdTree::new(&pts);
        for q in [
            Point3::new(1.5, 1.5, 1.5),
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(2.5, 1.0, 0.5),
        ] {
            for k in [1, 2, 7, 8, 30, 128] {
                assert_eq!(tree.knn(&q, k), brute_knn(&q, &pts, k), "q={q:?} k={k}");
            }
            assert_eq!(tree.nearest(&q).unwrap().0, brute_knn(&q, &pts, 1)[0]);
        }
    }

    #[test]
    fn collinear_example() {
        let pts: Vec<_> = (0..4).map(|x| Point3::new(x as f64, 0.0, 0.0)).collect();
        let c = SemanticCloud::from_points(pts, Space::Nocs).unwrap();
        assert_eq!(knn(&Point3::new(0.6, 0.0, 0.0), &c, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn self_query_returns_own_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..50)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let c = SemanticCloud::from_points(pts.clone(), Space::Nocs).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(knn(p, &c, 1).unwrap(), vec![i]);
        }
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let c = SemanticCloud::from_points(vec![Point3::origin(); 3], Space::Nocs).unwrap();
        assert!(knn(&Point3::origin(), &c, 4).is_err());
        assert!(knn(&Point3::origin(), &c, 0).is_err());
    }

    #[test]
    fn random_clouds_match_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..400);
            let pts: Vec<_> = (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        rng.random::<f64>() * 0.1,
                    )
                })
                .collect();
            let tree = KdTree::new(&pts);
            let q = Point3::new(rng.random(), rng.random(), rng.random());
            let k = rng.random_range(1..=n);
            assert_eq!(tree.knn(&q, k), brute_knn(&q, &pts, k));
        }
    }
}
