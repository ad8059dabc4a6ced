//! Static 3-d tree for exact nearest-neighbor queries.
//!
//! Ties are always broken toward the lower point index so that query
//! results are deterministic.

use crate::math::Vec3;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Candidate ordered by `(squared distance, index)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len(), 0);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the widest axis
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        if extent[axis] <= 0.0 || depth > 64 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid, depth + 1);
        let right = self.build(mid, end, depth + 1);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Nearest point to `query`, as `(index, distance)`.
    pub fn nearest(&self, query: &Vec3) -> Option<(usize, f64)> {
        self.nearest_filtered(query, |_| true)
    }

    /// Nearest point whose index passes `keep`.
    pub fn nearest_filtered<F: Fn(usize) -> bool>(&self, query: &Vec3, keep: F) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = Candidate { dist2: f64::INFINITY, index: usize::MAX };
        self.nearest_rec(0, query, &keep, &mut best);
        (best.index != usize::MAX).then(|| (best.index, best.dist2.sqrt()))
    }

    fn nearest_rec<F: Fn(usize) -> bool>(&self, node: usize, q: &Vec3, keep: &F, best: &mut Candidate) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if !keep(i) {
                        continue;
                    }
                    let c = Candidate { dist2: (self.points[i] - q).norm_squared(), index: i };
                    if c < *best {
                        *best = c;
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, keep, best);
                if diff * diff <= best.dist2 {
                    self.nearest_rec(far, q, keep, best);
                }
            }
        }
    }

    /// The `k` nearest points to `query`, sorted by `(distance, index)`.
    /// `exclude` removes one index (typically the query point itself).
    pub fn k_nearest(&self, query: &Vec3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2.sqrt())).collect()
    }

    fn knn_rec(&self, node: usize, q: &Vec3, k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate { dist2: (self.points[i] - q).norm_squared(), index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, exclude, heap);
                let bound = if heap.len() < k { f64::INFINITY } else { heap.peek().unwrap().dist2 };
                if diff * diff <= bound {
                    self.knn_rec(far, q, k, exclude, heap);
                }
            }
        }
    }
}
