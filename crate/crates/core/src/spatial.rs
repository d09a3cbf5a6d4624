//! Static 3D KD-tree for nearest-neighbor queries.
//!
//! Coplanar point sets (samples of an axis-aligned plane) are common here, so nodes split on
//! the widest axis and leaves tolerate any number of duplicates.

use std::cmp::Ordering;

const LEAF: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Original index of each (reordered) point.
    index: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(points, &mut order, 0, points.len(), &mut nodes);
        }
        KdTree {
            points: order.iter().map(|&i| points[i]).collect(),
            index: order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// (original index, squared distance) of the closest point; ties go to the smaller index.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(usize, f64)> {
        self.k_nearest(q, 1).into_iter().next()
    }

    /// Up to `k` closest points sorted by (squared distance, index).
    pub fn k_nearest(&self, q: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, q, k, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, best: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let d = dist2(&self.points[i], q);
                    let cand = (self.index[i], d);
                    if best.len() < k || less(&cand, best.last().unwrap()) {
                        let pos = best.partition_point(|b| less(b, &cand));
                        best.insert(pos, cand);
                        best.truncate(k);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                if best.len() < k || diff * diff <= best.last().unwrap().1 {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

fn less(a: &(usize, f64), b: &(usize, f64)) -> bool {
    a.1 < b.1 || (a.1 == b.1 && a.0 < b.0)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn build(points: &[[f64; 3]], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    if end - start <= LEAF || hi[axis] - lo[axis] == 0.0 {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].partial_cmp(&points[b][axis]).unwrap_or(Ordering::Equal));
    let value = points[slice[mid]][axis];
    nodes.push(Node::Leaf { start, end });
    // points equal to `value` may sit on both sides; the search treats the plane as inclusive
    let left = build(points, order, start, start + mid, nodes);
    let right = build(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}
