use nalgebra::Vector3;

use super::{dist_sq, PointCloud};

const LEAF_SIZE: usize = 8;

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

/// Exact nearest-neighbour index over a point cloud.
///
/// Queries return the same point a brute-force scan would, with ties broken
/// towards the lowest original index.
#[derive(Debug, Clone)]
pub struct NnIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl NnIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        let points = cloud.points().to_vec();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(&points, &mut order, 0, &mut nodes);
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    /// `(index, squared distance)` of the nearest indexed point to `query`.
    pub fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, query, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Vector3<f64>, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist_sq(q, &self.points[i]);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
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
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // `<=` keeps equal-distance candidates reachable for the
                // lowest-index tie-break.
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build_node(points: &[Vector3<f64>], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];

    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (lhs, rhs) = order.split_at_mut(mid);
    let left = build_node(points, lhs, offset, nodes);
    let right = build_node(points, rhs, offset + mid, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = dist_sq(q, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &n in &[1usize, 7, 100, 4096] {
            let pts: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let index = NnIndex::build(&PointCloud::new(pts.clone()).unwrap());
            for _ in 0..1000 {
                let q = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
                assert_eq!(index.nearest(&q), brute(&pts, &q));
            }
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // A lattice with duplicates: many equidistant candidates.
        let mut pts = Vec::new();
        for _ in 0..3 {
            for x in 0..4 {
                for y in 0..4 {
                    pts.push(Vector3::new(x as f64, y as f64, 0.0));
                }
            }
        }
        let index = NnIndex::build(&PointCloud::new(pts.clone()).unwrap());
        for x in 0..7 {
            for y in 0..7 {
                let q = Vector3::new(0.5 * x as f64, 0.5 * y as f64, 0.25);
                assert_eq!(index.nearest(&q), brute(&pts, &q));
            }
        }
    }
}
