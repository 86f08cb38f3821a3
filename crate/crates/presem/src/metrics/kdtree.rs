//! Exact nearest-neighbor KD-tree over 3D points.

use nalgebra::Vector3;

struct Node {
    point: u32,
    axis: u8,
    left: u32,
    right: u32,
}

const NONE: u32 = u32::MAX;

pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: u32,
}

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> KdTree {
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points,
            nodes: Vec::new(),
            root: NONE,
        };
        tree.nodes.reserve(tree.points.len());
        let root = tree.split(&mut idx);
        tree.root = root;
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn split(&mut self, idx: &mut [u32]) -> u32 {
        if idx.is_empty() {
            return NONE;
        }
        // Split along the widest axis at the median.
        let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for &i in idx.iter() {
            let p = self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = idx.len() / 2;
        let points = &self.points;
        idx.select_nth_unstable_by(mid, |a, b| {
            points[*a as usize][axis].total_cmp(&points[*b as usize][axis])
        });
        let point = idx[mid];
        let node_id = self.nodes.len() as u32;
        self.nodes.push(Node {
            point,
            axis: axis as u8,
            left: NONE,
            right: NONE,
        });
        let (l, rest) = idx.split_at_mut(mid);
        let r = &mut rest[1..];
        let left = self.split(l);
        let right = self.split(r);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    /// Index and Euclidean distance of the nearest stored point.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        assert!(!self.is_empty(), "nearest on empty tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn search(&self, node: u32, q: &Vector3<f64>, best: &mut (usize, f64)) {
        if node == NONE {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            *best = (n.point as usize, d2);
        }
        let axis = n.axis as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        if delta * delta < best.1 {
            self.search(far, q, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn brute(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for n in [1usize, 2, 3, 17, 200, 2000] {
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let tree = KdTree::build(pts.clone());
            for _ in 0..200 {
                let q = Vector3::new(
                    rng.gen_range(-0.2..1.2),
                    rng.gen_range(-0.2..1.2),
                    rng.gen_range(-0.2..1.2),
                );
                let (bi, bd) = brute(&pts, &q);
                let (ti, td) = tree.nearest(&q);
                assert!((bd - td).abs() < 1e-12, "n={n}: {bd} vs {td}");
                // Index may differ only on exact ties.
                if bi != ti {
                    assert!((pts[bi] - q).norm() - (pts[ti] - q).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn duplicate_points_are_handled() {
        let pts = vec![Vector3::new(0.5, 0.5, 0.5); 50];
        let tree = KdTree::build(pts);
        let (_, d) = tree.nearest(&Vector3::new(0.5, 0.5, 0.5));
        assert_eq!(d, 0.0);
        let (_, d) = tree.nearest(&Vector3::new(1.5, 0.5, 0.5));
        assert!((d - 1.0).abs() < 1e-12);
    }
}
