//! Nearest-neighbour queries over 3D point clouds.

use nalgebra::Vector3;
use rstar::primitives::GeomWithData;
use rstar::RTree;

type Entry = GeomWithData<[f64; 3], usize>;

pub struct KdTree {
    tree: RTree<Entry>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let entries = points
            .iter()
            .enumerate()
            .map(|(i, p)| Entry::new([p.x, p.y, p.z], i))
            .collect();
        Self {
            tree: RTree::bulk_load(entries),
        }
    }

    pub fn len(&self) -> usize {
        self.tree.size()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.size() == 0
    }

    /// Index and squared distance of the closest point. Panics on an empty tree.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let e = self.tree.nearest_neighbor(&[q.x, q.y, q.z]).expect("nearest on empty tree");
        let p = e.geom();
        let d2 = (p[0] - q.x).powi(2) + (p[1] - q.y).powi(2) + (p[2] - q.z).powi(2);
        (e.data, d2)
    }

    /// Indices of the `k` closest points, nearest first.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<usize> {
        self.tree
            .nearest_neighbor_iter(&[q.x, q.y, q.z])
            .take(k)
            .map(|e| e.data)
            .collect()
    }
}
