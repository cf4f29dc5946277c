//! Balanced kd-tree for exact nearest-neighbor queries.
//!
//! Ties on distance break toward the lower point index, which keeps every
//! consumer (feature neighborhoods, ICP correspondences, overlap checks)
//! deterministic.

use crate::pointset::PointSet;
use nalgebra::Vector3;

struct KdNode {
    /// Index into the original point list.
    point: usize,
    axis: usize,
    left: Option<Box<KdNode>>,
    right: Option<Box<KdNode>>,
}

pub struct KdTree {
    points: Vec<Vector3<f64>>,
    root: Option<Box<KdNode>>,
}

/// Orders candidates by squared distance, then index.
#[inline]
fn better(d_new: f64, i_new: usize, d_old: f64, i_old: usize) -> bool {
    d_new < d_old || (d_new == d_old && i_new < i_old)
}

impl KdTree {
    pub fn build(ps: &PointSet) -> Self {
        let points: Vec<Vector3<f64>> = ps.points().to_vec();
        let mut indices: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(&points, &mut indices);
        KdTree { points, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(points: &[Vector3<f64>], indices: &mut [usize]) -> Option<Box<KdNode>> {
        if indices.is_empty() {
            return None;
        }
        // Split along the widest axis of this subset's bounding box.
        let mut lo = points[indices[0]];
        let mut hi = points[indices[0]];
        for &i in indices.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = indices[mid];
        let (left_slice, rest) = indices.split_at_mut(mid);
        let right_slice = &mut rest[1..];
        Some(Box::new(KdNode {
            point,
            axis,
            left: Self::build_node(points, left_slice),
            right: Self::build_node(points, right_slice),
        }))
    }

    /// Exact nearest neighbor; `skip` excludes one point index (used for
    /// self-queries). Returns (index, distance).
    pub fn nearest(&self, query: &Vector3<f64>, skip: Option<usize>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        if let Some(root) = &self.root {
            self.search_one(root, query, skip, &mut best);
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    fn search_one(
        &self,
        node: &KdNode,
        query: &Vector3<f64>,
        skip: Option<usize>,
        best: &mut Option<(usize, f64)>,
    ) {
        let p = &self.points[node.point];
        let d2 = (p - query).norm_squared();
        if Some(node.point) != skip {
            match best {
                None => *best = Some((node.point, d2)),
                Some((bi, bd)) => {
                    if better(d2, node.point, *bd, *bi) {
                        *best = Some((node.point, d2));
                    }
                }
            }
        }
        let delta = query[node.axis] - p[node.axis];
        let (near, far) = if delta < 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            self.search_one(n, query, skip, best);
        }
        // Non-strict bound so equal-distance lower-index candidates on the
        // far side are still visited.
        let need_far = match best {
            None => true,
            Some((_, bd)) => delta * delta <= *bd,
        };
        if need_far {
            if let Some(f) = far {
                self.search_one(f, query, skip, best);
            }
        }
    }

    /// The k nearest neighbors sorted ascending by (distance, index).
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if let Some(root) = &self.root {
            self.search_k(root, query, k, skip, &mut best);
        }
        for e in best.iter_mut() {
            e.1 = e.1.sqrt();
        }
        best
    }

    fn search_k(
        &self,
        node: &KdNode,
        query: &Vector3<f64>,
        k: usize,
        skip: Option<usize>,
        best: &mut Vec<(usize, f64)>,
    ) {
        let p = &self.points[node.point];
        let d2 = (p - query).norm_squared();
        if Some(node.point) != skip {
            let pos = best
                .binary_search_by(|&(i, d)| {
                    d.partial_cmp(&d2).unwrap().then(i.cmp(&node.point))
                })
                .unwrap_or_else(|e| e);
            if pos < k {
                best.insert(pos, (node.point, d2));
                if best.len() > k {
                    best.pop();
                }
            }
        }
        let delta = query[node.axis] - p[node.axis];
        let (near, far) = if delta < 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            self.search_k(n, query, k, skip, best);
        }
        let need_far = best.len() < k || delta * delta <= best.last().unwrap().1;
        if need_far {
            if let Some(f) = far {
                self.search_k(f, query, k, skip, best);
            }
        }
    }
}

/// Median nearest-neighbor distance within a set; the spacing scale used
/// by overlap measurement.
pub fn median_nn_spacing(ps: &PointSet) -> f64 {
    let tree = KdTree::build(ps);
    let mut dists: Vec<f64> = (0..ps.len())
        .filter_map(|i| tree.nearest(&ps.get(i), Some(i)).map(|(_, d)| d))
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if dists.is_empty() {
        0.0
    } else {
        dists[dists.len() / 2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    /// Exhaustive scan with the same (distance, index) ordering.
    fn brute_k_nearest(
        ps: &PointSet,
        query: &Vector3<f64>,
        k: usize,
        skip: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..ps.len())
            .filter(|&i| Some(i) != skip)
            .map(|i| (i, (ps.get(i) - query).norm_squared()))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    #[test]
    fn matches_exhaustive_scan() {
        let ps = random_cloud(11, 512);
        let tree = KdTree::build(&ps);
        let queries = random_cloud(12, 64);
        for q in queries.iter() {
            assert_eq!(
                tree.k_nearest(q, 5, None),
                brute_k_nearest(&ps, q, 5, None)
            );
            let (bi, bd) = tree.nearest(q, None).unwrap();
            let want = brute_k_nearest(&ps, q, 1, None)[0];
            assert_eq!((bi, bd), want);
        }
    }

    #[test]
    fn self_query_with_skip_finds_other_points() {
        let ps = random_cloud(13, 128);
        let tree = KdTree::build(&ps);
        for i in 0..ps.len() {
            let (j, d) = tree.nearest(&ps.get(i), Some(i)).unwrap();
            assert_ne!(j, i);
            assert!(d > 0.0);
        }
    }

    #[test]
    fn duplicate_points_tie_break_to_lower_index() {
        let ps = PointSet::from_rows(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
        ])
        .unwrap();
        let tree = KdTree::build(&ps);
        let (i, _) = tree.nearest(&ps.get(0), Some(0)).unwrap();
        assert_eq!(i, 1);
        let knn = tree.k_nearest(&ps.get(3), 2, Some(3));
        assert_eq!(knn[0].0, 1);
        assert_eq!(knn[1].0, 2);
    }

    #[test]
    fn single_point_tree() {
        let ps = PointSet::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let tree = KdTree::build(&ps);
        let (i, d) = tree.nearest(&Vector3::new(0.0, 0.0, 0.0), None).unwrap();
        assert_eq!(i, 0);
        assert!((d - 14f64.sqrt()).abs() < 1e-12);
    }
}
