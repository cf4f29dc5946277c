//! Point-to-point iterative closest point, used both as a classical
//! baseline and as the refinement stage behind the `+icp` method variants.

use crate::error::Result;
use crate::pointset::PointSet;
use crate::rigid::{rotation_angle_deg, weighted_umeyama, RigidTransform};
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop when the parameter change (rotation angle in radians plus
    /// translation norm) falls below this.
    pub convergence_tol: f64,
    /// Correspondences farther than this are dropped.
    pub max_correspondence_dist: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iters: 50,
            convergence_tol: 1e-6,
            max_correspondence_dist: f64::INFINITY,
        }
    }
}

/// How self-matches are treated when querying a set against itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfMatch {
    Allow,
    /// Skip the reference point whose index equals the query's position.
    ExcludeIndex,
}

/// Nearest reference point for every query point, ties toward the lower
/// index. Returns (index, distance) pairs.
pub fn nearest_neighbor(
    query: &PointSet,
    reference: &PointSet,
    self_match: SelfMatch,
) -> Vec<(usize, f64)> {
    let tree = KdTree::build(reference);
    (0..query.len())
        .map(|i| {
            let skip = match self_match {
                SelfMatch::Allow => None,
                SelfMatch::ExcludeIndex => Some(i),
            };
            tree.nearest(&query.get(i), skip)
                .expect("reference set is non-empty")
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Mean squared correspondence residual per iteration, starting at the
    /// initial transform.
    pub residual_trace: Vec<f64>,
    pub iterations: usize,
    /// Set when every correspondence was rejected by the distance gate and
    /// the initial transform was returned unchanged.
    pub all_rejected: bool,
}

/// Refines `t_init` by alternating nearest-neighbor correspondences from
/// the transformed source into the (static) target with a unit-weight SVD
/// solve. The mean squared residual is non-increasing.
pub fn icp_refine(
    src: &PointSet,
    tgt: &PointSet,
    t_init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    let tree = KdTree::build(tgt);
    let gate2 = cfg.max_correspondence_dist * cfg.max_correspondence_dist;

    let correspondences = |t: &RigidTransform| -> (Vec<(usize, usize)>, f64) {
        let mut pairs = Vec::with_capacity(src.len());
        let mut sq_sum = 0.0;
        for i in 0..src.len() {
            let moved = t.apply_point(&src.get(i));
            let (j, d) = tree.nearest(&moved, None).expect("target is non-empty");
            if d * d <= gate2 {
                pairs.push((i, j));
                sq_sum += d * d;
            }
        }
        let residual = if pairs.is_empty() {
            f64::INFINITY
        } else {
            sq_sum / pairs.len() as f64
        };
        (pairs, residual)
    };

    let mut transform = t_init.clone();
    let (mut pairs, mut residual) = correspondences(&transform);
    let mut trace = vec![residual];
    if pairs.is_empty() {
        return Ok(IcpResult {
            transform,
            residual_trace: trace,
            iterations: 0,
            all_rejected: true,
        });
    }

    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let src_pts: Vec<_> = pairs.iter().map(|&(i, _)| src.get(i)).collect();
        let tgt_pts: Vec<_> = pairs.iter().map(|&(_, j)| tgt.get(j)).collect();
        let weights = vec![1.0; pairs.len()];
        let next = match weighted_umeyama(&src_pts, &tgt_pts, &weights) {
            Ok(t) => t,
            // Degenerate correspondence geometry: keep the current estimate.
            Err(_) => break,
        };
        iterations += 1;

        let delta_rot = rotation_angle_deg(transform.rotation(), next.rotation()).to_radians();
        let delta_t = (transform.translation() - next.translation()).norm();
        transform = next;

        let (new_pairs, new_residual) = correspondences(&transform);
        if new_pairs.is_empty() {
            break;
        }
        pairs = new_pairs;
        residual = new_residual;
        trace.push(residual);

        if delta_rot + delta_t < cfg.convergence_tol {
            break;
        }
    }
    let _ = residual;
    Ok(IcpResult {
        transform,
        residual_trace: trace,
        iterations,
        all_rejected: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid::{from_euler_zyx_deg, random_transform, PoseSamplingConfig};
    use nalgebra::Vector3;
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

    #[test]
    fn self_query_modes() {
        let ps = random_cloud(51, 64);
        let with_self = nearest_neighbor(&ps, &ps, SelfMatch::Allow);
        for (i, &(j, d)) in with_self.iter().enumerate() {
            assert_eq!(j, i);
            assert_eq!(d, 0.0);
        }
        let without = nearest_neighbor(&ps, &ps, SelfMatch::ExcludeIndex);
        for (i, &(j, d)) in without.iter().enumerate() {
            assert_ne!(j, i);
            assert!(d > 0.0);
        }
    }

    #[test]
    fn nearest_neighbor_matches_exhaustive_scan() {
        let q = random_cloud(52, 256);
        let r = random_cloud(53, 512);
        let got = nearest_neighbor(&q, &r, SelfMatch::Allow);
        for (i, &(j, d)) in got.iter().enumerate() {
            let mut best = (f64::INFINITY, usize::MAX);
            for k in 0..r.len() {
                let dd = (r.get(k) - q.get(i)).norm_squared();
                if dd < best.0 || (dd == best.0 && k < best.1) {
                    best = (dd, k);
                }
            }
            assert_eq!(j, best.1);
            assert!((d - best.0.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_reference_point_catches_everything() {
        let q = random_cloud(54, 16);
        let r = PointSet::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        for (j, _) in nearest_neighbor(&q, &r, SelfMatch::Allow) {
            assert_eq!(j, 0);
        }
    }

    #[test]
    fn aligned_pair_converges_immediately() {
        let ps = random_cloud(55, 200);
        let res = icp_refine(&ps, &ps, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        assert!(res.residual_trace[0] < 1e-18);
        assert!(
            rotation_angle_deg(res.transform.rotation(), &nalgebra::Matrix3::identity()) < 1e-9
        );
        assert!(res.transform.translation().norm() < 1e-9);
        assert!(res.iterations <= 1);
    }

    #[test]
    fn recovers_small_offset_exactly() {
        let src = random_cloud(56, 300);
        let t_gt = RigidTransform::new(
            from_euler_zyx_deg(5.0, 0.0, 0.0),
            Vector3::new(0.05, 0.0, -0.02),
        )
        .unwrap();
        let tgt = t_gt.apply(&src);
        let res = icp_refine(&src, &tgt, &RigidTransform::identity(), &IcpConfig::default())
            .unwrap();
        assert!(rotation_angle_deg(res.transform.rotation(), t_gt.rotation()) < 0.1);
        assert!((res.transform.translation() - t_gt.translation()).norm() < 1e-3);
    }

    #[test]
    fn residual_trace_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for trial in 0..20 {
            let src = random_cloud(200 + trial, 150);
            let t = random_transform(
                &mut rng,
                &PoseSamplingConfig {
                    euler_range_deg: 15.0,
                    translation_range: 0.2,
                },
            );
            // Partial-ish overlap: drop a third of the target points.
            let keep: Vec<usize> = (0..100).collect();
            let tgt = t.apply(&src).select(&keep);
            let res =
                icp_refine(&src, &tgt, &RigidTransform::identity(), &IcpConfig::default())
                    .unwrap();
            for w in res.residual_trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "residual increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn refusal_when_gate_rejects_everything() {
        let src = random_cloud(58, 32);
        let shift = RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::new(100.0, 0.0, 0.0))
            .unwrap();
        let tgt = shift.apply(&src);
        let cfg = IcpConfig {
            max_correspondence_dist: 0.5,
            ..IcpConfig::default()
        };
        let res = icp_refine(&src, &tgt, &RigidTransform::identity(), &cfg).unwrap();
        assert!(res.all_rejected);
        assert!((res.transform.translation()).norm() < 1e-12);
    }
}
