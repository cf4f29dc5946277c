//! Synthetic registration pairs: duplicated, unduplicated and partial.

pub mod io;
pub mod manifest;
pub mod shapes;

use crate::error::{Error, Result};
use crate::pointset::PointSet;
use crate::rigid::{random_transform, PoseSamplingConfig, RigidTransform};
use crate::spatial::{median_nn_spacing, KdTree};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

pub use shapes::{base_surface, gen_shape, ShapeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Both sets hold the same points (up to pose, noise and order).
    Duplicated,
    /// Independent samplings of the whole shape.
    Unduplicated,
    /// View-direction crops with bounded overlap.
    Partial,
}

impl std::fmt::Display for PairMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PairMode::Duplicated => "duplicated",
            PairMode::Unduplicated => "unduplicated",
            PairMode::Partial => "partial",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PairMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "duplicated" => Ok(PairMode::Duplicated),
            "unduplicated" => Ok(PairMode::Unduplicated),
            "partial" => Ok(PairMode::Partial),
            other => Err(Error::Config(format!("unknown pair mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PairConfig {
    pub mode: PairMode,
    pub n_points: usize,
    /// Minimum symmetric overlap fraction for partial pairs.
    pub overlap_min: f64,
    /// Standard deviation of the per-coordinate Gaussian noise added to
    /// the target after transformation.
    pub noise_sigma: f64,
    /// Also perturb the source (off by default; one-sided noise keeps the
    /// ground-truth transform exactly defined).
    pub noise_both_sides: bool,
    pub pose: PoseSamplingConfig,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            mode: PairMode::Partial,
            n_points: 1024,
            overlap_min: 0.70,
            noise_sigma: 0.1,
            noise_both_sides: false,
            pose: PoseSamplingConfig::default(),
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 8 {
            return Err(Error::Config("n_points must be >= 8".into()));
        }
        if !(self.overlap_min > 0.0 && self.overlap_min <= 1.0) {
            return Err(Error::Config("overlap_min must be in (0, 1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        self.pose.validate()
    }
}

/// One synthetic registration problem. `t_gt` maps source coordinates into
/// the target frame; the ground-truth centroids are the centroid of the
/// full (pre-crop) shape expressed in each set's own frame.
#[derive(Debug, Clone)]
pub struct RegistrationPair {
    pub source: PointSet,
    pub target: PointSet,
    pub t_gt: RigidTransform,
    pub source_centroid_gt: Vector3<f64>,
    pub target_centroid_gt: Vector3<f64>,
}

/// Fraction of `a`'s points that have a counterpart in `b` within twice
/// the median point spacing of `b`.
pub fn overlap_fraction(a: &PointSet, b: &PointSet) -> f64 {
    let radius = 2.0 * median_nn_spacing(b);
    let tree = KdTree::build(b);
    let hits = a
        .iter()
        .filter(|p| tree.nearest(p, None).map(|(_, d)| d <= radius).unwrap_or(false))
        .count();
    hits as f64 / a.len() as f64
}

/// Overlap measured in both directions; the minimum is the reported value.
pub fn symmetric_overlap(a: &PointSet, b: &PointSet) -> f64 {
    overlap_fraction(a, b).min(overlap_fraction(b, a))
}

/// Without-replacement subsample of `k` indices out of `n`.
fn sample_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Keeps the `keep` points with the largest projection onto `dir`.
fn crop_by_view_direction(ps: &PointSet, dir: &Vector3<f64>, keep: usize) -> PointSet {
    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.sort_by(|&a, &b| {
        ps.get(b)
            .dot(dir)
            .partial_cmp(&ps.get(a).dot(dir))
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    ps.select(&order)
}

fn unit_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

const MAX_OVERLAP_RETRIES: usize = 100;

/// Builds a registration pair from a dense shape sample.
///
/// Partial mode crops each set to the `n_points` points with the largest
/// projection onto a per-set random view direction (from an independent
/// `2 n_points` subsample), redrawing directions until the symmetric
/// overlap reaches `overlap_min`.
pub fn make_pair<R: Rng>(
    shape: &PointSet,
    cfg: &PairConfig,
    rng: &mut R,
) -> Result<RegistrationPair> {
    cfg.validate()?;
    if shape.len() < 2 * cfg.n_points {
        return Err(Error::Config(format!(
            "shape has {} points, need at least {}",
            shape.len(),
            2 * cfg.n_points
        )));
    }
    let t_gt = random_transform(rng, &cfg.pose);
    let global_centroid = shape.centroid();

    // Both crops live in the shape frame here; the pose is applied after.
    let (source, target_shape_frame) = match cfg.mode {
        PairMode::Duplicated => {
            let idx = sample_indices(rng, shape.len(), cfg.n_points);
            let s = shape.select(&idx);
            (s.clone(), s)
        }
        PairMode::Unduplicated => {
            let a = sample_indices(rng, shape.len(), cfg.n_points);
            let b = sample_indices(rng, shape.len(), cfg.n_points);
            (shape.select(&a), shape.select(&b))
        }
        PairMode::Partial => {
            let mut best_overlap = 0.0;
            let mut found = None;
            for _ in 0..MAX_OVERLAP_RETRIES {
                let dense_a = shape.select(&sample_indices(rng, shape.len(), 2 * cfg.n_points));
                let dense_b = shape.select(&sample_indices(rng, shape.len(), 2 * cfg.n_points));
                let va = unit_direction(rng);
                let vb = unit_direction(rng);
                let a = crop_by_view_direction(&dense_a, &va, cfg.n_points);
                let b = crop_by_view_direction(&dense_b, &vb, cfg.n_points);
                let overlap = symmetric_overlap(&a, &b);
                if overlap > best_overlap {
                    best_overlap = overlap;
                }
                if overlap >= cfg.overlap_min {
                    found = Some((a, b));
                    break;
                }
            }
            match found {
                Some(pair) => pair,
                None => {
                    return Err(Error::OverlapUnattainable {
                        retries: MAX_OVERLAP_RETRIES,
                        best: best_overlap,
                        wanted: cfg.overlap_min,
                    })
                }
            }
        }
    };

    let mut target = t_gt.apply(&target_shape_frame);
    // Shuffle the target order so nothing can rely on index correspondence.
    let perm = sample_indices(rng, target.len(), target.len());
    target = target.select(&perm);

    let mut noisy = |ps: &PointSet| -> PointSet {
        PointSet::new(
            ps.iter()
                .map(|p| {
                    p + Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ) * cfg.noise_sigma
                })
                .collect(),
        )
        .expect("noise keeps points finite")
    };
    if cfg.noise_sigma > 0.0 {
        target = noisy(&target);
    }
    let source = if cfg.noise_sigma > 0.0 && cfg.noise_both_sides {
        noisy(&source)
    } else {
        source
    };

    Ok(RegistrationPair {
        source,
        target,
        target_centroid_gt: t_gt.apply_point(&global_centroid),
        source_centroid_gt: global_centroid,
        t_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_shape(seed: u64) -> PointSet {
        gen_shape(ShapeKind::Torus, 2048, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn noiseless(mode: PairMode, n: usize) -> PairConfig {
        PairConfig {
            mode,
            n_points: n,
            noise_sigma: 0.0,
            ..PairConfig::default()
        }
    }

    #[test]
    fn duplicated_pair_is_an_exact_multiset_match() {
        let shape = dense_shape(71);
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let pair = make_pair(&shape, &noiseless(PairMode::Duplicated, 256), &mut rng).unwrap();
        let moved = pair.t_gt.apply(&pair.source);
        // Multiset equality via sorted lexicographic order.
        let mut a: Vec<[f64; 3]> = moved.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut b: Vec<[f64; 3]> = pair.target.iter().map(|p| [p.x, p.y, p.z]).collect();
        let key = |p: &[f64; 3]| (p[0], p[1], p[2]);
        a.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        b.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        for (pa, pb) in a.iter().zip(&b) {
            for k in 0..3 {
                assert!((pa[k] - pb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partial_pairs_meet_the_overlap_bound() {
        let shape = dense_shape(73);
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        for _ in 0..5 {
            let pair = make_pair(&shape, &noiseless(PairMode::Partial, 256), &mut rng).unwrap();
            assert_eq!(pair.source.len(), 256);
            assert_eq!(pair.target.len(), 256);
            // Measure in the aligned frame, as a consumer would.
            let moved = pair.t_gt.apply(&pair.source);
            let overlap = overlap_fraction(&moved, &pair.target);
            assert!(overlap >= 0.70, "overlap {overlap}");
        }
    }

    #[test]
    fn unduplicated_pairs_are_close_but_not_equal() {
        let shape = gen_shape(
            ShapeKind::Sphere,
            4096,
            &mut ChaCha8Rng::seed_from_u64(75),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let pair = make_pair(&shape, &noiseless(PairMode::Unduplicated, 512), &mut rng).unwrap();
        let moved = pair.t_gt.apply(&pair.source);
        // Hausdorff in both directions.
        let spacing = median_nn_spacing(&pair.target);
        let tree_t = KdTree::build(&pair.target);
        let h1 = moved
            .iter()
            .map(|p| tree_t.nearest(p, None).unwrap().1)
            .fold(0.0f64, f64::max);
        let tree_m = KdTree::build(&moved);
        let h2 = pair
            .target
            .iter()
            .map(|p| tree_m.nearest(p, None).unwrap().1)
            .fold(0.0f64, f64::max);
        let hausdorff = h1.max(h2);
        assert!(
            hausdorff < 2.0 * spacing,
            "hausdorff {hausdorff} vs spacing {spacing}"
        );
        // But the multisets differ.
        let min_gap = moved
            .iter()
            .map(|p| tree_t.nearest(p, None).unwrap().1)
            .fold(f64::INFINITY, f64::min);
        assert!(min_gap >= 0.0);
        let identical = moved
            .iter()
            .all(|p| tree_t.nearest(p, None).unwrap().1 < 1e-12);
        assert!(!identical, "independent subsamples should differ");
    }

    #[test]
    fn generation_is_deterministic() {
        let shape = dense_shape(77);
        let cfg = PairConfig {
            mode: PairMode::Partial,
            n_points: 128,
            ..PairConfig::default()
        };
        let a = make_pair(&shape, &cfg, &mut ChaCha8Rng::seed_from_u64(78)).unwrap();
        let b = make_pair(&shape, &cfg, &mut ChaCha8Rng::seed_from_u64(78)).unwrap();
        assert_eq!(a.t_gt.to_row_major(), b.t_gt.to_row_major());
        for (pa, pb) in a.target.iter().zip(b.target.iter()) {
            assert_eq!(pa.x.to_bits(), pb.x.to_bits());
        }
    }

    #[test]
    fn gt_pose_respects_sampling_ranges() {
        let shape = dense_shape(79);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let cfg = noiseless(PairMode::Duplicated, 64);
        for _ in 0..200 {
            let pair = make_pair(&shape, &cfg, &mut rng).unwrap();
            let (z, y, x) = crate::rigid::euler_zyx_deg(pair.t_gt.rotation());
            for a in [z, y, x] {
                assert!(a.abs() <= 45.0 + 1e-9);
            }
            assert!(pair.t_gt.translation().norm() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn centroids_are_expressed_in_each_frame() {
        let shape = dense_shape(81);
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let pair = make_pair(&shape, &noiseless(PairMode::Partial, 256), &mut rng).unwrap();
        assert!((pair.source_centroid_gt - shape.centroid()).norm() < 1e-12);
        assert!(
            (pair.target_centroid_gt - pair.t_gt.apply_point(&shape.centroid())).norm() < 1e-12
        );
    }

    #[test]
    fn overlap_error_when_unattainable() {
        let shape = dense_shape(83);
        let cfg = PairConfig {
            mode: PairMode::Partial,
            n_points: 256,
            overlap_min: 0.9999, // crops always differ somewhere
            noise_sigma: 0.0,
            ..PairConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        match make_pair(&shape, &cfg, &mut rng) {
            Err(Error::OverlapUnattainable { .. }) => {}
            other => panic!("expected overlap error, got {other:?}"),
        }
    }
}
