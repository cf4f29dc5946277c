//! Point sets and unit-cube normalization.

use crate::error::{Error, Result};
use nalgebra::Vector3;

/// An ordered collection of 3-D points. Non-empty, all coordinates finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Vector3<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point set must be non-empty".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "point {i} has non-finite coordinates"
                )));
            }
        }
        Ok(PointSet { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Vector3<f64> {
        self.points[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector3<f64>> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in &self.points {
            c += p;
        }
        c / self.points.len() as f64
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Selects a subset by index. Indices must be in range.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        PointSet {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Flat row-major coordinates, useful for tensor input.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * 3);
        for p in &self.points {
            out.extend_from_slice(&[p.x, p.y, p.z]);
        }
        out
    }
}

/// Uniform (aspect-preserving) rescale of the bounding box into `[-1,1]^3`,
/// centered at the origin. Returns the normalized set plus the `scale` and
/// `offset` such that `normalized ~ (original - offset) * scale`.
///
/// After normalization every coordinate lies in `[-1, 1]` and the largest
/// one attains magnitude exactly 1.
pub fn normalize_to_unit_cube(ps: &PointSet) -> Result<(PointSet, f64, Vector3<f64>)> {
    if ps.len() < 2 {
        return Err(Error::DegenerateGeometry(
            "normalization needs at least 2 points".into(),
        ));
    }
    let (lo, hi) = ps.bounding_box();
    let center = (lo + hi) * 0.5;
    let half = (hi - lo) * 0.5;
    let h = half.x.max(half.y).max(half.z);
    if h <= 0.0 {
        return Err(Error::DegenerateGeometry(
            "all points are identical; extent is zero".into(),
        ));
    }
    let inv_h = 1.0 / h;
    let mut pts: Vec<Vector3<f64>> = ps.iter().map(|p| (p - center) * inv_h).collect();
    // Second pass pins the extreme coordinate to exactly +-1 despite
    // rounding in the centering arithmetic.
    let mut m = 0.0f64;
    for p in &pts {
        m = m.max(p.x.abs()).max(p.y.abs()).max(p.z.abs());
    }
    let inv_m = 1.0 / m;
    for p in pts.iter_mut() {
        *p *= inv_m;
    }
    let scale = inv_h * inv_m;
    Ok((PointSet { points: pts }, scale, center))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube_corners(s: f64) -> PointSet {
        let mut pts = Vec::new();
        for &x in &[-s, s] {
            for &y in &[-s, s] {
                for &z in &[-s, s] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        PointSet::new(pts).unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointSet::new(vec![]).is_err());
        assert!(PointSet::new(vec![Vector3::new(0.0, f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn cube_normalizes_to_unit_corners() {
        let (norm, scale, offset) = normalize_to_unit_cube(&cube_corners(2.0)).unwrap();
        assert_eq!(scale, 0.5);
        assert_eq!(offset, Vector3::zeros());
        for p in norm.iter() {
            for a in 0..3 {
                assert_eq!(p[a].abs(), 1.0);
            }
        }
    }

    #[test]
    fn aspect_ratio_is_preserved() {
        // Box [0,4] x [0,2] x [0,2]: x spans [-1,1], y and z span [-.5,.5].
        let ps = PointSet::from_rows(&[
            [0.0, 0.0, 0.0],
            [4.0, 2.0, 2.0],
            [4.0, 0.0, 2.0],
            [0.0, 2.0, 0.0],
        ])
        .unwrap();
        let (norm, _, _) = normalize_to_unit_cube(&ps).unwrap();
        let (lo, hi) = norm.bounding_box();
        assert!((lo.x + 1.0).abs() < 1e-15 && (hi.x - 1.0).abs() < 1e-15);
        assert!((lo.y + 0.5).abs() < 1e-15 && (hi.y - 0.5).abs() < 1e-15);
        assert!((lo.z + 0.5).abs() < 1e-15 && (hi.z - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts: Vec<Vector3<f64>> = (0..128)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-3.0..5.0),
                    rng.random_range(0.0..2.0),
                    rng.random_range(-1.0..9.0),
                )
            })
            .collect();
        let ps = PointSet::new(pts).unwrap();
        let (once, _, _) = normalize_to_unit_cube(&ps).unwrap();
        let (twice, scale, offset) = normalize_to_unit_cube(&once).unwrap();
        assert!((scale - 1.0).abs() < 1e-12);
        assert!(offset.norm() < 1e-12);
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn extreme_coordinate_attains_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pts: Vec<Vector3<f64>> = (0..64)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-0.3..7.1),
                        rng.random_range(2.0..3.7),
                        rng.random_range(-5.0..-1.0),
                    )
                })
                .collect();
            let ps = PointSet::new(pts).unwrap();
            let (norm, _, _) = normalize_to_unit_cube(&ps).unwrap();
            let mut max_abs = 0.0f64;
            for p in norm.iter() {
                for a in 0..3 {
                    assert!(p[a].abs() <= 1.0);
                    max_abs = max_abs.max(p[a].abs());
                }
            }
            assert_eq!(max_abs, 1.0);
        }
    }

    #[test]
    fn degenerate_extent_is_an_error() {
        let ps = PointSet::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        assert!(normalize_to_unit_cube(&ps).is_err());
    }
}
