//! Rigid transforms, pose sampling and the weighted SVD alignment solver.

use crate::error::{Error, Result};
use crate::pointset::PointSet;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

/// Frobenius tolerance for the orthonormality / determinant invariants.
pub const ROTATION_TOL: f64 = 1e-6;

/// Rotation + translation. Construction validates the SO(3) invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        let det = r.determinant();
        if ortho >= ROTATION_TOL || (det - 1.0).abs() >= ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "not a rotation: ||R^T R - I|| = {ortho:.3e}, det = {det:.9}"
            )));
        }
        Ok(RigidTransform { r, t })
    }

    pub fn identity() -> Self {
        RigidTransform {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// Applies the transform to every point.
    pub fn apply(&self, ps: &PointSet) -> PointSet {
        PointSet::new(ps.iter().map(|p| self.apply_point(p)).collect())
            .expect("transforming a valid point set keeps it valid")
    }

    /// `self . inner`: the transform mapping `x` to `self(inner(x))`.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            r: self.r * inner.r,
            t: self.r * inner.t + self.t,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.r.transpose();
        RigidTransform {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// Row-major `[R | t]` as 12 numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for row in 0..3 {
            for col in 0..3 {
                out[row * 4 + col] = self.r[(row, col)];
            }
            out[row * 4 + 3] = self.t[row];
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        RigidTransform::new(r, t)
    }
}

pub fn rot_x(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Intrinsic ZYX Euler composition: `R = Rz(z) Ry(y) Rx(x)`, angles in
/// degrees.
pub fn from_euler_zyx_deg(z_deg: f64, y_deg: f64, x_deg: f64) -> Matrix3<f64> {
    rot_z(z_deg.to_radians()) * rot_y(y_deg.to_radians()) * rot_x(x_deg.to_radians())
}

/// Inverse of [`from_euler_zyx_deg`] (gimbal-lock-free for |y| < 90 deg).
pub fn euler_zyx_deg(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let y = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let z = r[(1, 0)].atan2(r[(0, 0)]);
    let x = r[(2, 1)].atan2(r[(2, 2)]);
    (z.to_degrees(), y.to_degrees(), x.to_degrees())
}

/// Pose sampling ranges: Euler angles uniform per axis in
/// `+-euler_range_deg`, translation = random direction times a magnitude
/// uniform in `+-translation_range`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseSamplingConfig {
    pub euler_range_deg: f64,
    pub translation_range: f64,
}

impl Default for PoseSamplingConfig {
    fn default() -> Self {
        PoseSamplingConfig {
            euler_range_deg: 45.0,
            translation_range: 0.5,
        }
    }
}

impl PoseSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.euler_range_deg < 0.0 || self.translation_range < 0.0 {
            return Err(Error::Config("pose sampling ranges must be >= 0".into()));
        }
        Ok(())
    }
}

/// Draws a pose. Angles are sampled in z, y, x order (intrinsic ZYX), then
/// the translation direction (normalized Gaussian triple) and magnitude.
pub fn random_transform<R: Rng>(rng: &mut R, cfg: &PoseSamplingConfig) -> RigidTransform {
    let e = cfg.euler_range_deg;
    let (z, y, x) = if e > 0.0 {
        (
            rng.random_range(-e..=e),
            rng.random_range(-e..=e),
            rng.random_range(-e..=e),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let r = from_euler_zyx_deg(z, y, x);

    let dir = loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            break v / n;
        }
    };
    let s = if cfg.translation_range > 0.0 {
        rng.random_range(-cfg.translation_range..=cfg.translation_range)
    } else {
        0.0
    };
    RigidTransform { r, t: dir * s }
}

/// Geodesic angle between two rotations in degrees, in `[0, 180]`.
///
/// Mathematically `arccos((trace(R1^T R2) - 1) / 2)`, but computed through
/// `atan2` of the skew part: the plain arccos loses half the significant
/// digits near 0 and 180 degrees, which would drown exact-recovery checks
/// at the 1e-6-degree level in rounding noise.
pub fn rotation_angle_deg(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let d = r1.transpose() * r2;
    let c = (d.trace() - 1.0) / 2.0;
    let axis = Vector3::new(
        d[(2, 1)] - d[(1, 2)],
        d[(0, 2)] - d[(2, 0)],
        d[(1, 0)] - d[(0, 1)],
    );
    let s = axis.norm() / 2.0;
    s.atan2(c).to_degrees()
}

/// Weighted squared alignment error `sum_k w_k ||T(src_k) - dst_k||^2`.
pub fn alignment_cost(
    t: &RigidTransform,
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: &[f64],
) -> f64 {
    src.iter()
        .zip(dst)
        .zip(weights)
        .map(|((s, d), &w)| w * (t.apply_point(s) - d).norm_squared())
        .sum()
}

/// Solves `argmin_T sum_k w_k ||T(src_k) - dst_k||^2` over rigid transforms
/// via SVD of the weighted cross-covariance, with the reflection fix on the
/// smallest singular value.
///
/// Errors on fewer than 3 pairs, non-positive total weight, or a
/// cross-covariance of rank < 2 (weighted points collinear: the rotation
/// about that axis is unconstrained).
pub fn weighted_umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} src, {} dst, {} weights",
            src.len(),
            dst.len(),
            weights.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::InvalidInput(
            "weighted alignment needs at least 3 point pairs".into(),
        ));
    }
    let mut w_sum = 0.0;
    for &w in weights {
        if !(w >= 0.0) {
            return Err(Error::InvalidInput(format!("negative weight {w}")));
        }
        w_sum += w;
    }
    if w_sum <= 0.0 {
        return Err(Error::InvalidInput("all weights are zero".into()));
    }

    let mut src_mean = Vector3::zeros();
    let mut dst_mean = Vector3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        src_mean += w * s;
        dst_mean += w * d;
    }
    src_mean /= w_sum;
    dst_mean /= w_sum;

    let mut b = Matrix3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        b += w * (d - dst_mean) * (s - src_mean).transpose();
    }

    let svd = b.svd(true, true);
    let sv = &svd.singular_values;
    // Sorted descending by nalgebra; rank < 2 leaves the rotation about the
    // common line unconstrained.
    if sv[1] <= 1e-12 + 1e-9 * sv[0] {
        return Err(Error::DegenerateGeometry(format!(
            "cross-covariance is rank-deficient (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let sign = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * v_t;
    let t = dst_mean - r * src_mean;
    RigidTransform::new(r, t)
}
