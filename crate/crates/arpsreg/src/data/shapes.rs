//! Synthetic surface generators.
//!
//! All four kinds get a deterministic asymmetric dent after sampling so
//! that registration is well-posed (no rotational symmetry survives), and
//! are then normalized into the unit cube.

use crate::error::{Error, Result};
use crate::pointset::{normalize_to_unit_cube, PointSet};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Torus,
    NotchedBox,
    Superellipsoid,
}

impl ShapeKind {
    pub fn all() -> [ShapeKind; 4] {
        [
            ShapeKind::Sphere,
            ShapeKind::Torus,
            ShapeKind::NotchedBox,
            ShapeKind::Superellipsoid,
        ]
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Torus => "torus",
            ShapeKind::NotchedBox => "notched_box",
            ShapeKind::Superellipsoid => "superellipsoid",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "torus" => Ok(ShapeKind::Torus),
            "notched_box" => Ok(ShapeKind::NotchedBox),
            "superellipsoid" => Ok(ShapeKind::Superellipsoid),
            other => Err(Error::Config(format!("unknown shape kind '{other}'"))),
        }
    }
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

fn sgn_pow(t: f64, e: f64) -> f64 {
    t.signum() * t.abs().powf(e)
}

/// Raw surface sample before denting and normalization.
pub fn base_surface<R: Rng>(kind: ShapeKind, n: usize, rng: &mut R) -> PointSet {
    let mut pts = Vec::with_capacity(n);
    match kind {
        ShapeKind::Sphere => {
            for _ in 0..n {
                pts.push(unit_direction(rng));
            }
        }
        ShapeKind::Torus => {
            let (major, minor) = (0.7, 0.3);
            for _ in 0..n {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                let ring = major + minor * v.cos();
                pts.push(Vector3::new(ring * u.cos(), ring * u.sin(), minor * v.sin()));
            }
        }
        ShapeKind::NotchedBox => {
            // Uniform over the six faces of [-1,1]^3, with the (+,+,+)
            // corner region carved out.
            while pts.len() < n {
                let face = rng.random_range(0..6usize);
                let a = rng.random_range(-1.0..1.0);
                let b = rng.random_range(-1.0..1.0);
                let p = match face {
                    0 => Vector3::new(1.0, a, b),
                    1 => Vector3::new(-1.0, a, b),
                    2 => Vector3::new(a, 1.0, b),
                    3 => Vector3::new(a, -1.0, b),
                    4 => Vector3::new(a, b, 1.0),
                    _ => Vector3::new(a, b, -1.0),
                };
                if p.x > 0.3 && p.y > 0.3 && p.z > 0.3 {
                    continue;
                }
                pts.push(p);
            }
        }
        ShapeKind::Superellipsoid => {
            let (ax, ay, az) = (1.0, 0.75, 0.5);
            let e = 0.5; // exponent 4 in the implicit form
            for _ in 0..n {
                let eta = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
                let omega = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let ce = sgn_pow(eta.cos(), e);
                pts.push(Vector3::new(
                    ax * ce * sgn_pow(omega.cos(), e),
                    ay * ce * sgn_pow(omega.sin(), e),
                    az * sgn_pow(eta.sin(), e),
                ));
            }
        }
    }
    PointSet::new(pts).expect("surface sampling produces finite points")
}

const DENT_DIR: [f64; 3] = [0.8, 0.5, 0.3];
const DENT_DEPTH: f64 = 0.35;
const DENT_WIDTH: f64 = 0.45;

/// Pushes a cap of the surface inward along a fixed direction; this breaks
/// every symmetry the base shapes have.
fn apply_dent(points: &mut [Vector3<f64>]) {
    let dir = Vector3::new(DENT_DIR[0], DENT_DIR[1], DENT_DIR[2]).normalize();
    let apex_idx = points
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.dot(&dir).partial_cmp(&b.1.dot(&dir)).unwrap())
        .map(|(i, _)| i)
        .expect("non-empty");
    let apex = points[apex_idx];
    let inv_w2 = 1.0 / (DENT_WIDTH * DENT_WIDTH);
    for p in points.iter_mut() {
        let falloff = (-(*p - apex).norm_squared() * inv_w2).exp();
        *p -= dir * (DENT_DEPTH * falloff);
    }
}

/// A dense, asymmetric, unit-cube-normalized shape sample.
pub fn gen_shape<R: Rng>(kind: ShapeKind, n_dense: usize, rng: &mut R) -> Result<PointSet> {
    if n_dense < 16 {
        return Err(Error::Config(format!("n_dense = {n_dense} is too small")));
    }
    let base = base_surface(kind, n_dense, rng);
    let mut pts = base.points().to_vec();
    apply_dent(&mut pts);
    let ps = PointSet::new(pts)?;
    let (normalized, _, _) = normalize_to_unit_cube(&ps)?;
    Ok(normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_base_points_lie_on_the_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let ps = base_surface(ShapeKind::Sphere, 4096, &mut rng);
        for p in ps.iter() {
            let r = p.norm();
            assert!((0.99..=1.0 + 1e-12).contains(&r), "radius {r}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in ShapeKind::all() {
            let a = gen_shape(kind, 1024, &mut ChaCha8Rng::seed_from_u64(62)).unwrap();
            let b = gen_shape(kind, 1024, &mut ChaCha8Rng::seed_from_u64(62)).unwrap();
            for (pa, pb) in a.iter().zip(b.iter()) {
                assert_eq!(pa.x.to_bits(), pb.x.to_bits());
                assert_eq!(pa.y.to_bits(), pb.y.to_bits());
                assert_eq!(pa.z.to_bits(), pb.z.to_bits());
            }
        }
    }

    #[test]
    fn notched_box_centroid_is_off_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let ps = gen_shape(ShapeKind::NotchedBox, 4096, &mut rng).unwrap();
        let (lo, hi) = ps.bounding_box();
        let bbox_center = (lo + hi) * 0.5;
        let offset = (ps.centroid() - bbox_center).norm();
        assert!(offset > 0.01, "centroid offset {offset}");
    }

    #[test]
    fn all_shapes_fit_the_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for kind in ShapeKind::all() {
            let ps = gen_shape(kind, 2048, &mut rng).unwrap();
            for p in ps.iter() {
                for a in 0..3 {
                    assert!(p[a].abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn dent_displaces_a_cap_of_every_shape() {
        // The symmetry-breaking dent must move the apex region by a
        // noticeable amount relative to point spacing.
        for kind in ShapeKind::all() {
            let mut rng = ChaCha8Rng::seed_from_u64(65);
            let base = base_surface(kind, 2048, &mut rng);
            let mut dented = base.points().to_vec();
            apply_dent(&mut dented);
            let max_move = base
                .iter()
                .zip(&dented)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            assert!(
                max_move > 0.8 * DENT_DEPTH,
                "{kind}: dent moved points by at most {max_move}"
            );
        }
    }
}
