//! Rotation-invariant per-point features.
//!
//! Each point gets a 4M-dimensional descriptor built from its M nearest
//! neighbors with the origin as the reference point: the radius of the
//! point, the radii of its neighbors, the angle each neighbor subtends
//! against the point direction, and an azimuth measured in the tangent
//! plane relative to the nearest neighbor's projection. All four families
//! are unchanged by any rotation about the origin, and deliberately NOT
//! by translation: moving the reference point is what breaks them.

use crate::error::{Error, Result};
use crate::pointset::PointSet;
use crate::spatial::KdTree;

#[derive(Debug, Clone, Copy)]
pub struct RriConfig {
    /// Neighborhood size M.
    pub m_neighbors: usize,
}

impl Default for RriConfig {
    fn default() -> Self {
        RriConfig { m_neighbors: 8 }
    }
}

/// N x 4M feature matrix, laid out per point as four contiguous blocks of
/// width M: `[r_i; M] [r_ik] [theta_ik] [phi_ik]`.
#[derive(Debug, Clone)]
pub struct RriFeatures {
    pub n: usize,
    pub m: usize,
    pub values: Vec<f64>,
    /// Points whose angles were zeroed because a radius (or the tangent
    /// reference) vanished.
    pub degenerate: Vec<bool>,
}

impl RriFeatures {
    pub fn dim(&self) -> usize {
        4 * self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim()..(i + 1) * self.dim()]
    }
}

/// Indices of the M nearest neighbors of every point (self excluded),
/// sorted ascending by distance with ties broken toward the lower index.
pub fn knn(ps: &PointSet, m: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 || m >= ps.len() {
        return Err(Error::Config(format!(
            "need 1 <= M < N, got M = {m}, N = {}",
            ps.len()
        )));
    }
    let tree = KdTree::build(ps);
    Ok((0..ps.len())
        .map(|i| {
            tree.k_nearest(&ps.get(i), m, Some(i))
                .into_iter()
                .map(|(j, _)| j)
                .collect()
        })
        .collect())
}

const RADIUS_EPS: f64 = 1e-12;

pub fn rri_features(ps: &PointSet, cfg: &RriConfig) -> Result<RriFeatures> {
    let m = cfg.m_neighbors;
    if ps.len() <= m {
        return Err(Error::Config(format!(
            "need N > M, got N = {}, M = {m}",
            ps.len()
        )));
    }
    let neighbors = knn(ps, m)?;
    let n = ps.len();
    let dim = 4 * m;
    let mut values = vec![0.0; n * dim];
    let mut degenerate = vec![false; n];

    for i in 0..n {
        let x = ps.get(i);
        let r = x.norm();
        let row = &mut values[i * dim..(i + 1) * dim];
        // Radii are always recorded; angles may be zeroed below.
        for k in 0..m {
            row[k] = r;
            row[m + k] = ps.get(neighbors[i][k]).norm();
        }
        if r <= RADIUS_EPS {
            degenerate[i] = true;
            continue;
        }
        let x_hat = x / r;

        // Tangent-plane frame anchored at the nearest neighbor's projection.
        let nearest = ps.get(neighbors[i][0]);
        let q1 = nearest - x_hat * nearest.dot(&x_hat);
        let q1_norm = q1.norm();
        let frame = if q1_norm > RADIUS_EPS {
            let e1 = q1 / q1_norm;
            let e2 = x_hat.cross(&e1);
            Some((e1, e2))
        } else {
            degenerate[i] = true;
            None
        };

        for k in 0..m {
            let y = ps.get(neighbors[i][k]);
            let ry = row[m + k];
            if ry <= RADIUS_EPS {
                degenerate[i] = true;
                continue;
            }
            row[2 * m + k] = (x.dot(&y) / (r * ry)).clamp(-1.0, 1.0).acos();
            if let Some((e1, e2)) = frame {
                let q = y - x_hat * y.dot(&x_hat);
                let mut phi = q.dot(&e2).atan2(q.dot(&e1));
                if phi < 0.0 {
                    phi += std::f64::consts::TAU;
                }
                if phi >= std::f64::consts::TAU {
                    phi = 0.0;
                }
                row[3 * m + k] = phi;
            }
        }
    }

    Ok(RriFeatures {
        n,
        m,
        values,
        degenerate,
    })
}
