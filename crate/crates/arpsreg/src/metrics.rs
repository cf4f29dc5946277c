//! Registration error metrics and recall curves.
//!
//! MRE/MTE average rotation (degrees) and translation (Euclidean) errors
//! over all pairs; recall is the inlier fraction under joint thresholds;
//! RRE/RTE average the same errors over inliers only and are null when
//! nothing is recalled.

use crate::error::{Error, Result};
use crate::rigid::{rotation_angle_deg, RigidTransform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub rot_deg: f64,
    pub trans: f64,
}

impl Thresholds {
    /// The synthetic-benchmark preset: 15 degrees, 0.2 length units.
    pub fn modelnet() -> Self {
        Thresholds {
            rot_deg: 15.0,
            trans: 0.2,
        }
    }

    /// The outdoor-LiDAR preset: 5 degrees, 0.6 length units (60 cm).
    pub fn kitti() -> Self {
        Thresholds {
            rot_deg: 5.0,
            trans: 0.6,
        }
    }

    pub fn is_inlier(&self, rotation_error_deg: f64, translation_error: f64) -> bool {
        rotation_error_deg < self.rot_deg && translation_error < self.trans
    }
}

/// One evaluated pair, serialized as a JSON line in report files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub pair_id: usize,
    pub method: String,
    pub t_pred: [f64; 12],
    pub t_gt: [f64; 12],
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub inlier: bool,
    pub wall_time_ms: f64,
    pub seed: u64,
}

impl RegistrationReport {
    pub fn new(
        pair_id: usize,
        method: &str,
        t_pred: &RigidTransform,
        t_gt: &RigidTransform,
        thresholds: &Thresholds,
        wall_time_ms: f64,
        seed: u64,
    ) -> Self {
        let rotation_error_deg = rotation_angle_deg(t_pred.rotation(), t_gt.rotation());
        let translation_error = (t_pred.translation() - t_gt.translation()).norm();
        RegistrationReport {
            pair_id,
            method: method.to_string(),
            t_pred: t_pred.to_row_major(),
            t_gt: t_gt.to_row_major(),
            rotation_error_deg,
            translation_error,
            inlier: thresholds.is_inlier(rotation_error_deg, translation_error),
            wall_time_ms,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_pairs: usize,
    pub mre: f64,
    pub mte: f64,
    pub recall: f64,
    /// Mean rotation error over inliers; null when recall is zero.
    pub rre: Option<f64>,
    /// Mean translation error over inliers; null when recall is zero.
    pub rte: Option<f64>,
    pub rot_threshold_deg: f64,
    pub trans_threshold: f64,
}

pub fn compute_metrics(
    reports: &[RegistrationReport],
    thresholds: &Thresholds,
) -> Result<MetricSummary> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to summarize".into()));
    }
    let n = reports.len() as f64;
    let mre = reports.iter().map(|r| r.rotation_error_deg).sum::<f64>() / n;
    let mte = reports.iter().map(|r| r.translation_error).sum::<f64>() / n;
    let inliers: Vec<&RegistrationReport> = reports
        .iter()
        .filter(|r| thresholds.is_inlier(r.rotation_error_deg, r.translation_error))
        .collect();
    let recall = inliers.len() as f64 / n;
    let (rre, rte) = if inliers.is_empty() {
        (None, None)
    } else {
        let k = inliers.len() as f64;
        (
            Some(inliers.iter().map(|r| r.rotation_error_deg).sum::<f64>() / k),
            Some(inliers.iter().map(|r| r.translation_error).sum::<f64>() / k),
        )
    };
    Ok(MetricSummary {
        n_pairs: reports.len(),
        mre,
        mte,
        recall,
        rre,
        rte,
        rot_threshold_deg: thresholds.rot_deg,
        trans_threshold: thresholds.trans,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallPoint {
    pub rot_threshold_deg: f64,
    pub trans_threshold: f64,
    pub recall: f64,
}

/// Recall over the cross product of the two threshold grids. Grids must be
/// sorted ascending; recall is then monotone along each axis.
pub fn recall_curve(
    reports: &[RegistrationReport],
    rot_grid: &[f64],
    trans_grid: &[f64],
) -> Vec<RecallPoint> {
    let n = reports.len().max(1) as f64;
    let mut out = Vec::with_capacity(rot_grid.len() * trans_grid.len());
    for &rot in rot_grid {
        for &trans in trans_grid {
            let th = Thresholds { rot_deg: rot, trans };
            let inliers = reports
                .iter()
                .filter(|r| th.is_inlier(r.rotation_error_deg, r.translation_error))
                .count();
            out.push(RecallPoint {
                rot_threshold_deg: rot,
                trans_threshold: trans,
                recall: inliers as f64 / n,
            });
        }
    }
    out
}
