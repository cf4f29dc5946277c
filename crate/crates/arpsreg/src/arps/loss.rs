//! Plain-f64 loss formulas, mirroring the in-graph versions. Used for
//! reporting and as the recomputation oracle in tests.

use super::LayerTraceEntry;
use crate::pointset::PointSet;
use crate::rigid::RigidTransform;
use nalgebra::Vector3;

/// Mean squared distance between predicted and ground-truth placements of
/// the source points.
pub fn registration_loss(t_pred: &RigidTransform, t_gt: &RigidTransform, src: &PointSet) -> f64 {
    src.iter()
        .map(|p| (t_pred.apply_point(p) - t_gt.apply_point(p)).norm_squared())
        .sum::<f64>()
        / src.len() as f64
}

/// Squared Frobenius error of the 3x4 `[R | t]` block.
pub fn affine_loss(t_pred: &RigidTransform, t_gt: &RigidTransform) -> f64 {
    (t_pred.rotation() - t_gt.rotation()).norm_squared()
        + (t_pred.translation() - t_gt.translation()).norm_squared()
}

/// Squared distance between each set's ground-truth centroid and the sum
/// of the shifts applied to it.
pub fn centroid_loss(
    trace: &[LayerTraceEntry],
    src_centroid_gt: &Vector3<f64>,
    tgt_centroid_gt: &Vector3<f64>,
) -> f64 {
    let mut s_src = Vector3::zeros();
    let mut s_tgt = Vector3::zeros();
    for e in trace {
        s_src += e.shift_src;
        s_tgt += e.shift_tgt;
    }
    (src_centroid_gt - s_src).norm_squared() + (tgt_centroid_gt - s_tgt).norm_squared()
}

/// `eps * sum_l sigma_l^2`.
pub fn step_penalty(steps: &[f64], eps: f64) -> f64 {
    eps * steps.iter().map(|s| s * s).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arps::network::{attach_losses, init_params, loss_breakdown, network_forward};
    use crate::arps::{ArpsConfig, InputMode};
    use crate::data::{gen_shape, make_pair, PairConfig, PairMode, ShapeKind};
    use crate::rigid::{from_euler_zyx_deg, PoseSamplingConfig};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_pose_gives_zero_losses() {
        let t = RigidTransform::new(
            from_euler_zyx_deg(20.0, -5.0, 10.0),
            Vector3::new(0.1, 0.2, 0.3),
        )
        .unwrap();
        let src = PointSet::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(registration_loss(&t, &t, &src), 0.0);
        assert_eq!(affine_loss(&t, &t), 0.0);
    }

    #[test]
    fn pure_translation_offset_hits_both_losses_equally() {
        let t_gt = RigidTransform::identity();
        let d = Vector3::new(0.3, -0.4, 0.1);
        let t_pred = RigidTransform::new(nalgebra::Matrix3::identity(), d).unwrap();
        let src = PointSet::from_rows(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]).unwrap();
        let want = d.norm_squared();
        assert!((registration_loss(&t_pred, &t_gt, &src) - want).abs() < 1e-15);
        assert!((affine_loss(&t_pred, &t_gt) - want).abs() < 1e-15);
    }

    #[test]
    fn centroid_loss_edge_cases() {
        let v_src = Vector3::new(0.2, 0.1, -0.3);
        let v_tgt = Vector3::new(-0.1, 0.4, 0.2);
        // Shifts that sum exactly to the centroids.
        let trace = vec![
            LayerTraceEntry {
                src_indices: vec![],
                tgt_indices: vec![],
                step: 0.5,
                shift_src: v_src * 0.25,
                shift_tgt: v_tgt * 0.75,
            },
            LayerTraceEntry {
                src_indices: vec![],
                tgt_indices: vec![],
                step: 0.5,
                shift_src: v_src * 0.75,
                shift_tgt: v_tgt * 0.25,
            },
        ];
        assert!(centroid_loss(&trace, &v_src, &v_tgt) < 1e-30);
        // No shifts at all.
        assert!(
            (centroid_loss(&[], &v_src, &v_tgt)
                - (v_src.norm_squared() + v_tgt.norm_squared()))
            .abs()
                < 1e-15
        );
    }

    #[test]
    fn step_penalty_limits() {
        assert_eq!(step_penalty(&[0.0, 0.0], 1e-8), 0.0);
        assert!((step_penalty(&[1.0], 1e-8) - 1e-8).abs() < 1e-24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let direct: f64 = steps.iter().map(|s| s * s).sum::<f64>() * 1e-8;
        assert!((step_penalty(&steps, 1e-8) - direct).abs() < 1e-20);
    }

    #[test]
    fn in_graph_losses_match_plain_recomputation() {
        let cfg = ArpsConfig {
            layers: 2,
            feature_dim: 4,
            heads: 2,
            components: 4,
            top_h: Some(6),
            input_mode: InputMode::Xyz,
            ..ArpsConfig::default()
        };
        let store = init_params::<f64>(&cfg, 21).unwrap();
        let shape = gen_shape(
            ShapeKind::Superellipsoid,
            512,
            &mut ChaCha8Rng::seed_from_u64(22),
        )
        .unwrap();
        let pair_cfg = PairConfig {
            mode: PairMode::Partial,
            n_points: 32,
            noise_sigma: 0.0,
            pose: PoseSamplingConfig::default(),
            ..PairConfig::default()
        };
        let pair = make_pair(&shape, &pair_cfg, &mut ChaCha8Rng::seed_from_u64(23)).unwrap();
        let mut out = network_forward(&pair.source, &pair.target, &store, &cfg, false).unwrap();
        let eps = 1e-8;
        let nodes = attach_losses(&mut out, &pair, eps);
        let b = loss_breakdown(&out.graph, &nodes);

        let t_pred = out.predicted_transform().unwrap();
        let l_reg = registration_loss(&t_pred, &pair.t_gt, &pair.source);
        let l_aff = affine_loss(&t_pred, &pair.t_gt);
        let l_ctr = centroid_loss(&out.trace, &pair.source_centroid_gt, &pair.target_centroid_gt);
        let steps: Vec<f64> = out.trace.iter().map(|e| e.step).collect();
        let l_stp = step_penalty(&steps, eps);

        assert!((b.l_reg - l_reg).abs() < 1e-9, "{} vs {}", b.l_reg, l_reg);
        assert!((b.l_aff - l_aff).abs() < 1e-9);
        assert!((b.l_ctr - l_ctr).abs() < 1e-9);
        assert!((b.l_stp - l_stp).abs() < 1e-12);
    }
}
