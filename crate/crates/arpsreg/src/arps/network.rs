//! Whole-network forward pass and loss graph.

use super::layers::{attend_pair, encode_points, recenter, select_top_h, step_size};
use super::{ArpsConfig, InputMode, LayerTraceEntry, LossBreakdown};
use crate::data::RegistrationPair;
use crate::error::{Error, Result};
use crate::features::{rri_features, RriConfig};
use crate::gmm::SIGMA_FLOOR;
use crate::pointset::PointSet;
use crate::rigid::{weighted_umeyama, RigidTransform};
use arpsreg_nn::{BoundParams, Graph, ParamStore, Scalar, TensorId};
use nalgebra::Vector3;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mass floor for N*pi_j inside the in-graph mixture statistics; softmax
/// memberships keep every component slightly populated, this only guards
/// extreme saturation.
const MASS_FLOOR: f64 = 1e-8;

/// Registers every trainable tensor of the network.
pub fn init_params<T: Scalar>(cfg: &ArpsConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.feature_dim;
    // Zero start for the carried constant row: the per-point encoder half
    // then drives feature directions from layer 0, which keeps the mixture
    // means spread and the alignment solve well-conditioned at init.
    store.add_zeros("feat0", 1, c);
    for l in 0..cfg.layers {
        cfg.encoder_spec(l).register(&mut store, &mut rng);
        cfg.self_mha_spec(l)?.register(&mut store, &mut rng);
        cfg.cross_mha_spec(l)?.register(&mut store, &mut rng);
        store.add_kaiming(&format!("layer{l}.proj.w"), cfg.d_model(), c, cfg.d_model(), &mut rng);
        store.add_zeros(&format!("layer{l}.proj.b"), 1, c);
        cfg.step_spec(l).register(&mut store, &mut rng);
    }
    cfg.membership_spec().register(&mut store, &mut rng);
    store
        .meta
        .insert("arps_config".into(), serde_json::to_string(cfg)?);
    store.meta.insert("format".into(), "arps-v1".into());
    Ok(store)
}

/// Reads the configuration back out of a checkpoint's metadata.
pub fn config_from_meta<T: Scalar>(store: &ParamStore<T>) -> Result<ArpsConfig> {
    let raw = store
        .meta
        .get("arps_config")
        .ok_or_else(|| Error::Config("checkpoint has no arps_config metadata".into()))?;
    Ok(serde_json::from_str(raw)?)
}

pub struct NetworkOutput<T: Scalar> {
    pub graph: Graph<T>,
    pub bound: BoundParams,
    /// Original input coordinates (constants).
    pub src_input: TensorId,
    pub tgt_input: TensorId,
    /// Rotation block of the pose expressed in original coordinates.
    pub rotation_node: TensorId,
    /// Translation row (1x3) of the pose in original coordinates.
    pub translation_node: TensorId,
    /// Pose solved in shifted coordinates, as the raw 3x4 block.
    pub shifted_pose_node: TensorId,
    pub gamma_src: TensorId,
    pub gamma_tgt: TensorId,
    pub shift_src_sum: TensorId,
    pub shift_tgt_sum: TensorId,
    /// Per-layer step sizes (1x1 nodes).
    pub step_nodes: Vec<TensorId>,
    pub trace: Vec<LayerTraceEntry>,
    /// Final attended features of both sets.
    pub features_src: TensorId,
    pub features_tgt: TensorId,
    /// Mixture means and weights in f64 for the closed-form re-solve.
    mu_src_f64: Vec<Vector3<f64>>,
    mu_tgt_f64: Vec<Vector3<f64>>,
    weights_f64: Vec<f64>,
}

impl<T: Scalar> NetworkOutput<T> {
    /// Pose in original coordinates, re-solved in f64 from the component
    /// means for reporting. The rotation equals the shifted-frame solve;
    /// the translation folds the accumulated shifts back in.
    pub fn predicted_transform(&self) -> Result<RigidTransform> {
        let shifted = weighted_umeyama(&self.mu_src_f64, &self.mu_tgt_f64, &self.weights_f64)?;
        let s_src = vec3(self.graph.value(self.shift_src_sum));
        let s_tgt = vec3(self.graph.value(self.shift_tgt_sum));
        let r = *shifted.rotation();
        RigidTransform::new(r, shifted.translation() + s_tgt - r * s_src)
    }

    /// Component means of the source mixture (shifted frame).
    pub fn mu_src_f64(&self) -> &[Vector3<f64>] {
        &self.mu_src_f64
    }

    pub fn mu_tgt_f64(&self) -> &[Vector3<f64>] {
        &self.mu_tgt_f64
    }

    /// Per-component alignment weights `pi_src / max(sigma2_tgt, floor)`.
    pub fn weights_f64(&self) -> &[f64] {
        &self.weights_f64
    }

    /// Row-stochastic memberships of the source set.
    pub fn memberships_src(&self) -> (usize, usize, Vec<f64>) {
        let (n, j) = self.graph.shape(self.gamma_src);
        (n, j, self.graph.value(self.gamma_src).iter().map(|x| x.to_f64()).collect())
    }

    pub fn memberships_tgt(&self) -> (usize, usize, Vec<f64>) {
        let (n, j) = self.graph.shape(self.gamma_tgt);
        (n, j, self.graph.value(self.gamma_tgt).iter().map(|x| x.to_f64()).collect())
    }
}

fn vec3<T: Scalar>(buf: &[T]) -> Vector3<f64> {
    Vector3::new(buf[0].to_f64(), buf[1].to_f64(), buf[2].to_f64())
}

fn to_t<T: Scalar>(values: &[f64]) -> Vec<T> {
    values.iter().map(|&x| T::from_f64(x)).collect()
}

/// In-graph mixture statistics of one point set under soft memberships:
/// component means (Jx3), weights pi (Jx1) and isotropic variances (Jx1).
fn mixture_stats<T: Scalar>(
    g: &mut Graph<T>,
    coords: TensorId,
    gamma: TensorId,
) -> (TensorId, TensorId, TensorId) {
    let (n, j) = g.shape(gamma);
    let pi_row = g.mean_axis0(gamma);
    let pi_col = g.transpose(pi_row);
    let mass = g.scale(pi_col, T::from_f64(n as f64));
    let mass = g.clamp_min(mass, T::from_f64(MASS_FLOOR));
    let ones = g.constant(j, 1, vec![T::ONE; j]);
    let inv_mass = g.div(ones, mass);
    let mu_raw = g.matmul_tn(gamma, coords);
    let mu = g.scale_rows(mu_raw, inv_mass);
    // sigma^2 = (sum_i g_ij |x_i|^2) / (3 N pi_j) - |mu_j|^2 / 3.
    let sq = g.square(coords);
    let rowsq = g.sum_axis1(sq);
    let q = g.matmul_tn(gamma, rowsq);
    let qn = g.mul(q, inv_mass);
    let musq_full = g.square(mu);
    let musq = g.sum_axis1(musq_full);
    let diff = g.sub(qn, musq);
    let sigma2 = g.scale(diff, T::from_f64(1.0 / 3.0));
    (mu, pi_col, sigma2)
}

/// Runs the network on a pair of equally-sized point sets. With
/// `trainable = false` the parameter leaves are constants (no gradients
/// flow; use for inference/validation).
pub fn network_forward<T: Scalar>(
    src: &PointSet,
    tgt: &PointSet,
    store: &ParamStore<T>,
    cfg: &ArpsConfig,
    trainable: bool,
) -> Result<NetworkOutput<T>> {
    cfg.validate()?;
    if src.len() != tgt.len() {
        return Err(Error::InvalidInput(format!(
            "point counts differ: {} vs {}",
            src.len(),
            tgt.len()
        )));
    }
    let n = src.len();
    let h = cfg.resolve_top_h(n);

    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, store, trainable);

    let src_input = g.constant(n, 3, to_t(&src.flat()));
    let tgt_input = g.constant(n, 3, to_t(&tgt.flat()));

    // First-layer encoder input under the rri mode: rotation-invariant
    // features of the raw inputs, entering the graph as constants.
    let (rri_src, rri_tgt) = if cfg.input_mode == InputMode::Rri {
        let rri_cfg = RriConfig {
            m_neighbors: cfg.rri_neighbors,
        };
        let fs = rri_features(src, &rri_cfg)?;
        let ft = rri_features(tgt, &rri_cfg)?;
        let dim = fs.dim();
        (
            Some(g.constant(n, dim, to_t(&fs.values))),
            Some(g.constant(n, dim, to_t(&ft.values))),
        )
    } else {
        (None, None)
    };

    // Layer-0 carried features: one learned row replicated N times.
    let feat0 = bound.id(store, "feat0");
    let all_zero: Vec<usize> = vec![0; n];
    let mut f_src = g.gather_rows(feat0, &all_zero);
    let mut f_tgt = g.gather_rows(feat0, &all_zero);

    let mut x_src = src_input;
    let mut x_tgt = tgt_input;
    let mut shift_src_sum = g.constant(1, 3, vec![T::ZERO; 3]);
    let mut shift_tgt_sum = g.constant(1, 3, vec![T::ZERO; 3]);
    let mut step_nodes = Vec::with_capacity(cfg.layers);
    let mut trace = Vec::with_capacity(cfg.layers);
    let mut feats_src = f_src;
    let mut feats_tgt = f_tgt;

    for l in 0..cfg.layers {
        let (enc_src, enc_tgt) = if l == 0 {
            match cfg.input_mode {
                InputMode::Xyz => (x_src, x_tgt),
                InputMode::Rri => (rri_src.unwrap(), rri_tgt.unwrap()),
            }
        } else {
            (x_src, x_tgt)
        };
        let g2_src = encode_points(&mut g, store, &bound, cfg, l, enc_src, f_src);
        let g2_tgt = encode_points(&mut g, store, &bound, cfg, l, enc_tgt, f_tgt);
        let (a_src, a_tgt) = attend_pair(&mut g, store, &bound, cfg, l, g2_src, g2_tgt);

        let idx_src = select_top_h(&g, a_src, h);
        let idx_tgt = select_top_h(&g, a_tgt, h);

        let sel_x_src = g.gather_rows(x_src, &idx_src);
        let mu_x_src = g.mean_axis0(sel_x_src);
        let sel_x_tgt = g.gather_rows(x_tgt, &idx_tgt);
        let mu_x_tgt = g.mean_axis0(sel_x_tgt);
        let sel_f_src = g.gather_rows(a_src, &idx_src);
        let mu_f_src = g.mean_axis0(sel_f_src);
        let sel_f_tgt = g.gather_rows(a_tgt, &idx_tgt);
        let mu_f_tgt = g.mean_axis0(sel_f_tgt);

        let dx = g.sub(mu_x_src, mu_x_tgt);
        let df = g.sub(mu_f_src, mu_f_tgt);
        let step = step_size(&mut g, store, &bound, cfg, l, dx, df);
        step_nodes.push(step);

        let (new_x_src, shift_s) = recenter(&mut g, x_src, mu_x_src, step, cfg.disable_recenter);
        let (new_x_tgt, shift_t) = recenter(&mut g, x_tgt, mu_x_tgt, step, cfg.disable_recenter);
        shift_src_sum = g.add(shift_src_sum, shift_s);
        shift_tgt_sum = g.add(shift_tgt_sum, shift_t);

        trace.push(LayerTraceEntry {
            src_indices: idx_src,
            tgt_indices: idx_tgt,
            step: g.value(step)[0].to_f64(),
            shift_src: vec3(g.value(shift_s)),
            shift_tgt: vec3(g.value(shift_t)),
        });

        x_src = new_x_src;
        x_tgt = new_x_tgt;
        feats_src = a_src;
        feats_tgt = a_tgt;

        // Project back to C for the next layer's carried features.
        if l + 1 < cfg.layers {
            let w = bound.id(store, &format!("layer{l}.proj.w"));
            let b = bound.id(store, &format!("layer{l}.proj.b"));
            f_src = arpsreg_nn::affine(&mut g, a_src, w, b);
            f_tgt = arpsreg_nn::affine(&mut g, a_tgt, w, b);
        }
    }

    // Siamese membership head + row softmax.
    let head = cfg.membership_spec();
    let logits_src = head.forward(&mut g, store, &bound, feats_src);
    let logits_tgt = head.forward(&mut g, store, &bound, feats_tgt);
    let gamma_src = g.softmax_rows(logits_src);
    let gamma_tgt = g.softmax_rows(logits_tgt);

    // Mixture registration on the shifted coordinates.
    let (mu_s, pi_s, _sig2_s) = mixture_stats(&mut g, x_src, gamma_src);
    let (mu_t, _pi_t, sig2_t) = mixture_stats(&mut g, x_tgt, gamma_tgt);
    let sig2_floored = g.clamp_min(sig2_t, T::from_f64(SIGMA_FLOOR));
    let weights = g.div(pi_s, sig2_floored);
    let shifted_pose = g.kabsch(mu_s, mu_t, weights);

    // Back to original coordinates: R is unchanged, the translation folds
    // the accumulated shifts in: t = t' + s_tgt - R s_src.
    let rotation_node = g.slice_cols(shifted_pose, 0, 3);
    let t_col = g.slice_cols(shifted_pose, 3, 1);
    let t_row = g.transpose(t_col);
    let r_s = g.matmul_nt(shift_src_sum, rotation_node);
    let with_tgt = g.add(t_row, shift_tgt_sum);
    let translation_node = g.sub(with_tgt, r_s);

    let j = cfg.components;
    let mu_src_f64: Vec<Vector3<f64>> = (0..j)
        .map(|k| vec3(&g.value(mu_s)[3 * k..3 * k + 3]))
        .collect();
    let mu_tgt_f64: Vec<Vector3<f64>> = (0..j)
        .map(|k| vec3(&g.value(mu_t)[3 * k..3 * k + 3]))
        .collect();
    let weights_f64: Vec<f64> = g.value(weights).iter().map(|x| x.to_f64()).collect();

    Ok(NetworkOutput {
        graph: g,
        bound,
        src_input,
        tgt_input,
        rotation_node,
        translation_node,
        shifted_pose_node: shifted_pose,
        gamma_src,
        gamma_tgt,
        shift_src_sum,
        shift_tgt_sum,
        step_nodes,
        trace,
        features_src: feats_src,
        features_tgt: feats_tgt,
        mu_src_f64,
        mu_tgt_f64,
        weights_f64,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_aff: TensorId,
    pub l_reg: TensorId,
    pub l_ctr: TensorId,
    pub l_stp: TensorId,
    pub total: TensorId,
}

/// Appends the four losses to a forward pass:
/// transformed-point MSE, Frobenius pose error, squared distance of the
/// accumulated shifts to the ground-truth centroids, and the step penalty.
pub fn attach_losses<T: Scalar>(
    out: &mut NetworkOutput<T>,
    pair: &RegistrationPair,
    step_penalty_eps: f64,
) -> LossNodes {
    let g = &mut out.graph;
    let n = pair.source.len();

    // Registration loss: mean |T_pred(x) - T_gt(x)|^2 over source points.
    let moved_gt = g.constant(n, 3, to_t(&pair.t_gt.apply(&pair.source).flat()));
    let rotated = g.matmul_nt(out.src_input, out.rotation_node);
    let moved_pred = g.add_bias(rotated, out.translation_node);
    let diff = g.sub(moved_pred, moved_gt);
    let sq = g.square(diff);
    let per_point = g.sum_axis1(sq);
    let l_reg = g.mean_axis0(per_point);

    // Affine loss: squared Frobenius error of the [R | t] block.
    let gt_rt = pair.t_gt.to_row_major();
    let mut r_gt = Vec::with_capacity(9);
    let mut t_gt = Vec::with_capacity(3);
    for row in 0..3 {
        for col in 0..3 {
            r_gt.push(gt_rt[row * 4 + col]);
        }
        t_gt.push(gt_rt[row * 4 + 3]);
    }
    let r_gt = g.constant(3, 3, to_t(&r_gt));
    let t_gt = g.constant(1, 3, to_t(&t_gt));
    let dr = g.sub(out.rotation_node, r_gt);
    let dr2 = g.square(dr);
    let dr_cols = g.sum_axis0(dr2);
    let r_term = g.sum_axis1(dr_cols);
    let dt = g.sub(out.translation_node, t_gt);
    let dt2 = g.square(dt);
    let t_term = g.sum_axis1(dt2);
    let l_aff = g.add(r_term, t_term);

    // Centroid loss against the accumulated shifts.
    let v_src = g.constant(1, 3, to_t(pair.source_centroid_gt.as_slice()));
    let v_tgt = g.constant(1, 3, to_t(pair.target_centroid_gt.as_slice()));
    let ds = g.sub(v_src, out.shift_src_sum);
    let ds2 = g.square(ds);
    let cs = g.sum_axis1(ds2);
    let dt_ = g.sub(v_tgt, out.shift_tgt_sum);
    let dt2_ = g.square(dt_);
    let ct = g.sum_axis1(dt2_);
    let l_ctr = g.add(cs, ct);

    // Step penalty: eps * sum_l sigma(alpha_l)^2.
    let mut acc: Option<TensorId> = None;
    for &s in &out.step_nodes {
        let s2 = g.square(s);
        acc = Some(match acc {
            None => s2,
            Some(prev) => g.add(prev, s2),
        });
    }
    let l_stp = match acc {
        Some(sum) => g.scale(sum, T::from_f64(step_penalty_eps)),
        None => g.constant(1, 1, vec![T::ZERO]),
    };

    let ar = g.add(l_aff, l_reg);
    let cs_ = g.add(l_ctr, l_stp);
    let total = g.add(ar, cs_);
    LossNodes {
        l_aff,
        l_reg,
        l_ctr,
        l_stp,
        total,
    }
}

pub fn loss_breakdown<T: Scalar>(g: &Graph<T>, nodes: &LossNodes) -> LossBreakdown {
    LossBreakdown {
        l_aff: g.scalar_value(nodes.l_aff).to_f64(),
        l_reg: g.scalar_value(nodes.l_reg).to_f64(),
        l_ctr: g.scalar_value(nodes.l_ctr).to_f64(),
        l_stp: g.scalar_value(nodes.l_stp).to_f64(),
        total: g.scalar_value(nodes.total).to_f64(),
    }
}
