//! The five sub-operations of one shifting layer.

use super::ArpsConfig;
use arpsreg_nn::{BoundParams, Graph, ParamStore, Scalar, TensorId};

/// Per-point encoding: an MLP maps the encoder input (coordinates, or
/// rotation-invariant features on the first layer) to C dims, which are
/// concatenated onto the carried features.
pub fn encode_points<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bound: &BoundParams,
    cfg: &ArpsConfig,
    layer: usize,
    enc_input: TensorId,
    prev_feats: TensorId,
) -> TensorId {
    let phi = cfg.encoder_spec(layer).forward(g, store, bound, enc_input);
    g.concat_cols(&[prev_feats, phi])
}

/// Siamese self-attention on each set followed by Siamese cross-attention
/// between them. Identity pass-through under the attention ablation.
pub fn attend_pair<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bound: &BoundParams,
    cfg: &ArpsConfig,
    layer: usize,
    f_src: TensorId,
    f_tgt: TensorId,
) -> (TensorId, TensorId) {
    if cfg.disable_attention {
        return (f_src, f_tgt);
    }
    let self_mha = cfg.self_mha_spec(layer).expect("validated config");
    let cross_mha = cfg.cross_mha_spec(layer).expect("validated config");
    let src1 = self_mha.forward(g, store, bound, f_src, f_src, f_src);
    let tgt1 = self_mha.forward(g, store, bound, f_tgt, f_tgt, f_tgt);
    let src2 = cross_mha.forward(g, store, bound, src1, tgt1, tgt1);
    let tgt2 = cross_mha.forward(g, store, bound, tgt1, src1, src1);
    (src2, tgt2)
}

/// Indices of the H rows with the largest Euclidean norm, in descending
/// norm order with ties toward the lower index. The choice is hard:
/// gradients flow only through the selected rows' values.
pub fn select_top_h<T: Scalar>(g: &Graph<T>, feats: TensorId, h: usize) -> Vec<usize> {
    let (n, d) = g.shape(feats);
    assert!(h >= 1 && h <= n, "need 1 <= H <= N, got H = {h}, N = {n}");
    let values = g.value(feats);
    let mut norms: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let row = &values[i * d..(i + 1) * d];
            let mut s = 0.0f64;
            for &x in row {
                let x = x.to_f64();
                s += x * x;
            }
            (s, i)
        })
        .collect();
    norms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    norms.truncate(h);
    norms.into_iter().map(|(_, i)| i).collect()
}

/// Step size from the differences of the selected coordinate means and the
/// selected feature means: a small MLP produces the raw size, squashed by
/// a sigmoid into (0, 1).
pub fn step_size<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bound: &BoundParams,
    cfg: &ArpsConfig,
    layer: usize,
    coord_mean_diff: TensorId,
    feat_mean_diff: TensorId,
) -> TensorId {
    let input = g.concat_cols(&[coord_mean_diff, feat_mean_diff]);
    let alpha = cfg.step_spec(layer).forward(g, store, bound, input);
    g.sigmoid(alpha)
}

/// Translates the whole set by `step * mean(selected)`, returning the new
/// coordinates and the applied shift. After the shift the selected mean
/// equals `(1 - step)` times its previous value. Under the recentering
/// ablation the shift is pinned to zero.
pub fn recenter<T: Scalar>(
    g: &mut Graph<T>,
    coords: TensorId,
    selected_mean: TensorId,
    step: TensorId,
    disable: bool,
) -> (TensorId, TensorId) {
    if disable {
        let zero = g.constant(1, 3, vec![T::ZERO; 3]);
        return (coords, zero);
    }
    let shift = g.scale_rows(selected_mean, step);
    let neg = g.scale(shift, -T::ONE);
    let shifted = g.add_bias(coords, neg);
    (shifted, shift)
}
