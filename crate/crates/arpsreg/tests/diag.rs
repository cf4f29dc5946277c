use arpsreg::arps::network::{attach_losses, init_params, network_forward};
use arpsreg::arps::ArpsConfig;
use arpsreg::data::{gen_shape, make_pair, PairConfig, PairMode, ShapeKind};
use nalgebra::{Matrix3, Vector3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conditioning(scale: f64) {
    let cfg = ArpsConfig { layers: 2, feature_dim: 4, heads: 2, components: 4, top_h: Some(2), ..ArpsConfig::default() };
    let mut store = init_params::<f64>(&cfg, arpsreg::seed::derive_seed(0, "gradcheck.init")).unwrap();
    // scale the head output layer
    let idx = store.index_of("membership.w1").unwrap();
    for v in store.entry_mut(idx).data.iter_mut() { *v *= scale; }
    let shape = gen_shape(ShapeKind::Torus, 512, &mut ChaCha8Rng::seed_from_u64(arpsreg::seed::derive_seed(0, "gradcheck.shape"))).unwrap();
    let pair = make_pair(&shape, &PairConfig { mode: PairMode::Partial, n_points: 8, noise_sigma: 0.0, ..PairConfig::default() }, &mut ChaCha8Rng::seed_from_u64(arpsreg::seed::derive_seed(0, "gradcheck.pair"))).unwrap();
    let mut out = network_forward(&pair.source, &pair.target, &store, &cfg, true).unwrap();
    let w = out.weights_f64().to_vec();
    let ms = out.mu_src_f64().to_vec();
    let mt = out.mu_tgt_f64().to_vec();
    let wsum: f64 = w.iter().sum();
    let xb: Vector3<f64> = ms.iter().zip(&w).map(|(m, &ww)| m * ww).sum::<Vector3<f64>>() / wsum;
    let yb: Vector3<f64> = mt.iter().zip(&w).map(|(m, &ww)| m * ww).sum::<Vector3<f64>>() / wsum;
    let mut b = Matrix3::zeros();
    for k in 0..ms.len() { b += w[k] * (mt[k] - yb) * (ms[k] - xb).transpose(); }
    let svd = b.svd(false, false);
    let nodes = attach_losses(&mut out, &pair, 1e-8);
    let leaves: Vec<_> = (0..store.len()).map(|i| out.bound.id(&store, &store.entry(i).name)).collect();
    let report = arpsreg_nn::grad_check_strided(&mut out.graph, nodes.total, &leaves, 1e-5, 3);
    println!("scale {scale}: sv = {:?} det {:+.1e} | gradcheck max {:.3e} fails {}",
        svd.singular_values.as_slice(), b.determinant(), report.max_rel_err, report.failures.len());
}

#[test]
fn head_scale_conditioning_sweep() {
    for s in [1.0, 4.0, 8.0, 16.0] { conditioning(s); }
}
