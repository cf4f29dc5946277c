//! Central finite-difference verification of the backward rules.

use crate::graph::{Graph, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared absolutely (the finite-difference noise floor sits far below
/// 1e-3 for well-scaled graphs).
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares analytic gradients of `loss` against central differences for
/// every element of every listed leaf. `stride` probes every `stride`-th
/// element (1 = exhaustive).
pub fn grad_check_strided(
    graph: &mut Graph<f64>,
    loss: TensorId,
    leaves: &[TensorId],
    tol: f64,
    stride: usize,
) -> GradCheckReport {
    assert!(stride >= 1);
    graph.recompute();
    graph.backward(loss);
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&l| graph.grad(l).to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    for (li, &leaf) in leaves.iter().enumerate() {
        let base = graph.value(leaf).to_vec();
        let mut probe = base.clone();
        for k in (0..base.len()).step_by(stride) {
            let h = 1e-6 * base[k].abs().max(1.0);
            probe[k] = base[k] + h;
            graph.set_leaf_value(leaf, &probe);
            graph.recompute();
            let up = graph.scalar_value(loss);
            probe[k] = base[k] - h;
            graph.set_leaf_value(leaf, &probe);
            graph.recompute();
            let down = graph.scalar_value(loss);
            probe[k] = base[k];
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[li][k], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
            }
            if err > tol {
                report.failures.push(GradCheckFailure {
                    leaf: li,
                    element: k,
                    analytic: analytic[li][k],
                    numeric,
                    rel_err: err,
                });
            }
        }
        graph.set_leaf_value(leaf, &base);
    }
    graph.recompute();
    graph.backward(loss);
    report
}

pub fn grad_check(
    graph: &mut Graph<f64>,
    loss: TensorId,
    leaves: &[TensorId],
    tol: f64,
) -> GradCheckReport {
    grad_check_strided(graph, loss, leaves, tol, 1)
}

#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand_leaf(
    g: &mut Graph<f64>,
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> TensorId {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    g.param(rows, cols, data)
}

/// Away-from-zero samples for kinked ops (relu, clamp, norms).
fn rand_leaf_offzero(
    g: &mut Graph<f64>,
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
) -> TensorId {
    let data = (0..rows * cols)
        .map(|_| {
            let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            sign * rng.random_range(0.2..1.0)
        })
        .collect();
    g.param(rows, cols, data)
}

fn readout(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, out: TensorId) -> TensorId {
    let (r, c) = g.shape(out);
    let w = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(r, c, w);
    let prod = g.mul(out, w);
    let col = g.sum_axis0(prod);
    g.sum_axis1(col)
}

/// Builds a tiny random graph for every primitive and finite-difference
/// checks it; the pass threshold is `tol` on the max relative error.
pub fn check_primitives(seed: u64, tol: f64) -> Vec<PrimitiveCheck> {
    type Builder = fn(&mut Graph<f64>, &mut ChaCha8Rng) -> (TensorId, Vec<TensorId>);
    let cases: Vec<(&'static str, Builder)> = vec![
        ("add", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            let b = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            (g.add(a, b), vec![a, b])
        }),
        ("add_bias", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            let b = rand_leaf(g, rng, 1, 4, -1.0, 1.0);
            (g.add_bias(a, b), vec![a, b])
        }),
        ("sub", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            let b = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            (g.sub(a, b), vec![a, b])
        }),
        ("mul", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            let b = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            (g.mul(a, b), vec![a, b])
        }),
        ("div", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            let b = rand_leaf(g, rng, 3, 4, 0.5, 1.5);
            (g.div(a, b), vec![a, b])
        }),
        ("scale", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            (g.scale(a, 0.37), vec![a])
        }),
        ("add_scalar", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            (g.add_scalar(a, -0.9), vec![a])
        }),
        ("clamp_min", |g, rng| {
            let a = rand_leaf_offzero(g, rng, 3, 4);
            (g.clamp_min(a, 0.0), vec![a])
        }),
        ("square", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            (g.square(a), vec![a])
        }),
        ("relu", |g, rng| {
            let a = rand_leaf_offzero(g, rng, 3, 4);
            (g.relu(a), vec![a])
        }),
        ("sigmoid", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -2.0, 2.0);
            (g.sigmoid(a), vec![a])
        }),
        ("softmax_rows", |g, rng| {
            let a = rand_leaf(g, rng, 3, 5, -2.0, 2.0);
            (g.softmax_rows(a), vec![a])
        }),
        ("matmul", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            let b = rand_leaf(g, rng, 4, 2, -1.0, 1.0);
            (g.matmul(a, b), vec![a, b])
        }),
        ("matmul_nt", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            let b = rand_leaf(g, rng, 5, 4, -1.0, 1.0);
            (g.matmul_nt(a, b), vec![a, b])
        }),
        ("matmul_tn", |g, rng| {
            let a = rand_leaf(g, rng, 4, 3, -1.0, 1.0);
            let b = rand_leaf(g, rng, 4, 2, -1.0, 1.0);
            (g.matmul_tn(a, b), vec![a, b])
        }),
        ("mean_axis0", |g, rng| {
            let a = rand_leaf(g, rng, 4, 3, -1.0, 1.0);
            (g.mean_axis0(a), vec![a])
        }),
        ("mean_axis1", |g, rng| {
            let a = rand_leaf(g, rng, 4, 3, -1.0, 1.0);
            (g.mean_axis1(a), vec![a])
        }),
        ("sum_axis0", |g, rng| {
            let a = rand_leaf(g, rng, 4, 3, -1.0, 1.0);
            (g.sum_axis0(a), vec![a])
        }),
        ("sum_axis1", |g, rng| {
            let a = rand_leaf(g, rng, 4, 3, -1.0, 1.0);
            (g.sum_axis1(a), vec![a])
        }),
        ("l2_norm_rows", |g, rng| {
            let a = rand_leaf_offzero(g, rng, 4, 3);
            (g.l2_norm_rows(a), vec![a])
        }),
        ("gather_rows", |g, rng| {
            let a = rand_leaf(g, rng, 5, 3, -1.0, 1.0);
            (g.gather_rows(a, &[0, 3, 3, 1]), vec![a])
        }),
        ("concat_cols", |g, rng| {
            let a = rand_leaf(g, rng, 3, 2, -1.0, 1.0);
            let b = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            (g.concat_cols(&[a, b]), vec![a, b])
        }),
        ("slice_cols", |g, rng| {
            let a = rand_leaf(g, rng, 3, 5, -1.0, 1.0);
            (g.slice_cols(a, 1, 3), vec![a])
        }),
        ("transpose", |g, rng| {
            let a = rand_leaf(g, rng, 3, 4, -1.0, 1.0);
            (g.transpose(a), vec![a])
        }),
        ("scale_rows", |g, rng| {
            let a = rand_leaf(g, rng, 4, 3, -1.0, 1.0);
            let s = rand_leaf(g, rng, 4, 1, 0.3, 1.5);
            (g.scale_rows(a, s), vec![a, s])
        }),
        ("layer_norm_rows", |g, rng| {
            let x = rand_leaf(g, rng, 3, 6, -1.0, 1.0);
            let gain = rand_leaf(g, rng, 1, 6, 0.7, 1.3);
            let bias = rand_leaf(g, rng, 1, 6, -0.2, 0.2);
            (g.layer_norm_rows(x, gain, bias, 1e-5), vec![x, gain, bias])
        }),
        ("kabsch", |g, rng| {
            let src = rand_leaf(g, rng, 6, 3, -1.0, 1.0);
            let dst = rand_leaf(g, rng, 6, 3, -1.0, 1.0);
            let w = rand_leaf(g, rng, 6, 1, 0.5, 1.5);
            (g.kabsch(src, dst, w), vec![src, dst, w])
        }),
    ];

    let mut results = Vec::new();
    for (name, build) in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
        let mut g = Graph::new();
        let (out, leaves) = build(&mut g, &mut rng);
        let loss = readout(&mut g, &mut rng, out);
        let report = grad_check(&mut g, loss, &leaves, tol);
        results.push(PrimitiveCheck {
            name,
            max_rel_err: report.max_rel_err,
            passed: report.passed(),
        });
    }
    results
}

/// Small deterministic string hash for per-case rng streams.
fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
