//! Differentiable weighted rigid alignment.
//!
//! Forward: the classic SVD solution of `argmin sum_j w_j ||R s_j + t - d_j||^2`
//! with the reflection fix on the smallest singular value. Backward: the
//! analytic SVD adjoint restricted to the rotation factor. Both passes run
//! in f64 regardless of the graph element type; the 3x3 decomposition is
//! cheap and f32 accumulation here costs accuracy where it hurts most.

use crate::scalar::Scalar;
use nalgebra::{Matrix3, Vector3};

struct Solution {
    w_sum: f64,
    src_mean: Vector3<f64>,
    dst_mean: Vector3<f64>,
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: Vector3<f64>,
    d: Vector3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

fn to_vec3<T: Scalar>(buf: &[T], j: usize) -> Vector3<f64> {
    Vector3::new(
        buf[3 * j].to_f64(),
        buf[3 * j + 1].to_f64(),
        buf[3 * j + 2].to_f64(),
    )
}

fn solve<T: Scalar>(src: &[T], dst: &[T], weights: &[T]) -> Solution {
    let j = weights.len();
    let mut w_sum = 0.0;
    let mut src_mean = Vector3::zeros();
    let mut dst_mean = Vector3::zeros();
    for k in 0..j {
        let w = weights[k].to_f64();
        w_sum += w;
        src_mean += w * to_vec3(src, k);
        dst_mean += w * to_vec3(dst, k);
    }
    src_mean /= w_sum;
    dst_mean /= w_sum;

    let mut b = Matrix3::zeros();
    for k in 0..j {
        let w = weights[k].to_f64();
        let s = to_vec3(src, k) - src_mean;
        let d = to_vec3(dst, k) - dst_mean;
        b += w * d * s.transpose();
    }

    let svd = b.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let sigma = Vector3::new(
        svd.singular_values[0],
        svd.singular_values[1],
        svd.singular_values[2],
    );

    // Reflection fix: flip the column associated with the smallest
    // singular value when det(U V^T) < 0.
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u * v.transpose()).determinant() < 0.0 {
        let mut min_idx = 0;
        for i in 1..3 {
            if sigma[i] < sigma[min_idx] {
                min_idx = i;
            }
        }
        d[min_idx] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&d) * v.transpose();
    let t = dst_mean - r * src_mean;

    Solution {
        w_sum,
        src_mean,
        dst_mean,
        u,
        v,
        sigma,
        d,
        r,
        t,
    }
}

pub(crate) fn kabsch_forward<T: Scalar>(src: &[T], dst: &[T], weights: &[T]) -> Vec<T> {
    let sol = solve(src, dst, weights);
    let mut out = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            out.push(T::from_f64(sol.r[(row, col)]));
        }
        out.push(T::from_f64(sol.t[row]));
    }
    out
}

pub(crate) fn kabsch_backward<T: Scalar>(
    src: &[T],
    dst: &[T],
    weights: &[T],
    g_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let j = weights.len();
    let sol = solve(src, dst, weights);

    let mut g_r = Matrix3::zeros();
    let mut g_t = Vector3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            g_r[(row, col)] = g_out[row * 4 + col].to_f64();
        }
        g_t[row] = g_out[row * 4 + 3].to_f64();
    }

    // t = dst_mean - R src_mean.
    let g_dst_mean = g_t;
    let g_src_mean = -sol.r.transpose() * g_t;
    g_r -= g_t * sol.src_mean.transpose();

    // R = U diag(d) V^T.
    let dm = Matrix3::from_diagonal(&sol.d);
    let g_u = g_r * sol.v * dm;
    let g_v = g_r.transpose() * sol.u * dm;

    // SVD adjoint for B = U Sigma V^T when the loss depends on U and V only.
    let s_u = sol.u.transpose() * g_u;
    let s_v = sol.v.transpose() * g_v;
    let scale = sol.sigma[0] * sol.sigma[0] + 1e-300;
    let mut inner = Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                continue;
            }
            let mut den = sol.sigma[b] * sol.sigma[b] - sol.sigma[a] * sol.sigma[a];
            // Guard near-degenerate singular values; exact formulas blow up
            // there and the loss itself is non-smooth.
            let eps = 1e-12 * scale.max(1e-12);
            if den.abs() < eps {
                den = if den >= 0.0 { eps } else { -eps };
            }
            let f = 1.0 / den;
            inner[(a, b)] = f
                * (sol.sigma[b] * (s_u[(a, b)] - s_u[(b, a)])
                    + sol.sigma[a] * (s_v[(a, b)] - s_v[(b, a)]));
        }
    }
    let g_b = sol.u * inner * sol.v.transpose();
    let g_b_t = g_b.transpose();

    let mut g_src = vec![T::ZERO; 3 * j];
    let mut g_dst = vec![T::ZERO; 3 * j];
    let mut g_w = vec![T::ZERO; j];
    for k in 0..j {
        let w = weights[k].to_f64();
        let s_c = to_vec3(src, k) - sol.src_mean;
        let d_c = to_vec3(dst, k) - sol.dst_mean;
        let gs = w * (g_b_t * d_c) + (w / sol.w_sum) * g_src_mean;
        let gd = w * (g_b * s_c) + (w / sol.w_sum) * g_dst_mean;
        let gw = d_c.dot(&(g_b * s_c))
            + (s_c.dot(&g_src_mean) + d_c.dot(&g_dst_mean)) / sol.w_sum;
        for a in 0..3 {
            g_src[3 * k + a] = T::from_f64(gs[a]);
            g_dst[3 * k + a] = T::from_f64(gd[a]);
        }
        g_w[k] = T::from_f64(gw);
    }
    (g_src, g_dst, g_w)
}
