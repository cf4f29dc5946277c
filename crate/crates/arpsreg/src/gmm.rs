//! Isotropic Gaussian mixtures: parameter estimation from soft
//! memberships, likelihood evaluation, a classical EM registration
//! baseline, and the closed-form mixture-registration solve used by the
//! learned pipeline.

use crate::error::{Error, Result};
use crate::pointset::PointSet;
use crate::rigid::{weighted_umeyama, RigidTransform};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Variance floor applied when a component weight divides by sigma^2.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Row-stochastic soft assignment of N points to J components.
#[derive(Debug, Clone)]
pub struct MembershipMatrix {
    n: usize,
    j: usize,
    gamma: Vec<f64>,
}

impl MembershipMatrix {
    pub fn new(n: usize, j: usize, gamma: Vec<f64>) -> Result<Self> {
        if gamma.len() != n * j {
            return Err(Error::InvalidMembership(format!(
                "expected {n}x{j} entries, got {}",
                gamma.len()
            )));
        }
        for (row_idx, row) in gamma.chunks_exact(j).enumerate() {
            let mut sum = 0.0;
            for &g in row {
                if !(g >= 0.0) {
                    return Err(Error::InvalidMembership(format!(
                        "row {row_idx} has negative entry {g}"
                    )));
                }
                sum += g;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidMembership(format!(
                    "row {row_idx} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(MembershipMatrix { n, j, gamma })
    }

    pub fn one_hot(labels: &[usize], j: usize) -> Result<Self> {
        let mut gamma = vec![0.0; labels.len() * j];
        for (i, &l) in labels.iter().enumerate() {
            if l >= j {
                return Err(Error::InvalidMembership(format!(
                    "label {l} out of range for {j} components"
                )));
            }
            gamma[i * j + l] = 1.0;
        }
        MembershipMatrix::new(labels.len(), j, gamma)
    }

    pub fn uniform(n: usize, j: usize) -> Self {
        MembershipMatrix {
            n,
            j,
            gamma: vec![1.0 / j as f64; n * j],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> usize {
        self.j
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.j..(i + 1) * self.j]
    }

    pub fn values(&self) -> &[f64] {
        &self.gamma
    }
}

/// The (pi_j, mu_j, sigma_j^2) triplets of an isotropic mixture.
#[derive(Debug, Clone)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu: Vec<Vector3<f64>>,
    pub sigma2: Vec<f64>,
    /// Components whose effective mass fell below the empty threshold.
    pub empty: Vec<bool>,
}

impl GmmParams {
    pub fn components(&self) -> usize {
        self.pi.len()
    }
}

const EMPTY_MASS: f64 = 1e-12;

/// Mixture parameters implied by a membership matrix:
/// `pi_j = mean_i gamma_ij`, `mu_j = weighted mean`, `sigma_j^2 = weighted
/// mean squared deviation / 3`. Empty components get `mu = 0`,
/// `sigma^2 = SIGMA_FLOOR` and the empty flag.
pub fn gmm_from_memberships(ps: &PointSet, gamma: &MembershipMatrix) -> Result<GmmParams> {
    if gamma.n() != ps.len() {
        return Err(Error::InvalidMembership(format!(
            "membership rows {} != point count {}",
            gamma.n(),
            ps.len()
        )));
    }
    let n = ps.len();
    let j = gamma.components();
    let mut mass = vec![0.0; j]; // N * pi_j
    let mut mu = vec![Vector3::zeros(); j];
    for i in 0..n {
        let p = ps.get(i);
        for (k, &g) in gamma.row(i).iter().enumerate() {
            mass[k] += g;
            mu[k] += g * p;
        }
    }
    let mut empty = vec![false; j];
    for k in 0..j {
        if mass[k] < EMPTY_MASS {
            empty[k] = true;
            mu[k] = Vector3::zeros();
        } else {
            mu[k] /= mass[k];
        }
    }
    let mut sigma2 = vec![0.0; j];
    for i in 0..n {
        let p = ps.get(i);
        for (k, &g) in gamma.row(i).iter().enumerate() {
            if !empty[k] {
                sigma2[k] += g * (p - mu[k]).norm_squared();
            }
        }
    }
    for k in 0..j {
        if empty[k] {
            sigma2[k] = SIGMA_FLOOR;
        } else {
            sigma2[k] /= 3.0 * mass[k];
        }
    }
    let pi = mass.iter().map(|&m| m / n as f64).collect();
    Ok(GmmParams {
        pi,
        mu,
        sigma2,
        empty,
    })
}

/// Log-likelihood of the points under the mixture, computed with
/// log-sum-exp so distant outliers stay finite.
pub fn gmm_log_likelihood(ps: &PointSet, params: &GmmParams) -> Result<f64> {
    let j = params.components();
    if params.empty.iter().all(|&e| e) {
        return Err(Error::InvalidInput("all mixture components are empty".into()));
    }
    const LOG_2PI: f64 = 1.8378770664093453;
    let mut total = 0.0;
    let mut log_terms = Vec::with_capacity(j);
    for p in ps.iter() {
        log_terms.clear();
        for k in 0..j {
            if params.empty[k] || params.pi[k] <= 0.0 {
                continue;
            }
            let s2 = params.sigma2[k].max(SIGMA_FLOOR);
            let d2 = (p - params.mu[k]).norm_squared();
            log_terms
                .push(params.pi[k].ln() - 1.5 * (LOG_2PI + s2.ln()) - d2 / (2.0 * s2));
        }
        let mx = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = log_terms.iter().map(|&l| (l - mx).exp()).sum();
        total += mx + sum_exp.ln();
    }
    Ok(total)
}

/// Configuration of the classical EM registration baseline.
#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    /// Mixture size J.
    pub components: usize,
    /// Iteration cap for the transform loop.
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which iteration stops.
    pub tol: f64,
    /// Iteration cap for the target mixture fit.
    pub fit_iters: usize,
    /// Seeding stream for the k-means++-style initialization.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            components: 16,
            max_iters: 50,
            tol: 1e-6,
            fit_iters: 50,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub transform: RigidTransform,
    /// Log-likelihood of the target under its own fitted mixture, one
    /// entry per fit iteration.
    pub fit_ll_trace: Vec<f64>,
    /// Log-likelihood of the transformed source under the fixed target
    /// mixture, starting at the initial transform.
    pub reg_ll_trace: Vec<f64>,
    /// Number of empty-component reseeds during the fit.
    pub reseeded: usize,
}

/// Soft responsibilities of `ps` under `params` (rows sum to 1).
fn responsibilities(ps: &PointSet, params: &GmmParams) -> MembershipMatrix {
    const LOG_2PI: f64 = 1.8378770664093453;
    let n = ps.len();
    let j = params.components();
    let mut gamma = vec![0.0; n * j];
    let mut logs = vec![f64::NEG_INFINITY; j];
    for i in 0..n {
        let p = ps.get(i);
        for k in 0..j {
            logs[k] = if params.empty[k] || params.pi[k] <= 0.0 {
                f64::NEG_INFINITY
            } else {
                let s2 = params.sigma2[k].max(SIGMA_FLOOR);
                params.pi[k].ln() - 1.5 * (LOG_2PI + s2.ln())
                    - (p - params.mu[k]).norm_squared() / (2.0 * s2)
            };
        }
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut gamma[i * j..(i + 1) * j];
        let mut sum = 0.0;
        for k in 0..j {
            row[k] = (logs[k] - mx).exp();
            sum += row[k];
        }
        for g in row.iter_mut() {
            *g /= sum;
        }
    }
    MembershipMatrix { n, j, gamma }
}

/// k-means++-style seeding: first mean uniform, later means proportional
/// to squared distance from the chosen set.
fn seed_means(ps: &PointSet, j: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let n = ps.len();
    let mut means = Vec::with_capacity(j);
    means.push(ps.get(rng.random_range(0..n)));
    let mut d2: Vec<f64> = ps.iter().map(|p| (p - means[0]).norm_squared()).collect();
    while means.len() < j {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        };
        let m = ps.get(pick);
        means.push(m);
        for (i, p) in ps.iter().enumerate() {
            d2[i] = d2[i].min((p - m).norm_squared());
        }
    }
    means
}

/// Fits an isotropic mixture to `ps` by standard EM. Returns the params,
/// the per-iteration log-likelihood trace, and the reseed count.
pub fn fit_gmm(
    ps: &PointSet,
    j: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(GmmParams, Vec<f64>, usize)> {
    if j < 1 || ps.len() < j {
        return Err(Error::Config(format!(
            "cannot fit {j} components to {} points",
            ps.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = seed_means(ps, j, &mut rng);
    let mut d2_sum = 0.0;
    for p in ps.iter() {
        let nearest = means
            .iter()
            .map(|m| (p - m).norm_squared())
            .fold(f64::INFINITY, f64::min);
        d2_sum += nearest;
    }
    let sigma2_init = (d2_sum / (3.0 * ps.len() as f64)).max(SIGMA_FLOOR);
    let mut params = GmmParams {
        pi: vec![1.0 / j as f64; j],
        mu: means,
        sigma2: vec![sigma2_init; j],
        empty: vec![false; j],
    };

    let mut trace = Vec::new();
    let mut reseeded = 0;
    let mut last_ll = f64::NEG_INFINITY;
    for _ in 0..max_iters {
        let gamma = responsibilities(ps, &params);
        params = gmm_from_memberships(ps, &gamma)?;
        // Reseed collapsed components at the point farthest from the
        // surviving means.
        for k in 0..j {
            if params.empty[k] {
                reseeded += 1;
                let far = ps
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let d = params
                            .mu
                            .iter()
                            .zip(&params.empty)
                            .filter(|(_, &e)| !e)
                            .map(|(m, _)| (p - m).norm_squared())
                            .fold(f64::INFINITY, f64::min);
                        (i, d)
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                params.mu[k] = ps.get(far);
                params.sigma2[k] = sigma2_init;
                params.pi[k] = 1.0 / ps.len() as f64;
                params.empty[k] = false;
                let total: f64 = params.pi.iter().sum();
                for p in params.pi.iter_mut() {
                    *p /= total;
                }
            }
        }
        let ll = gmm_log_likelihood(ps, &params)?;
        trace.push(ll);
        if (ll - last_ll).abs() <= tol * (1.0 + ll.abs()) {
            break;
        }
        last_ll = ll;
    }
    Ok((params, trace, reseeded))
}

/// Classical EM registration: fit a mixture to the target, then alternate
/// soft correspondences and a weighted SVD solve over the transform.
pub fn em_register(src: &PointSet, tgt: &PointSet, cfg: &EmConfig) -> Result<EmResult> {
    let (params, fit_ll_trace, reseeded) =
        fit_gmm(tgt, cfg.components, cfg.fit_iters, cfg.tol, cfg.seed)?;

    // Centroid-aligned start.
    let mut transform = RigidTransform::new(
        nalgebra::Matrix3::identity(),
        tgt.centroid() - src.centroid(),
    )
    .expect("identity rotation is valid");

    let mut reg_ll_trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut last_ll = gmm_log_likelihood(&transform.apply(src), &params)?;
    reg_ll_trace.push(last_ll);

    let j = params.components();
    for _ in 0..cfg.max_iters {
        let moved = transform.apply(src);
        let gamma = responsibilities(&moved, &params);
        // Condense each point's component targets into one weighted pair:
        // sum_j (g_ij / s_j^2) ||T x_i - mu_j||^2 has the same minimizer as
        // W_i ||T x_i - m_i||^2 with m_i the weight-averaged mean.
        let mut dst = Vec::with_capacity(src.len());
        let mut weights = Vec::with_capacity(src.len());
        for i in 0..src.len() {
            let mut w_i = 0.0;
            let mut m_i = Vector3::zeros();
            for k in 0..j {
                if params.empty[k] {
                    continue;
                }
                let w = gamma.row(i)[k] / params.sigma2[k].max(SIGMA_FLOOR);
                w_i += w;
                m_i += w * params.mu[k];
            }
            dst.push(if w_i > 0.0 { m_i / w_i } else { Vector3::zeros() });
            weights.push(w_i);
        }
        transform = weighted_umeyama(src.points(), &dst, &weights)?;
        let ll = gmm_log_likelihood(&transform.apply(src), &params)?;
        reg_ll_trace.push(ll);
        if (ll - last_ll).abs() <= cfg.tol * (1.0 + ll.abs()) {
            break;
        }
        last_ll = ll;
    }
    Ok(EmResult {
        transform,
        fit_ll_trace,
        reg_ll_trace,
        reseeded,
    })
}

/// Closed-form mixture registration: estimate both parameter sets from the
/// memberships, then align the component means with weights
/// `pi_src_j / sigma_tgt_j^2`, skipping components empty on either side.
pub fn gmr_solve(
    src: &PointSet,
    gamma_src: &MembershipMatrix,
    tgt: &PointSet,
    gamma_tgt: &MembershipMatrix,
) -> Result<RigidTransform> {
    if gamma_src.components() != gamma_tgt.components() {
        return Err(Error::InvalidMembership(format!(
            "component counts differ: {} vs {}",
            gamma_src.components(),
            gamma_tgt.components()
        )));
    }
    let p_src = gmm_from_memberships(src, gamma_src)?;
    let p_tgt = gmm_from_memberships(tgt, gamma_tgt)?;
    let mut mu_src = Vec::new();
    let mut mu_tgt = Vec::new();
    let mut weights = Vec::new();
    for k in 0..p_src.components() {
        if p_src.empty[k] || p_tgt.empty[k] {
            continue;
        }
        mu_src.push(p_src.mu[k]);
        mu_tgt.push(p_tgt.mu[k]);
        weights.push(p_src.pi[k] / p_tgt.sigma2[k].max(SIGMA_FLOOR));
    }
    if mu_src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "only {} usable components, need at least 3",
            mu_src.len()
        )));
    }
    weighted_umeyama(&mu_src, &mu_tgt, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid::{from_euler_zyx_deg, random_transform, rotation_angle_deg, PoseSamplingConfig};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_memberships(seed: u64, n: usize, j: usize) -> MembershipMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gamma = vec![0.0; n * j];
        for row in gamma.chunks_exact_mut(j) {
            let mut sum = 0.0;
            for g in row.iter_mut() {
                *g = rng.random_range(0.01..1.0);
                sum += *g;
            }
            for g in row.iter_mut() {
                *g /= sum;
            }
        }
        MembershipMatrix::new(n, j, gamma).unwrap()
    }

    #[test]
    fn one_hot_memberships_recover_cluster_means() {
        let ps = PointSet::from_rows(&[
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [12.0, 0.0, 0.0],
        ])
        .unwrap();
        let gamma = MembershipMatrix::one_hot(&[0, 0, 1, 1], 2).unwrap();
        let p = gmm_from_memberships(&ps, &gamma).unwrap();
        assert_eq!(p.mu[0], Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(p.mu[1], Vector3::new(11.0, 0.0, 0.0));
        assert_eq!(p.pi, vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_memberships_collapse_to_centroid() {
        let ps = random_cloud(31, 40);
        let gamma = MembershipMatrix::uniform(40, 4);
        let p = gmm_from_memberships(&ps, &gamma).unwrap();
        let c = ps.centroid();
        for k in 0..4 {
            assert!((p.mu[k] - c).norm() < 1e-12);
            assert!((p.pi[k] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_formula_evaluation() {
        // Naive textbook triple loop as the oracle.
        let ps = random_cloud(32, 32);
        let gamma = random_memberships(33, 32, 4);
        let p = gmm_from_memberships(&ps, &gamma).unwrap();
        let n = 32usize;
        for k in 0..4 {
            let mut pi = 0.0;
            for i in 0..n {
                pi += gamma.row(i)[k];
            }
            pi /= n as f64;
            assert!((p.pi[k] - pi).abs() < 1e-12);
            let mut mu = Vector3::zeros();
            for i in 0..n {
                mu += gamma.row(i)[k] * ps.get(i);
            }
            mu /= n as f64 * pi;
            assert!((p.mu[k] - mu).norm() < 1e-12);
            let mut s2 = 0.0;
            for i in 0..n {
                s2 += gamma.row(i)[k] * (ps.get(i) - mu).dot(&(ps.get(i) - mu));
            }
            s2 /= 3.0 * n as f64 * pi;
            assert!((p.sigma2[k] - s2).abs() < 1e-12);
        }
    }

    #[test]
    fn params_are_permutation_invariant() {
        let ps = random_cloud(34, 48);
        let gamma = random_memberships(35, 48, 5);
        let base = gmm_from_memberships(&ps, &gamma).unwrap();
        let mut perm: Vec<usize> = (0..48).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let ps2 = ps.select(&perm);
        let mut g2 = vec![0.0; 48 * 5];
        for (new_i, &old_i) in perm.iter().enumerate() {
            g2[new_i * 5..(new_i + 1) * 5].copy_from_slice(gamma.row(old_i));
        }
        let gamma2 = MembershipMatrix::new(48, 5, g2).unwrap();
        let p2 = gmm_from_memberships(&ps2, &gamma2).unwrap();
        for k in 0..5 {
            assert!((base.pi[k] - p2.pi[k]).abs() < 1e-12);
            assert!((base.mu[k] - p2.mu[k]).norm() < 1e-12);
            assert!((base.sigma2[k] - p2.sigma2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_row_stochastic_gamma() {
        assert!(MembershipMatrix::new(2, 2, vec![0.5, 0.6, 0.5, 0.5]).is_err());
        assert!(MembershipMatrix::new(2, 2, vec![-0.1, 1.1, 0.5, 0.5]).is_err());
    }

    #[test]
    fn log_likelihood_single_component_closed_form() {
        let ps = PointSet::from_rows(&[[0.5, -0.25, 1.0]]).unwrap();
        let params = GmmParams {
            pi: vec![1.0],
            mu: vec![Vector3::new(0.5, -0.25, 1.0)],
            sigma2: vec![1.0],
            empty: vec![false],
        };
        let ll = gmm_log_likelihood(&ps, &params).unwrap();
        let expected = -(1.5) * (2.0 * std::f64::consts::PI).ln();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_stays_finite_for_far_outliers() {
        let ps = PointSet::from_rows(&[[100.0, 0.0, 0.0]]).unwrap();
        let params = GmmParams {
            pi: vec![0.5, 0.5],
            mu: vec![Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0)],
            sigma2: vec![1.0, 1.0],
            empty: vec![false, false],
        };
        let ll = gmm_log_likelihood(&ps, &params).unwrap();
        assert!(ll.is_finite());
    }

    #[test]
    fn log_likelihood_matches_naive_summation() {
        let ps = random_cloud(37, 10);
        let gamma = random_memberships(38, 10, 3);
        let params = gmm_from_memberships(&ps, &gamma).unwrap();
        let ll = gmm_log_likelihood(&ps, &params).unwrap();
        // Direct density evaluation without log-sum-exp.
        let mut naive = 0.0;
        for p in ps.iter() {
            let mut density = 0.0;
            for k in 0..3 {
                let s2 = params.sigma2[k];
                let norm = (2.0 * std::f64::consts::PI * s2).powf(-1.5);
                density += params.pi[k]
                    * norm
                    * (-(p - params.mu[k]).norm_squared() / (2.0 * s2)).exp();
            }
            naive += density.ln();
        }
        assert!((ll - naive).abs() < 1e-9);
    }

    #[test]
    fn em_on_aligned_sets_stays_near_identity() {
        let ps = random_cloud(39, 200);
        let cfg = EmConfig {
            components: 8,
            ..EmConfig::default()
        };
        let res = em_register(&ps, &ps, &cfg).unwrap();
        assert!(
            rotation_angle_deg(res.transform.rotation(), &nalgebra::Matrix3::identity()) < 0.5
        );
        assert!(res.transform.translation().norm() < 0.01);
    }

    #[test]
    fn em_recovers_small_rotation() {
        let src = random_cloud(40, 300);
        let r = from_euler_zyx_deg(5.0, 0.0, 0.0);
        let t_gt = RigidTransform::new(r, Vector3::new(0.02, -0.01, 0.03)).unwrap();
        let tgt = t_gt.apply(&src);
        let cfg = EmConfig {
            components: 12,
            ..EmConfig::default()
        };
        let res = em_register(&src, &tgt, &cfg).unwrap();
        assert!(
            rotation_angle_deg(res.transform.rotation(), t_gt.rotation()) < 0.5,
            "rotation error {:.3}",
            rotation_angle_deg(res.transform.rotation(), t_gt.rotation())
        );
        assert!((res.transform.translation() - t_gt.translation()).norm() < 0.01);
    }

    #[test]
    fn em_traces_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..20 {
            let src = random_cloud(100 + trial, 150);
            let t = random_transform(
                &mut rng,
                &PoseSamplingConfig {
                    euler_range_deg: 10.0,
                    translation_range: 0.1,
                },
            );
            let tgt = t.apply(&src);
            let cfg = EmConfig {
                components: 6,
                ..EmConfig::default()
            };
            let res = em_register(&src, &tgt, &cfg).unwrap();
            for w in res.fit_ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "fit trace decreased: {} -> {}", w[0], w[1]);
            }
            for w in res.reg_ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "reg trace decreased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn gmr_exact_on_duplicated_pairs_with_consistent_memberships() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let src = random_cloud(43, 64);
        let t_gt = random_transform(&mut rng, &PoseSamplingConfig::default());
        let tgt = t_gt.apply(&src);
        let gamma = random_memberships(44, 64, 6);
        let t = gmr_solve(&src, &gamma, &tgt, &gamma).unwrap();
        assert!(rotation_angle_deg(t.rotation(), t_gt.rotation()) < 1e-6);
        assert!((t.translation() - t_gt.translation()).norm() < 1e-9);
    }

    #[test]
    fn gmr_reduces_to_weighted_umeyama_on_hand_built_means() {
        // One-hot memberships with known cluster geometry: the solve must
        // equal calling the SVD solver on the cluster means directly.
        let src = PointSet::from_rows(&[
            [0.0, 0.0, 0.0],
            [0.2, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [1.2, 1.0, 0.0],
            [0.0, 2.0, 1.0],
            [0.2, 2.0, 1.0],
            [2.0, 0.0, 2.0],
            [2.2, 0.0, 2.0],
        ])
        .unwrap();
        let t_gt = RigidTransform::new(
            from_euler_zyx_deg(25.0, -10.0, 5.0),
            Vector3::new(0.1, 0.2, -0.3),
        )
        .unwrap();
        let tgt = t_gt.apply(&src);
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let gamma = MembershipMatrix::one_hot(&labels, 4).unwrap();
        let t = gmr_solve(&src, &gamma, &tgt, &gamma).unwrap();

        let p_src = gmm_from_memberships(&src, &gamma).unwrap();
        let p_tgt = gmm_from_memberships(&tgt, &gamma).unwrap();
        let w: Vec<f64> = (0..4)
            .map(|k| p_src.pi[k] / p_tgt.sigma2[k].max(SIGMA_FLOOR))
            .collect();
        let direct = weighted_umeyama(&p_src.mu, &p_tgt.mu, &w).unwrap();
        assert!((t.rotation() - direct.rotation()).norm() < 1e-12);
        assert!((t.translation() - direct.translation()).norm() < 1e-12);
    }

    #[test]
    fn gmr_errors_with_too_few_usable_components() {
        let src = random_cloud(45, 10);
        let tgt = random_cloud(46, 10);
        // All mass on two components; the other two stay empty.
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let gamma = MembershipMatrix::one_hot(&labels, 4).unwrap();
        assert!(gmr_solve(&src, &gamma, &tgt, &gamma).is_err());
    }
}
