//! Reference posterior machinery: Gauss–Newton MAP estimation, a low-rank
//! Laplace approximation around it, and a preconditioned Crank–Nicolson
//! sampler used as desk-scale ground truth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{self, PdeConfig};
use crate::prior::{Field, GaussianPrior};
use crate::subspace;

/// Armijo sufficient-decrease constant for the MAP line search.
const ARMIJO_C: f64 = 1e-4;
/// Convergence threshold on ‖K⁻¹∇I‖, the gradient norm in the C-metric.
const MAP_GRAD_TOL: f64 = 1e-8;

/// Result of the MAP search.
#[derive(Debug, Clone)]
pub struct MapEstimate {
    pub point: Field,
    pub iterations: usize,
    /// ‖K⁻¹∇I‖ at the returned point.
    pub gradient_norm: f64,
}

/// Regularized objective I(m) = Φ(m) + ½‖m‖²_{C⁻¹}.
fn map_objective(cfg: &PdeConfig, prior: &GaussianPrior, y: &DVector<f64>, m: &Field) -> Result<f64> {
    Ok(forward::potential(cfg, y, m)? + 0.5 * prior.cm_inner(m, m))
}

/// Dense observable Jacobian at m, solving the state first when needed.
fn jacobian_at(cfg: &PdeConfig, m: &Field) -> Result<DMatrix<f64>> {
    if cfg.is_linear() {
        forward::full_jacobian(cfg, m, None)
    } else {
        let state = forward::solve_pde(cfg, m)?;
        forward::full_jacobian(cfg, m, Some(&state))
    }
}

/// Gauss–Newton minimization of Φ + ½‖m‖²_{C⁻¹} from m = 0, with Armijo
/// backtracking. Each step solves (JᵀΓ⁻¹J + C⁻¹)δ = −∇I densely, which is
/// cheap at this scale and reuses the same Hessian the Laplace build needs.
pub fn find_map(
    cfg: &PdeConfig,
    prior: &GaussianPrior,
    y: &DVector<f64>,
    max_iters: usize,
) -> Result<MapEstimate> {
    if y.len() != cfg.d_y() {
        return Err(Error::config("observation length mismatch"));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::config("observation must be finite"));
    }
    let n = prior.node_count();
    let precision = prior.operator() * prior.operator();
    let mut m = Field::zeros(n);
    let (phi0, mut grad_phi) = forward::potential_and_gradient(cfg, y, &m)?;
    let mut value = phi0 + 0.5 * prior.cm_inner(&m, &m);

    for iter in 0..=max_iters {
        let grad = &grad_phi + prior.apply_precision(&m);
        let wnorm = prior.solve_k(&grad).norm();
        if wnorm <= MAP_GRAD_TOL {
            return Ok(MapEstimate { point: m, iterations: iter, gradient_norm: wnorm });
        }
        if iter == max_iters {
            break;
        }

        let jac = jacobian_at(cfg, &m)?;
        let mut hess = precision.clone();
        hess.gemm_tr(1.0 / cfg.noise_variance, &jac, &jac, 1.0);
        let chol = nalgebra::Cholesky::new(hess)
            .ok_or_else(|| Error::numerical("Gauss-Newton system not positive definite"))?;
        let delta = chol.solve(&(-&grad));
        let slope = grad.dot(&delta);

        let mut alpha = 1.0;
        loop {
            let trial = &m + &delta * alpha;
            match map_objective(cfg, prior, y, &trial) {
                Ok(v) if v <= value + ARMIJO_C * alpha * slope => {
                    m = trial;
                    break;
                }
                // Solver failures along the path count as insufficient
                // decrease and shorten the step.
                Ok(_) | Err(Error::Numerical(_)) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                return Err(Error::numerical("MAP not converged"));
            }
        }
        let refreshed = forward::potential_and_gradient(cfg, y, &m)?;
        grad_phi = refreshed.1;
        value = refreshed.0 + 0.5 * prior.cm_inner(&m, &m);
    }
    Err(Error::numerical("MAP not converged"))
}

/// Gaussian posterior approximation N(m_MAP, C_LA) with the covariance in
/// low-rank update form and a dense Cholesky factor for sampling.
#[derive(Debug, Clone)]
pub struct LaplaceModel {
    pub map_point: Field,
    pub map_iterations: usize,
    /// Leading generalized eigenvalues of the MAP Gauss–Newton Hessian.
    pub eigenvalues: DVector<f64>,
    /// node_count × d_LA eigenvector block.
    pub decoder: DMatrix<f64>,
    /// d_LA × node_count dual block, encoder = decoderᵀ C⁻¹.
    pub encoder: DMatrix<f64>,
    /// C_LA = C − D diag(λ/(1+λ)) E C.
    pub cov: DMatrix<f64>,
    /// Lower Cholesky factor of C_LA.
    pub chol: DMatrix<f64>,
}

impl LaplaceModel {
    pub fn d_la(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn sample_with(&self, rng: &mut impl Rng) -> Field {
        let xi = Field::from_fn(self.map_point.len(), |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        &self.map_point + &self.chol * xi
    }
}

/// MAP + GEVP of the Gauss–Newton Hessian at the MAP against C⁻¹, truncated
/// at `d_la` pairs (default: all λ_j > 1e-6·λ₁), then the dense covariance.
pub fn build_laplace(
    cfg: &PdeConfig,
    prior: &GaussianPrior,
    y: &DVector<f64>,
    d_la: Option<usize>,
) -> Result<LaplaceModel> {
    let map = find_map(cfg, prior, y, 100)?;
    let jac = jacobian_at(cfg, &map.point)?;
    let n = prior.node_count();
    let mut h = DMatrix::zeros(n, n);
    h.gemm_tr(1.0 / cfg.noise_variance, &jac, &jac, 0.0);
    let full = subspace::solve_gevp(prior, &h, n)?;

    let rank = match d_la {
        Some(r) => {
            if r > n {
                return Err(Error::config("d_LA exceeds the number of nodes"));
            }
            r
        }
        None => {
            let lead = full.eigenvalues[0];
            full.eigenvalues.iter().filter(|&&l| l > 1e-6 * lead).count()
        }
    };

    let eigenvalues = full.eigenvalues.rows(0, rank).into_owned();
    let decoder = full.decoder.columns(0, rank).into_owned();
    let encoder = full.encoder.rows(0, rank).into_owned();

    let c = prior.covariance_dense();
    let ec = &encoder * &c;
    let shrink = DMatrix::from_diagonal(&eigenvalues.map(|l| l / (1.0 + l)));
    let mut cov = &c - &decoder * shrink * ec;
    // E C = Dᵀ in exact arithmetic, so the update is symmetric; fold
    // roundoff asymmetry back before factorizing.
    cov = (&cov + cov.transpose()) * 0.5;
    let chol = nalgebra::Cholesky::new(cov.clone())
        .ok_or_else(|| Error::numerical("LA covariance indefinite"))?;
    Ok(LaplaceModel {
        map_point: map.point,
        map_iterations: map.iterations,
        eigenvalues,
        decoder,
        encoder,
        cov,
        chol: chol.l(),
    })
}

/// log dμ_LA/dμ_prior at m:
/// ⟨m, m_MAP⟩_{C⁻¹} − ½‖m_MAP‖²_{C⁻¹}
/// − ½‖E m‖²_Λ + (E m)ᵀΛ(E m_MAP) − ½‖E m_MAP‖²_Λ + ½Σ log(1+λ_j),
/// which equals log N(m; m_MAP, C_LA) − log N(m; 0, C).
pub fn laplace_log_ratio(la: &LaplaceModel, prior: &GaussianPrior, m: &Field) -> f64 {
    let pm = prior.apply_precision(&la.map_point);
    let em = &la.encoder * m;
    let emap = &la.encoder * &la.map_point;
    let lam = &la.eigenvalues;
    let quad = |a: &DVector<f64>, b: &DVector<f64>| -> f64 {
        a.iter().zip(b.iter()).zip(lam.iter()).map(|((x, y), l)| l * x * y).sum()
    };
    m.dot(&pm) - 0.5 * la.map_point.dot(&pm) - 0.5 * quad(&em, &em) + quad(&em, &emap)
        - 0.5 * quad(&emap, &emap)
        + 0.5 * lam.iter().map(|l| (1.0 + l).ln()).sum::<f64>()
}

/// Options for the pCN sampler. `n` retained states are produced after
/// `burn_in` steps, keeping every `thin`-th step. When `auto_tune` is set,
/// β is nudged toward 25% acceptance in 100-step windows during burn-in.
#[derive(Debug, Clone, Copy)]
pub struct PcnOptions {
    pub n: usize,
    pub beta: f64,
    pub burn_in: usize,
    pub thin: usize,
    pub auto_tune: bool,
}

/// A thinned pCN chain.
#[derive(Debug, Clone)]
pub struct McmcChain {
    pub samples: Vec<Field>,
    /// Acceptance rate over the post-burn-in phase.
    pub acceptance_rate: f64,
    /// Step size in effect at the end (tuned or as given).
    pub beta: f64,
    /// Proposals rejected because the forward solver failed on them.
    pub pde_failures: usize,
}

/// Preconditioned Crank–Nicolson: m' = √(1−β²)·m + β·ξ with ξ a prior draw,
/// accepted with min{1, exp(Φ(m) − Φ(m'))}. With `y = None` the potential is
/// identically zero and the chain targets the prior.
pub fn pcn_sample(
    cfg: &PdeConfig,
    prior: &GaussianPrior,
    y: Option<&DVector<f64>>,
    opts: &PcnOptions,
    rng: &mut impl Rng,
) -> Result<McmcChain> {
    if !(opts.beta > 0.0 && opts.beta < 1.0) {
        return Err(Error::config("pCN step size must lie strictly in (0, 1)"));
    }
    if opts.thin == 0 {
        return Err(Error::config("thinning stride must be positive"));
    }
    let phi_of = |m: &Field| -> Result<f64> {
        match y {
            None => Ok(0.0),
            Some(obs) => forward::potential(cfg, obs, m),
        }
    };

    let mut beta = opts.beta;
    let mut m = Field::zeros(prior.node_count());
    let mut phi = phi_of(&m)?;
    let mut samples = Vec::with_capacity(opts.n);
    let mut pde_failures = 0usize;
    let mut accepted_main = 0usize;
    let mut window_accepts = 0usize;
    let mut window_len = 0usize;

    let total = opts.burn_in + opts.n * opts.thin;
    for step in 0..total {
        let in_burn = step < opts.burn_in;
        let xi = prior.sample_with(rng);
        let proposal = &m * (1.0 - beta * beta).sqrt() + xi * beta;
        let mut accepted = false;
        match phi_of(&proposal) {
            Ok(phi_new) => {
                let log_alpha = phi - phi_new;
                if log_alpha >= 0.0 || rng.gen::<f64>() < log_alpha.exp() {
                    m = proposal;
                    phi = phi_new;
                    accepted = true;
                }
            }
            Err(Error::Numerical(_)) => {
                pde_failures += 1;
            }
            Err(e) => return Err(e),
        }

        if in_burn {
            if opts.auto_tune {
                window_len += 1;
                if accepted {
                    window_accepts += 1;
                }
                if window_len == 100 {
                    let rate = window_accepts as f64 / 100.0;
                    // Larger β lowers acceptance; steer toward 25%.
                    if rate > 0.25 {
                        beta = (beta * 1.1).min(0.999);
                    } else {
                        beta = (beta / 1.1).max(1e-4);
                    }
                    window_len = 0;
                    window_accepts = 0;
                }
            }
        } else {
            if accepted {
                accepted_main += 1;
            }
            let offset = step - opts.burn_in;
            if (offset + 1) % opts.thin == 0 {
                samples.push(m.clone());
            }
        }
    }

    let denom = (opts.n * opts.thin).max(1);
    Ok(McmcChain {
        samples,
        acceptance_rate: accepted_main as f64 / denom as f64,
        beta,
        pde_failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ModelMode, interior_lattice};
    use crate::prior::{Anisotropy, Mesh};
    use crate::seed;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn linear_problem(nx: usize, ny: usize, k: usize) -> (GaussianPrior, PdeConfig) {
        let mesh = Mesh::new(nx, ny).unwrap();
        let prior = GaussianPrior::build(mesh, 0.5, 1.0, Anisotropy::ISOTROPIC).unwrap();
        let pts = interior_lattice(&mesh, k).unwrap();
        let cfg = PdeConfig::linear_from_selector(mesh, pts, 0.05).unwrap();
        (prior, cfg)
    }

    /// Dense conjugate-Gaussian posterior (mean, covariance).
    fn dense_posterior(
        prior: &GaussianPrior,
        cfg: &PdeConfig,
        y: &DVector<f64>,
    ) -> (Field, DMatrix<f64>) {
        let b = cfg.linear_matrix().unwrap();
        let mut precision = prior.operator() * prior.operator();
        precision.gemm_tr(1.0 / cfg.noise_variance, b, b, 1.0);
        let chol = nalgebra::Cholesky::new(precision).unwrap();
        let mean = chol.solve(&(b.transpose() * y / cfg.noise_variance));
        (mean, chol.inverse())
    }

    #[test]
    fn linear_map_matches_conjugate_mean() {
        let (prior, cfg) = linear_problem(4, 4, 2);
        let mut rng = seed::substream(1, "y");
        let y = DVector::from_fn(cfg.d_y(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let est = find_map(&cfg, &prior, &y, 100).unwrap();
        let (mean, _) = dense_posterior(&prior, &cfg, &y);
        assert!((est.point - &mean).norm() <= 1e-8 * mean.norm());
    }

    #[test]
    fn zero_data_map_is_zero_immediately() {
        let (prior, cfg) = linear_problem(4, 4, 2);
        let y = DVector::zeros(cfg.d_y());
        let est = find_map(&cfg, &prior, &y, 100).unwrap();
        assert!(est.iterations <= 2);
        assert!(est.point.norm() <= 1e-12);
    }

    #[test]
    fn nonlinear_map_is_a_local_minimum() {
        let mesh = Mesh::new(8, 8).unwrap();
        let prior = GaussianPrior::build(mesh, 0.3, 2.0, Anisotropy::ISOTROPIC).unwrap();
        let pts = interior_lattice(&mesh, 3).unwrap();
        let cfg = PdeConfig::nonlinear(mesh, pts, 1e-2).unwrap();
        let truth = prior.sample_with(&mut seed::substream(2, "truth"));
        let y = forward::synthesize_observation(&cfg, &truth, &mut seed::substream(2, "noise"))
            .unwrap();
        let est = find_map(&cfg, &prior, &y, 100).unwrap();
        let base = map_objective(&cfg, &prior, &y, &est.point).unwrap();
        let mut rng = seed::substream(3, "probes");
        for _ in 0..20 {
            let mut d = Field::from_fn(prior.node_count(), |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            d /= d.norm();
            let probe = map_objective(&cfg, &prior, &y, &(&est.point + d * 1e-3)).unwrap();
            assert!(probe >= base - 1e-12, "descent direction at the MAP");
        }
    }

    #[test]
    fn nonlinear_desk_map_converges_quickly() {
        let mesh = Mesh::new(16, 16).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let pts = interior_lattice(&mesh, 5).unwrap();
        let cfg = PdeConfig::nonlinear(mesh, pts, 1.94e-3).unwrap();
        let truth = prior.sample_with(&mut seed::substream(0, "truth"));
        let y = forward::synthesize_observation(&cfg, &truth, &mut seed::substream(0, "noise"))
            .unwrap();
        let est = find_map(&cfg, &prior, &y, 100).unwrap();
        assert!(est.iterations <= 30, "took {} iterations", est.iterations);
        assert!(est.gradient_norm <= 1e-8);
    }

    #[test]
    fn linear_laplace_equals_conjugate_posterior() {
        let (prior, cfg) = linear_problem(4, 4, 2);
        let mut rng = seed::substream(4, "y");
        let y = DVector::from_fn(cfg.d_y(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let la = build_laplace(&cfg, &prior, &y, None).unwrap();
        let (mean, cov) = dense_posterior(&prior, &cfg, &y);
        assert!((&la.map_point - &mean).norm() <= 1e-8 * mean.norm());
        assert!((&la.cov - &cov).norm() <= 1e-8 * cov.norm());
        assert!(la.d_la() <= cfg.d_y());
        assert!(la.eigenvalues.iter().all(|&l| l >= -1e-8));
    }

    #[test]
    fn uninformative_data_reduce_laplace_to_prior() {
        let mesh = Mesh::new(4, 4).unwrap();
        let prior = GaussianPrior::build(mesh, 0.5, 1.0, Anisotropy::ISOTROPIC).unwrap();
        let pts = interior_lattice(&mesh, 1).unwrap();
        let b = DMatrix::zeros(pts.len(), mesh.node_count());
        let cfg = PdeConfig::new(mesh, pts, 0.05, ModelMode::LinearTest { b }).unwrap();
        let y = DVector::zeros(cfg.d_y());
        let la = build_laplace(&cfg, &prior, &y, None).unwrap();
        assert_eq!(la.d_la(), 0);
        let c = prior.covariance_dense();
        assert!((&la.cov - &c).norm() <= 1e-10 * c.norm());
        // λ = 0, m_MAP = 0: the log ratio vanishes identically.
        let m = prior.sample_with(&mut seed::substream(5, "m"));
        assert_relative_eq!(laplace_log_ratio(&la, &prior, &m), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn log_ratio_at_map_with_single_eigenvalue() {
        let (prior, cfg) = linear_problem(4, 4, 1);
        let y = DVector::zeros(cfg.d_y());
        let mut la = build_laplace(&cfg, &prior, &y, Some(1)).unwrap();
        la.eigenvalues[0] = 3.0;
        la.map_point.fill(0.0);
        let zero = Field::zeros(prior.node_count());
        assert_relative_eq!(
            laplace_log_ratio(&la, &prior, &zero),
            0.5 * 4.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_ratio_matches_dense_gaussian_densities() {
        // 2×2 cells -> 9 nodes.
        let (prior, cfg) = linear_problem(2, 2, 1);
        let mut rng = seed::substream(6, "y");
        let y = DVector::from_fn(cfg.d_y(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let la = build_laplace(&cfg, &prior, &y, None).unwrap();

        let log_density = |m: &Field, mean: &Field, cov: &DMatrix<f64>| -> f64 {
            let chol = nalgebra::Cholesky::new(cov.clone()).unwrap();
            let diff = m - mean;
            let sol = chol.solve(&diff);
            let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            -0.5 * diff.dot(&sol) - 0.5 * logdet
        };
        let c = prior.covariance_dense();
        let zero = Field::zeros(prior.node_count());
        for probe in 0..5 {
            let m = prior.sample_with(&mut seed::substream(7 + probe, "m"));
            let oracle =
                log_density(&m, &la.map_point, &la.cov) - log_density(&m, &zero, &c);
            let got = laplace_log_ratio(&la, &prior, &m);
            assert_relative_eq!(got, oracle, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn pcn_step_size_preconditions() {
        let (prior, cfg) = linear_problem(2, 2, 1);
        let opts = PcnOptions { n: 10, beta: 0.0, burn_in: 0, thin: 1, auto_tune: false };
        let mut rng = seed::substream(8, "chain");
        assert!(pcn_sample(&cfg, &prior, None, &opts, &mut rng).is_err());
        let opts = PcnOptions { n: 10, beta: 1.0, burn_in: 0, thin: 1, auto_tune: false };
        assert!(pcn_sample(&cfg, &prior, None, &opts, &mut rng).is_err());
    }

    #[test]
    fn prior_mode_chain_matches_prior_variances() {
        let (prior, cfg) = linear_problem(2, 2, 1);
        let opts =
            PcnOptions { n: 50_000, beta: 0.9, burn_in: 500, thin: 1, auto_tune: false };
        let mut rng = seed::substream(9, "chain");
        let chain = pcn_sample(&cfg, &prior, None, &opts, &mut rng).unwrap();
        assert_eq!(chain.samples.len(), 50_000);
        assert_relative_eq!(chain.acceptance_rate, 1.0, epsilon = 1e-12);
        let n = prior.node_count();
        let c = prior.covariance_dense();
        let mut mean = Field::zeros(n);
        for s in &chain.samples {
            mean += s;
        }
        mean /= chain.samples.len() as f64;
        for i in 0..n {
            let var: f64 = chain
                .samples
                .iter()
                .map(|s| (s[i] - mean[i]) * (s[i] - mean[i]))
                .sum::<f64>()
                / (chain.samples.len() - 1) as f64;
            assert!(
                (var - c[(i, i)]).abs() <= 0.1 * c[(i, i)],
                "node {i}: chain var {var} vs prior {}",
                c[(i, i)]
            );
        }
    }

    #[test]
    fn linear_chain_matches_conjugate_posterior() {
        let (prior, cfg) = linear_problem(4, 4, 2);
        let mut rng_y = seed::substream(10, "y");
        let y = DVector::from_fn(cfg.d_y(), |_, _| rng_y.sample::<f64, _>(StandardNormal));
        let (mean, cov) = dense_posterior(&prior, &cfg, &y);
        let opts =
            PcnOptions { n: 30_000, beta: 0.3, burn_in: 3_000, thin: 1, auto_tune: true };
        let mut rng = seed::substream(11, "chain");
        let chain = pcn_sample(&cfg, &prior, Some(&y), &opts, &mut rng).unwrap();
        assert!(chain.acceptance_rate > 0.05 && chain.acceptance_rate < 0.9);

        // Batch-means standard errors on the observed coordinates.
        let coords: Vec<usize> = cfg.obs_points.clone();
        let k = 25;
        let bs = chain.samples.len() / k;
        for &c0 in &coords {
            let vals: Vec<f64> = chain.samples.iter().map(|s| s[c0]).collect();
            let total_mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let bmeans: Vec<f64> = (0..k)
                .map(|b| vals[b * bs..(b + 1) * bs].iter().sum::<f64>() / bs as f64)
                .collect();
            let bvar: f64 = bmeans
                .iter()
                .map(|v| (v - total_mean) * (v - total_mean))
                .sum::<f64>()
                / (k as f64 - 1.0);
            let se = (bvar / k as f64).sqrt();
            assert!(
                (total_mean - mean[c0]).abs() <= 3.0 * se,
                "node {c0}: chain {total_mean} vs analytic {} (se {se})",
                mean[c0]
            );
            let var: f64 = vals
                .iter()
                .map(|v| (v - total_mean) * (v - total_mean))
                .sum::<f64>()
                / (vals.len() - 1) as f64;
            assert!(
                (var - cov[(c0, c0)]).abs() <= 0.15 * cov[(c0, c0)],
                "node {c0}: chain var {var} vs analytic {}",
                cov[(c0, c0)]
            );
        }
    }

    #[test]
    fn pcn_transition_preserves_posterior_moments() {
        // Detailed-balance smoke test: start an ensemble exactly at the
        // analytic posterior, apply one pCN transition to every member, and
        // check the first two moments at the observed node are preserved.
        let (prior, cfg) = linear_problem(2, 2, 1);
        let mut rng_y = seed::substream(12, "y");
        let y = DVector::from_fn(cfg.d_y(), |_, _| rng_y.sample::<f64, _>(StandardNormal));
        let (mean, cov) = dense_posterior(&prior, &cfg, &y);
        let chol = nalgebra::Cholesky::new(cov.clone()).unwrap();
        let node = cfg.obs_points[0];
        let beta = 0.5;
        let n = 20_000;
        let mut rng = seed::substream(13, "ensemble");
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let xi = Field::from_fn(prior.node_count(), |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let mut m = &mean + chol.l() * xi;
            let phi = forward::potential(&cfg, &y, &m).unwrap();
            let prop = &m * (1.0f64 - beta * beta).sqrt() + prior.sample_with(&mut rng) * beta;
            let phi_new = forward::potential(&cfg, &y, &prop).unwrap();
            if phi - phi_new >= 0.0 || rng.gen::<f64>() < (phi - phi_new).exp() {
                m = prop;
            }
            vals.push(m[node]);
        }
        let emp_mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let emp_var: f64 =
            vals.iter().map(|v| (v - emp_mean) * (v - emp_mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (cov[(node, node)] / n as f64).sqrt();
        assert!(
            (emp_mean - mean[node]).abs() <= 3.0 * se,
            "transitioned mean {emp_mean} vs posterior {}",
            mean[node]
        );
        assert!(
            (emp_var - cov[(node, node)]).abs() <= 0.1 * cov[(node, node)],
            "transitioned var {emp_var} vs posterior {}",
            cov[(node, node)]
        );
    }

    #[test]
    fn chains_are_deterministic_in_the_seed() {
        let (prior, cfg) = linear_problem(2, 2, 1);
        let y = DVector::from_element(cfg.d_y(), 0.2);
        let opts = PcnOptions { n: 5, beta: 0.5, burn_in: 10, thin: 2, auto_tune: false };
        let run = || {
            let mut rng = seed::substream(14, "chain");
            pcn_sample(&cfg, &prior, Some(&y), &opts, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.samples.len(), 5);
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa, sb);
        }
        assert_eq!(a.acceptance_rate, b.acceptance_rate);
    }
}
