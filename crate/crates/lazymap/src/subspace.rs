//! Derivative-informed subspace: Monte Carlo Gauss–Newton Hessian, the
//! generalized eigenproblem H ψ = λ C⁻¹ ψ, encoder/decoder pair, dataset
//! embedding, and data-space whitening.
//!
//! The GEVP is solved through the symmetric reduction M = K⁻¹ H K⁻¹ with
//! eigenpairs (λ, v) and ψ = K⁻¹ v, which hands back a C⁻¹-orthonormal basis
//! for free: ψ_iᵀ K² ψ_j = v_iᵀ v_j = δ_ij.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{self, PdeConfig, RawSample};
use crate::prior::{Field, GaussianPrior};
use crate::seed;

/// Noise whitening V = σ·I on the data space, so V* = σ⁻¹·I.
#[derive(Debug, Clone, Copy)]
pub struct DataWhitener {
    pub sigma: f64,
    pub d_y: usize,
}

impl DataWhitener {
    pub fn new(noise_variance: f64, d_y: usize) -> Result<Self> {
        if noise_variance <= 0.0 {
            return Err(Error::config("noise variance must be positive"));
        }
        Ok(DataWhitener { sigma: noise_variance.sqrt(), d_y })
    }

    /// V*v = v/σ.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        v / self.sigma
    }
}

/// Rank-d_r encoder/decoder pair from the GEVP, with E·D = I and
/// C⁻¹-orthonormal decoder columns.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    /// D: node_count × d_r, columns ψ_j.
    pub decoder: DMatrix<f64>,
    /// E = Dᵀ K²: d_r × node_count.
    pub encoder: DMatrix<f64>,
    /// λ₁ ≥ … ≥ λ_{d_r} ≥ 0.
    pub eigenvalues: DVector<f64>,
    /// Σ_{j > d_r} λ_j over the full computed spectrum.
    pub tail_sum: f64,
}

impl ReducedBasis {
    pub fn d_r(&self) -> usize {
        self.decoder.ncols()
    }

    pub fn node_count(&self) -> usize {
        self.decoder.nrows()
    }

    /// z = E m.
    pub fn encode(&self, m: &Field) -> DVector<f64> {
        &self.encoder * m
    }

    /// D z.
    pub fn decode(&self, z: &DVector<f64>) -> Field {
        &self.decoder * z
    }

    /// P m = D E m.
    pub fn project(&self, m: &Field) -> Field {
        self.decode(&self.encode(m))
    }

    /// E·D = I and Dᵀ K² D = I, both to `tol`. Run after construction and
    /// again when a basis is read back from an archive.
    pub fn check_invariants(&self, prior: &GaussianPrior, tol: f64) -> Result<()> {
        let d_r = self.d_r();
        let ed = &self.encoder * &self.decoder;
        let gram_err = (&ed - DMatrix::identity(d_r, d_r)).amax();
        if gram_err > tol {
            return Err(Error::numerical(format!(
                "basis encoder/decoder product deviates from identity by {gram_err:.3e}"
            )));
        }
        let kd = prior.operator() * &self.decoder;
        let gram = kd.transpose() * &kd;
        let ortho_err = (&gram - DMatrix::identity(d_r, d_r)).amax();
        if ortho_err > tol {
            return Err(Error::numerical(format!(
                "decoder columns deviate from C⁻¹-orthonormality by {ortho_err:.3e}"
            )));
        }
        let mut prev = f64::INFINITY;
        for &l in self.eigenvalues.iter() {
            if l < -1e-10 || l > prev {
                return Err(Error::numerical("eigenvalues not sorted nonincreasing"));
            }
            prev = l;
        }
        Ok(())
    }
}

/// Ĥ = (1/N) Σ_j J(m⁽ʲ⁾)ᵀ Γ⁻¹ J(m⁽ʲ⁾) from already-generated samples.
pub fn gn_hessian_from_samples(cfg: &PdeConfig, samples: &[RawSample]) -> Result<DMatrix<f64>> {
    if samples.is_empty() {
        return Err(Error::config("Hessian estimate needs at least one sample"));
    }
    let n = cfg.mesh.node_count();
    let mut h = DMatrix::zeros(n, n);
    for s in samples {
        let jac = forward::full_jacobian(cfg, &s.m, s.state.as_ref())?;
        h.gemm_tr(1.0 / cfg.noise_variance, &jac, &jac, 1.0);
    }
    h /= samples.len() as f64;
    Ok(h)
}

/// Draws N_L prior samples and accumulates the expected Gauss–Newton Hessian.
pub fn estimate_gn_hessian(
    prior: &GaussianPrior,
    cfg: &PdeConfig,
    n_l: usize,
    global_seed: u64,
) -> Result<DMatrix<f64>> {
    let samples =
        forward::generate_samples(prior, cfg, n_l, global_seed, seed::stream::PRIOR_SAMPLING, 1)?;
    gn_hessian_from_samples(cfg, &samples)
}

/// Solves H ψ = λ C⁻¹ ψ and keeps the d_r leading pairs.
pub fn solve_gevp(prior: &GaussianPrior, h: &DMatrix<f64>, d_r: usize) -> Result<ReducedBasis> {
    let n = prior.node_count();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::config("Hessian size does not match the mesh"));
    }
    if d_r == 0 || d_r > n {
        return Err(Error::config(format!("d_r must be in 1..={n}, got {d_r}")));
    }
    // M = K⁻¹ H K⁻¹, built with two triangular solves and symmetrized so the
    // eigensolver sees an exactly symmetric matrix.
    let kinv_h = prior_solve_matrix(prior, h);
    let m_mat = prior_solve_matrix(prior, &kinv_h.transpose());
    let m_sym = (&m_mat + m_mat.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(m_sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numerical("eigensolver did not converge"))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut decoder = DMatrix::zeros(n, d_r);
    let mut eigenvalues = DVector::zeros(d_r);
    let mut tail_sum = 0.0;
    for (rank, &src) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[src].max(0.0);
        if rank < d_r {
            eigenvalues[rank] = lambda;
            let v = eig.eigenvectors.column(src).into_owned();
            decoder.set_column(rank, &prior.solve_k(&v));
        } else {
            tail_sum += lambda;
        }
    }
    let k2_decoder = prior.operator() * (prior.operator() * &decoder);
    let basis = ReducedBasis { encoder: k2_decoder.transpose(), decoder, eigenvalues, tail_sum };
    basis.check_invariants(prior, 1e-10)?;
    Ok(basis)
}

fn prior_solve_matrix(prior: &GaussianPrior, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for c in 0..m.ncols() {
        out.set_column(c, &prior.solve_k(&m.column(c).into_owned()));
    }
    out
}

/// Latent training set: z = E m, whitened outputs σ⁻¹G(m), and optional
/// whitened latent Jacobians for derivative-informed training.
#[derive(Debug, Clone)]
pub struct EmbeddedDataset {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub jacobians: Option<Vec<DMatrix<f64>>>,
}

impl EmbeddedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Embeds (m, G(m), J_r-or-absent) triples into the latent space.
pub fn embed_dataset(
    basis: &ReducedBasis,
    whitener: &DataWhitener,
    samples: &[(Field, DVector<f64>, Option<DMatrix<f64>>)],
) -> Result<EmbeddedDataset> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut outputs = Vec::with_capacity(samples.len());
    let with_jac = samples.first().map(|(_, _, j)| j.is_some()).unwrap_or(false);
    let mut jacobians = if with_jac { Some(Vec::with_capacity(samples.len())) } else { None };
    for (m, g, jr) in samples {
        if m.len() != basis.node_count() {
            return Err(Error::config("sample field length does not match the basis"));
        }
        if g.len() != whitener.d_y {
            return Err(Error::config("observable length does not match the whitener"));
        }
        if jr.is_some() != with_jac {
            return Err(Error::config("jacobians must be present for all samples or none"));
        }
        let z = basis.encode(m);
        let gw = whitener.whiten(g);
        if !z.iter().all(|v| v.is_finite()) || !gw.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("non-finite embedded sample"));
        }
        if let (Some(list), Some(j)) = (jacobians.as_mut(), jr) {
            if j.nrows() != whitener.d_y || j.ncols() != basis.d_r() {
                return Err(Error::config("latent jacobian shape mismatch"));
            }
            list.push(j.clone());
        }
        inputs.push(z);
        outputs.push(gw);
    }
    Ok(EmbeddedDataset { inputs, outputs, jacobians })
}

/// D z + (m_pr − P m_pr) for a given complement source.
pub fn lift_with_fill(basis: &ReducedBasis, z: &DVector<f64>, fill: &Field) -> Field {
    basis.decode(z) + fill - basis.project(fill)
}

/// Complement fill from a fresh prior draw.
pub fn lift(basis: &ReducedBasis, prior: &GaussianPrior, z: &DVector<f64>, rng: &mut impl Rng) -> Field {
    let fill = prior.sample_with(rng);
    lift_with_fill(basis, z, &fill)
}

/// Zero fill: the complement mean.
pub fn lift_zero(basis: &ReducedBasis, z: &DVector<f64>) -> Field {
    basis.decode(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{interior_lattice, ModelMode};
    use crate::prior::{Anisotropy, Mesh};
    use crate::seed::stream;
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn linear_cfg(mesh: Mesh, noise_variance: f64) -> PdeConfig {
        let obs = interior_lattice(&mesh, 3).unwrap();
        PdeConfig::linear_from_selector(mesh, obs, noise_variance).unwrap()
    }

    #[test]
    fn whitener_scales_by_sigma() {
        assert!(DataWhitener::new(0.0, 3).is_err());
        let w = DataWhitener::new(4.0, 3).unwrap();
        let v = DVector::from_vec(vec![2.0, -4.0, 6.0]);
        assert_eq!(w.whiten(&v), DVector::from_vec(vec![1.0, -2.0, 3.0]));
    }

    #[test]
    fn hessian_linear_single_sample_is_exact() {
        let mesh = Mesh::new(8, 8).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let cfg = linear_cfg(mesh, 0.5);
        let h = estimate_gn_hessian(&prior, &cfg, 1, 3).unwrap();
        let b = cfg.linear_matrix().unwrap();
        let oracle = b.transpose() * b / 0.5;
        assert_relative_eq!(h, oracle, epsilon = 1e-12);
    }

    #[test]
    fn hessian_zero_model_is_zero() {
        let mesh = Mesh::new(6, 6).unwrap();
        let prior = GaussianPrior::build(mesh, 0.0, 1.0, Anisotropy::ISOTROPIC).unwrap();
        let obs = interior_lattice(&mesh, 2).unwrap();
        let b = DMatrix::zeros(4, mesh.node_count());
        let cfg = PdeConfig::new(mesh, obs, 1.0, ModelMode::LinearTest { b }).unwrap();
        let h = estimate_gn_hessian(&prior, &cfg, 5, 0).unwrap();
        assert_eq!(h.amax(), 0.0);
    }

    #[test]
    fn hessian_monte_carlo_spectra_are_stable() {
        let mesh = Mesh::new(16, 16).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let obs = interior_lattice(&mesh, 5).unwrap();
        let cfg = PdeConfig::nonlinear(mesh, obs, 1.94e-3).unwrap();
        let h1 = estimate_gn_hessian(&prior, &cfg, 64, 100).unwrap();
        let h2 = estimate_gn_hessian(&prior, &cfg, 64, 200).unwrap();
        let top = |h: &DMatrix<f64>| {
            let mut ev: Vec<f64> =
                nalgebra::SymmetricEigen::new(h.clone()).eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
            ev.truncate(5);
            ev
        };
        for (a, b) in top(&h1).iter().zip(top(&h2)) {
            assert_relative_eq!(*a, b, max_relative = 0.25);
        }
    }

    #[test]
    fn gevp_matches_svd_oracle_for_identity_prior() {
        let mesh = Mesh::new(6, 6).unwrap();
        let prior = GaussianPrior::build(mesh, 0.0, 1.0, Anisotropy::ISOTROPIC).unwrap();
        let n = mesh.node_count();
        let mut rng = seed::substream(5, "linear-b");
        let b = DMatrix::from_fn(6, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sigma2 = 0.7;
        let obs = interior_lattice(&mesh, 2).unwrap();
        let cfg = PdeConfig::new(mesh, obs, sigma2, ModelMode::LinearTest { b: b.clone() }).unwrap();
        let h = estimate_gn_hessian(&prior, &cfg, 1, 0).unwrap();
        let basis = solve_gevp(&prior, &h, 4).unwrap();

        let svd = (b / sigma2.sqrt()).svd(false, true);
        let vt = svd.v_t.unwrap();
        for j in 0..4 {
            assert_relative_eq!(
                basis.eigenvalues[j],
                svd.singular_values[j].powi(2),
                max_relative = 1e-8
            );
            let psi = basis.decoder.column(j);
            let v = vt.row(j).transpose();
            let aligned = if psi.dot(&v) < 0.0 { -v } else { v };
            assert!((psi - &aligned).norm() < 1e-8, "singular vector {j} mismatch");
        }
    }

    #[test]
    fn gevp_degenerate_spectrum_is_flat() {
        let mesh = Mesh::new(5, 5).unwrap();
        let prior = GaussianPrior::build(mesh, 0.05, 1.5, Anisotropy::ISOTROPIC).unwrap();
        // H = C⁻¹ makes every generalized eigenvalue 1.
        let h = prior.operator() * prior.operator();
        let basis = solve_gevp(&prior, &h, 6).unwrap();
        for &l in basis.eigenvalues.iter() {
            assert_relative_eq!(l, 1.0, max_relative = 1e-8);
        }
        basis.check_invariants(&prior, 1e-10).unwrap();
    }

    #[test]
    fn tail_sum_satisfies_trace_identity() {
        let mesh = Mesh::new(8, 8).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let cfg = linear_cfg(mesh, 1.94e-3);
        let h = estimate_gn_hessian(&prior, &cfg, 1, 0).unwrap();
        let basis = solve_gevp(&prior, &h, 5).unwrap();
        let kinv_h = prior_solve_matrix(&prior, &h);
        let m_mat = prior_solve_matrix(&prior, &kinv_h.transpose());
        let total: f64 = basis.eigenvalues.sum() + basis.tail_sum;
        assert_relative_eq!(total, m_mat.trace(), max_relative = 1e-8);
    }

    #[test]
    fn embedding_identities_and_projector() {
        let mesh = Mesh::new(8, 8).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let cfg = linear_cfg(mesh, 1.94e-3);
        let h = estimate_gn_hessian(&prior, &cfg, 1, 0).unwrap();
        let basis = solve_gevp(&prior, &h, 6).unwrap();

        let mut rng = seed::substream(6, "coeff");
        let c = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = basis.encode(&basis.decode(&c));
        assert!((z - &c).norm() < 1e-10);

        let m0 = prior.sample_with(&mut seed::substream(7, stream::PRIOR_SAMPLING));
        let complement = &m0 - basis.project(&m0);
        assert!(basis.encode(&complement).norm() < 1e-10 * m0.norm().max(1.0));

        let pm = basis.project(&m0);
        assert!((basis.project(&pm) - &pm).norm() <= 1e-10 * m0.norm());
    }

    #[test]
    fn whitened_latent_prior_is_standard_normal() {
        let mesh = Mesh::new(16, 16).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let obs = interior_lattice(&mesh, 5).unwrap();
        let cfg = PdeConfig::linear_from_selector(mesh, obs, 1.94e-3).unwrap();
        let h = estimate_gn_hessian(&prior, &cfg, 1, 0).unwrap();
        let d_r = 8;
        let basis = solve_gevp(&prior, &h, d_r).unwrap();

        let mut rng = seed::substream(8, stream::PRIOR_SAMPLING);
        let n_samples = 2000;
        let mut zs = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            zs.push(basis.encode(&prior.sample_with(&mut rng)));
        }
        let mean = zs.iter().fold(DVector::zeros(d_r), |a, z| a + z) / n_samples as f64;
        let mut cov = DMatrix::zeros(d_r, d_r);
        for z in &zs {
            let d = z - &mean;
            cov.ger(1.0 / n_samples as f64, &d, &d, 1.0);
        }
        let err = (&cov - DMatrix::identity(d_r, d_r)).norm() / (d_r as f64).sqrt();
        assert!(err < 0.10, "latent covariance deviates from identity by {err}");
    }

    #[test]
    fn marginals_are_uncorrelated() {
        let mesh = Mesh::new(8, 8).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let cfg = linear_cfg(mesh, 1.94e-3);
        let h = estimate_gn_hessian(&prior, &cfg, 1, 0).unwrap();
        let basis = solve_gevp(&prior, &h, 4).unwrap();

        // Cross-covariance between E m and the whitened complement K(m − Pm).
        let n_samples = 5000;
        let mut rng = seed::substream(9, stream::PRIOR_SAMPLING);
        let mut zs = Vec::new();
        let mut ws = Vec::new();
        for _ in 0..n_samples {
            let m = prior.sample_with(&mut rng);
            zs.push(basis.encode(&m));
            ws.push(prior.apply_k(&(&m - basis.project(&m))));
        }
        let nf = n_samples as f64;
        let z_mean = zs.iter().fold(DVector::zeros(4), |a, z| a + z) / nf;
        let w_mean = ws.iter().fold(DVector::zeros(mesh.node_count()), |a, w| a + w) / nf;
        let mut cross = DMatrix::zeros(4, mesh.node_count());
        let mut z_scale = 0.0;
        let mut w_scale = 0.0;
        for (z, w) in zs.iter().zip(&ws) {
            let dz = z - &z_mean;
            let dw = w - &w_mean;
            cross.ger(1.0 / nf, &dz, &dw, 1.0);
            z_scale += dz.norm_squared() / nf;
            w_scale += dw.norm_squared() / nf;
        }
        let bound = 0.10 * z_scale.sqrt() * w_scale.sqrt();
        assert!(cross.norm() < bound, "cross-covariance {} vs bound {bound}", cross.norm());
    }

    #[test]
    fn lift_reproduces_and_encodes_consistently() {
        let mesh = Mesh::new(8, 8).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let cfg = linear_cfg(mesh, 1.94e-3);
        let h = estimate_gn_hessian(&prior, &cfg, 1, 0).unwrap();
        let basis = solve_gevp(&prior, &h, 4).unwrap();

        assert_eq!(lift_zero(&basis, &DVector::zeros(4)), DVector::zeros(mesh.node_count()));

        let m_pr = prior.sample_with(&mut seed::substream(10, stream::PRIOR_SAMPLING));
        let rebuilt = lift_with_fill(&basis, &basis.encode(&m_pr), &m_pr);
        assert!((rebuilt - &m_pr).norm() < 1e-10 * m_pr.norm());

        let mut rng = seed::substream(11, "z");
        let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lifted = lift(&basis, &prior, &z, &mut seed::substream(12, stream::PRIOR_SAMPLING));
        assert!((basis.encode(&lifted) - &z).norm() < 1e-10);
    }

    #[test]
    fn embed_dataset_validates_and_whitens() {
        let mesh = Mesh::new(8, 8).unwrap();
        let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
        let cfg = linear_cfg(mesh, 4.0);
        let whitener = DataWhitener::new(cfg.noise_variance, cfg.d_y()).unwrap();
        let h = estimate_gn_hessian(&prior, &cfg, 1, 0).unwrap();
        let basis = solve_gevp(&prior, &h, 3).unwrap();

        let m = prior.sample_with(&mut seed::substream(13, stream::PRIOR_SAMPLING));
        let g = forward::pto(&cfg, &m).unwrap();
        let ds = embed_dataset(&basis, &whitener, &[(m.clone(), g.clone(), None)]).unwrap();
        assert_eq!(ds.len(), 1);
        assert_relative_eq!(ds.outputs[0], &g / 2.0, epsilon = 1e-14);
        assert_relative_eq!(ds.inputs[0], basis.encode(&m), epsilon = 1e-14);
        assert!(ds.jacobians.is_none());

        // Mixed jacobian presence rejected.
        let jr = DMatrix::zeros(cfg.d_y(), 3);
        let bad = embed_dataset(
            &basis,
            &whitener,
            &[(m.clone(), g.clone(), Some(jr)), (m, g, None)],
        );
        assert!(bad.is_err());
    }
}
