//! Parameter-to-observable map of the reaction–diffusion problem
//!
//!   −∇·(e^m ∇u) + u³ = 0   on (0,1)²,
//!   u = 1 on the top edge, u = 0 on the bottom edge, zero flux on the sides,
//!
//! discretized by finite differences on the prior's grid. Observations are
//! nearest-node samples of u. A `LinearTest` mode replaces the PDE with
//! G(m) = Bm so conjugate-Gaussian oracles apply.
//!
//! Sensitivities follow the adjoint formalism: with residual R(u, m) = 0,
//! DG(m) = −O (∂_u R)⁻¹ ∂_m R, and one LU factorization of ∂_u R serves every
//! direct or adjoint right-hand side.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::prior::{Field, Mesh};
use crate::subspace::DataWhitener;

const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_RTOL: f64 = 1e-10;
const NEWTON_ATOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum ModelMode {
    Nonlinear,
    /// G(m) = Bm with B of size d_y × node_count.
    LinearTest { b: DMatrix<f64> },
}

#[derive(Debug, Clone)]
pub struct PdeConfig {
    pub mesh: Mesh,
    /// Observed node indices; strictly interior and distinct.
    pub obs_points: Vec<usize>,
    /// σ² of the additive Gaussian noise.
    pub noise_variance: f64,
    pub mode: ModelMode,
}

#[derive(Debug, Clone)]
pub struct PdeState {
    pub u: DVector<f64>,
    pub converged: bool,
    pub newton_iters: usize,
}

/// Uniform k×k lattice of strictly interior nodes, the default observation
/// layout (d_y = k²). Positions snap to the nearest grid node.
pub fn interior_lattice(mesh: &Mesh, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("lattice must have at least one point per axis"));
    }
    let snap = |frac: f64, cells: usize| -> usize {
        let idx = (frac * cells as f64).round() as usize;
        idx.clamp(1, cells - 1)
    };
    let mut points = Vec::with_capacity(k * k);
    for b in 1..=k {
        for a in 1..=k {
            let i = snap(a as f64 / (k + 1) as f64, mesh.nx);
            let j = snap(b as f64 / (k + 1) as f64, mesh.ny);
            points.push(mesh.node_index(i, j));
        }
    }
    let mut sorted = points.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != points.len() {
        return Err(Error::config(format!(
            "{k}x{k} observation lattice collides on a {}x{} mesh",
            mesh.nx, mesh.ny
        )));
    }
    Ok(points)
}

impl PdeConfig {
    pub fn new(
        mesh: Mesh,
        obs_points: Vec<usize>,
        noise_variance: f64,
        mode: ModelMode,
    ) -> Result<Self> {
        if noise_variance <= 0.0 {
            return Err(Error::config("noise variance must be positive"));
        }
        let mut seen = obs_points.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != obs_points.len() {
            return Err(Error::config("observation points must be distinct"));
        }
        for &p in &obs_points {
            if p >= mesh.node_count() || !mesh.is_interior(p) {
                return Err(Error::config(format!("observation node {p} is not interior")));
            }
        }
        if let ModelMode::LinearTest { b } = &mode {
            if b.ncols() != mesh.node_count() {
                return Err(Error::config(format!(
                    "linear map has {} columns for {} nodes",
                    b.ncols(),
                    mesh.node_count()
                )));
            }
        }
        Ok(PdeConfig { mesh, obs_points, noise_variance, mode })
    }

    pub fn nonlinear(mesh: Mesh, obs_points: Vec<usize>, noise_variance: f64) -> Result<Self> {
        Self::new(mesh, obs_points, noise_variance, ModelMode::Nonlinear)
    }

    /// Linear mode with B = the observation selector, G(m) = m at obs_points.
    pub fn linear_from_selector(
        mesh: Mesh,
        obs_points: Vec<usize>,
        noise_variance: f64,
    ) -> Result<Self> {
        let mut b = DMatrix::zeros(obs_points.len(), mesh.node_count());
        for (row, &p) in obs_points.iter().enumerate() {
            b[(row, p)] = 1.0;
        }
        Self::new(mesh, obs_points, noise_variance, ModelMode::LinearTest { b })
    }

    pub fn d_y(&self) -> usize {
        match &self.mode {
            ModelMode::Nonlinear => self.obs_points.len(),
            ModelMode::LinearTest { b } => b.nrows(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.noise_variance.sqrt()
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.mode, ModelMode::LinearTest { .. })
    }

    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.mode {
            ModelMode::LinearTest { b } => Some(b),
            ModelMode::Nonlinear => None,
        }
    }

    fn is_dirichlet(&self, idx: usize) -> bool {
        self.mesh.is_top(idx) || self.mesh.is_bottom(idx)
    }

    fn dirichlet_value(&self, idx: usize) -> f64 {
        if self.mesh.is_top(idx) {
            1.0
        } else {
            0.0
        }
    }

    /// O u: nearest-node observation.
    pub fn observe(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.obs_points.len(), self.obs_points.iter().map(|&p| u[p]))
    }

    /// Oᵀ w.
    pub fn observe_adjoint(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.mesh.node_count());
        for (row, &p) in self.obs_points.iter().enumerate() {
            out[p] += w[row];
        }
        out
    }
}

/// Axis neighbors of (i, j) with zero-flux reflection across the side
/// boundaries: an out-of-range x-neighbor mirrors back into the domain.
fn reflected_neighbors(mesh: &Mesh, i: usize, j: usize) -> [(usize, usize, f64); 4] {
    let ihx2 = (mesh.nx * mesh.nx) as f64;
    let ihy2 = (mesh.ny * mesh.ny) as f64;
    let left = if i == 0 { 1 } else { i - 1 };
    let right = if i == mesh.nx { mesh.nx - 1 } else { i + 1 };
    let down = if j == 0 { 1 } else { j - 1 };
    let up = if j == mesh.ny { mesh.ny - 1 } else { j + 1 };
    [(left, j, ihx2), (right, j, ihx2), (i, down, ihy2), (i, up, ihy2)]
}

/// FD residual R(u, m). Dirichlet rows are u − g; other rows carry the
/// flux-difference stencil with midpoint diffusivity (e^{m_p}+e^{m_q})/2 and
/// the pointwise reaction u³ (`with_cubic` exists for the harmonic check).
pub(crate) fn residual(
    cfg: &PdeConfig,
    u: &DVector<f64>,
    em: &DVector<f64>,
    with_cubic: bool,
) -> DVector<f64> {
    let mesh = &cfg.mesh;
    let mut r = DVector::zeros(mesh.node_count());
    for p in 0..mesh.node_count() {
        if cfg.is_dirichlet(p) {
            r[p] = u[p] - cfg.dirichlet_value(p);
            continue;
        }
        let (i, j) = mesh.node_ij(p);
        let mut acc = 0.0;
        for (qi, qj, ih2) in reflected_neighbors(mesh, i, j) {
            let q = mesh.node_index(qi, qj);
            let kappa = 0.5 * (em[p] + em[q]);
            acc += kappa * (u[p] - u[q]) * ih2;
        }
        if with_cubic {
            acc += u[p] * u[p] * u[p];
        }
        r[p] = acc;
    }
    r
}

/// ∂_u R: L(e^m) + 3 diag(u²) with identity Dirichlet rows.
pub(crate) fn state_jacobian(
    cfg: &PdeConfig,
    u: &DVector<f64>,
    em: &DVector<f64>,
    with_cubic: bool,
) -> DMatrix<f64> {
    let mesh = &cfg.mesh;
    let n = mesh.node_count();
    let mut jac = DMatrix::zeros(n, n);
    for p in 0..n {
        if cfg.is_dirichlet(p) {
            jac[(p, p)] = 1.0;
            continue;
        }
        let (i, j) = mesh.node_ij(p);
        for (qi, qj, ih2) in reflected_neighbors(mesh, i, j) {
            let q = mesh.node_index(qi, qj);
            let kappa = 0.5 * (em[p] + em[q]);
            jac[(p, p)] += kappa * ih2;
            jac[(p, q)] -= kappa * ih2;
        }
        if with_cubic {
            jac[(p, p)] += 3.0 * u[p] * u[p];
        }
    }
    jac
}

/// (∂_m R) v, matrix-free.
fn dmr_action(
    cfg: &PdeConfig,
    u: &DVector<f64>,
    em: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let mesh = &cfg.mesh;
    let mut out = DVector::zeros(mesh.node_count());
    for p in 0..mesh.node_count() {
        if cfg.is_dirichlet(p) {
            continue;
        }
        let (i, j) = mesh.node_ij(p);
        let mut acc = 0.0;
        for (qi, qj, ih2) in reflected_neighbors(mesh, i, j) {
            let q = mesh.node_index(qi, qj);
            let dkappa = 0.5 * (em[p] * v[p] + em[q] * v[q]);
            acc += dkappa * (u[p] - u[q]) * ih2;
        }
        out[p] = acc;
    }
    out
}

/// (∂_m R)ᵀ w, matrix-free.
fn dmr_adjoint_action(
    cfg: &PdeConfig,
    u: &DVector<f64>,
    em: &DVector<f64>,
    w: &DVector<f64>,
) -> DVector<f64> {
    let mesh = &cfg.mesh;
    let mut out = DVector::zeros(mesh.node_count());
    for p in 0..mesh.node_count() {
        if cfg.is_dirichlet(p) {
            continue;
        }
        let (i, j) = mesh.node_ij(p);
        for (qi, qj, ih2) in reflected_neighbors(mesh, i, j) {
            let q = mesh.node_index(qi, qj);
            let c = w[p] * (u[p] - u[q]) * ih2 * 0.5;
            out[p] += c * em[p];
            out[q] += c * em[q];
        }
    }
    out
}

fn ramp_initial_guess(cfg: &PdeConfig) -> DVector<f64> {
    DVector::from_fn(cfg.mesh.node_count(), |p, _| cfg.mesh.node_coords(p).1)
}

pub(crate) fn solve_pde_inner(cfg: &PdeConfig, m: &Field, with_cubic: bool) -> Result<PdeState> {
    let em = m.map(f64::exp);
    let mut u = ramp_initial_guess(cfg);
    let r0_norm = residual(cfg, &u, &em, with_cubic).norm();
    let tol = NEWTON_RTOL * r0_norm + NEWTON_ATOL;
    for iter in 0..=NEWTON_MAX_ITERS {
        let r = residual(cfg, &u, &em, with_cubic);
        if r.norm() <= tol {
            return Ok(PdeState { u, converged: true, newton_iters: iter });
        }
        if iter == NEWTON_MAX_ITERS {
            break;
        }
        let jac = state_jacobian(cfg, &u, &em, with_cubic);
        let lu = jac.lu();
        let delta = lu.solve(&r).ok_or_else(|| Error::numerical("linearization singular"))?;
        u -= delta;
        if !u.iter().all(|x| x.is_finite()) {
            return Err(Error::numerical("newton diverged"));
        }
    }
    Err(Error::numerical("newton diverged"))
}

/// Newton solve of the nonlinear system; errors "newton diverged" after 50
/// iterations so callers can discard the sample.
pub fn solve_pde(cfg: &PdeConfig, m: &Field) -> Result<PdeState> {
    match cfg.mode {
        ModelMode::Nonlinear => solve_pde_inner(cfg, m, true),
        ModelMode::LinearTest { .. } => {
            Err(Error::config("solve_pde requires the nonlinear mode"))
        }
    }
}

/// Noiseless observable G(m).
pub fn pto(cfg: &PdeConfig, m: &Field) -> Result<DVector<f64>> {
    match &cfg.mode {
        ModelMode::Nonlinear => {
            let state = solve_pde(cfg, m)?;
            Ok(cfg.observe(&state.u))
        }
        ModelMode::LinearTest { b } => Ok(b * m),
    }
}

/// y = G(m) + σ·ξ.
pub fn synthesize_observation(cfg: &PdeConfig, m: &Field, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let g = pto(cfg, m)?;
    let sigma = cfg.sigma();
    Ok(g.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)))
}

/// Φ(m) = ½σ⁻²‖G(m) − y‖².
pub fn potential(cfg: &PdeConfig, y: &DVector<f64>, m: &Field) -> Result<f64> {
    let g = pto(cfg, m)?;
    Ok(0.5 / cfg.noise_variance * (g - y).norm_squared())
}

/// ∇_m Φ via one adjoint solve: −(∂_m R)ᵀ (∂_u R)⁻ᵀ Oᵀ σ⁻²(Ou − y).
pub fn potential_gradient(cfg: &PdeConfig, y: &DVector<f64>, m: &Field) -> Result<Field> {
    Ok(potential_and_gradient(cfg, y, m)?.1)
}

/// Φ and ∇_m Φ from a single state solve.
pub fn potential_and_gradient(cfg: &PdeConfig, y: &DVector<f64>, m: &Field) -> Result<(f64, Field)> {
    match &cfg.mode {
        ModelMode::LinearTest { b } => {
            let r = b * m - y;
            let phi = 0.5 / cfg.noise_variance * r.norm_squared();
            Ok((phi, b.transpose() * r / cfg.noise_variance))
        }
        ModelMode::Nonlinear => {
            let state = solve_pde(cfg, m)?;
            let lin = Linearization::new(cfg, m, &state)?;
            let r = cfg.observe(&state.u) - y;
            let phi = 0.5 / cfg.noise_variance * r.norm_squared();
            Ok((phi, lin.adjoint_action(&(r / cfg.noise_variance))))
        }
    }
}

/// LU of ∂_u R at a converged state, shared by every sensitivity solve.
pub struct Linearization<'a> {
    cfg: &'a PdeConfig,
    em: DVector<f64>,
    u: DVector<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    l: DMatrix<f64>,
    ut: DMatrix<f64>,
}

impl<'a> Linearization<'a> {
    pub fn new(cfg: &'a PdeConfig, m: &Field, state: &PdeState) -> Result<Self> {
        let em = m.map(f64::exp);
        let jac = state_jacobian(cfg, &state.u, &em, true);
        let lu = jac.lu();
        if !lu.is_invertible() {
            return Err(Error::numerical("linearization singular"));
        }
        let l = lu.l();
        let ut = lu.u();
        Ok(Linearization { cfg, em, u: state.u.clone(), lu, l, ut })
    }

    /// J v = −O (∂_u R)⁻¹ (∂_m R) v.
    pub fn action(&self, v: &Field) -> DVector<f64> {
        let rhs = dmr_action(self.cfg, &self.u, &self.em, v);
        let w = self.lu.solve(&rhs).expect("factor checked invertible");
        -self.cfg.observe(&w)
    }

    /// Jᵀ w = −(∂_m R)ᵀ (∂_u R)⁻ᵀ Oᵀ w, via a transpose solve on the same LU.
    pub fn adjoint_action(&self, w: &DVector<f64>) -> Field {
        let rhs = self.cfg.observe_adjoint(w);
        let lambda = self.solve_transposed(&rhs);
        -dmr_adjoint_action(self.cfg, &self.u, &self.em, &lambda)
    }

    /// Solves (∂_u R)ᵀ x = b reusing the forward factorization:
    /// PA = LU gives Aᵀx = Uᵀ(Lᵀ(Px)) = b.
    fn solve_transposed(&self, b: &DVector<f64>) -> DVector<f64> {
        let z = self
            .ut
            .tr_solve_upper_triangular(b)
            .expect("factor checked invertible");
        let mut x = self
            .l
            .tr_solve_lower_triangular(&z)
            .expect("unit lower triangle");
        self.lu.p().inv_permute_rows(&mut x);
        x
    }
}

/// Whitened latent Jacobian J_r = V*·DG(m)·D, built by min(d_r, d_y) solves
/// on one factorization: decoder columns through the direct path when
/// d_r ≤ d_y, observation rows through the adjoint path otherwise.
pub fn latent_jacobian(
    cfg: &PdeConfig,
    m: &Field,
    state: &PdeState,
    decoder: &DMatrix<f64>,
    whitener: &DataWhitener,
) -> Result<DMatrix<f64>> {
    if let ModelMode::LinearTest { b } = &cfg.mode {
        return Ok(b * decoder / whitener.sigma);
    }
    if !state.converged {
        return Err(Error::numerical("latent jacobian requires a converged state"));
    }
    let lin = Linearization::new(cfg, m, state)?;
    let d_r = decoder.ncols();
    let d_y = cfg.d_y();
    if d_r <= d_y {
        Ok(latent_jacobian_direct(&lin, decoder, whitener))
    } else {
        Ok(latent_jacobian_adjoint(&lin, decoder, whitener))
    }
}

/// Full Jacobian DG(m) of size d_y × node_count, one adjoint solve per row.
pub fn full_jacobian(cfg: &PdeConfig, m: &Field, state: Option<&PdeState>) -> Result<DMatrix<f64>> {
    if let ModelMode::LinearTest { b } = &cfg.mode {
        return Ok(b.clone());
    }
    let state = state.ok_or_else(|| Error::numerical("full jacobian requires a solved state"))?;
    let lin = Linearization::new(cfg, m, state)?;
    let d_y = cfg.d_y();
    let n = cfg.mesh.node_count();
    let mut jac = DMatrix::zeros(d_y, n);
    let mut e = DVector::zeros(d_y);
    for row in 0..d_y {
        e[row] = 1.0;
        let jt_row = lin.adjoint_action(&e);
        e[row] = 0.0;
        jac.row_mut(row).copy_from(&jt_row.transpose());
    }
    Ok(jac)
}

/// One dataset entry: a prior draw, its solved state (nonlinear mode), and
/// the noiseless observable.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub m: Field,
    pub state: Option<PdeState>,
    pub g: DVector<f64>,
}

fn generate_one(
    prior: &crate::prior::GaussianPrior,
    cfg: &PdeConfig,
    global_seed: u64,
    stream_name: &str,
    index: u64,
    dropped: &std::sync::atomic::AtomicUsize,
    drop_cap: usize,
) -> Result<RawSample> {
    let mut rng = crate::seed::substream_indexed(global_seed, stream_name, index);
    loop {
        let m = prior.sample_with(&mut rng);
        match &cfg.mode {
            ModelMode::LinearTest { b } => {
                return Ok(RawSample { g: b * &m, m, state: None });
            }
            ModelMode::Nonlinear => match solve_pde(cfg, &m) {
                Ok(state) => {
                    let g = cfg.observe(&state.u);
                    return Ok(RawSample { m, state: Some(state), g });
                }
                Err(Error::Numerical(_)) => {
                    let total = dropped.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
                    if total > drop_cap {
                        return Err(Error::numerical(format!(
                            "more than {drop_cap} diverged solves while generating samples"
                        )));
                    }
                }
                Err(e) => return Err(e),
            },
        }
    }
}

/// Draws `n` prior samples and evaluates the PtO map for each. Sample `i`
/// uses its own seed substream, so results are identical for any `threads`
/// count and diverged solves are resampled in place (capped at 1% of `n`).
pub fn generate_samples(
    prior: &crate::prior::GaussianPrior,
    cfg: &PdeConfig,
    n: usize,
    global_seed: u64,
    stream_name: &str,
    threads: usize,
) -> Result<Vec<RawSample>> {
    let dropped = std::sync::atomic::AtomicUsize::new(0);
    let drop_cap = (n / 100).max(1);
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 {
        return (0..n as u64)
            .map(|i| generate_one(prior, cfg, global_seed, stream_name, i, &dropped, drop_cap))
            .collect();
    }
    let chunk = n.div_ceil(threads);
    let mut results: Vec<Result<Vec<RawSample>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..threads {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            let dropped = &dropped;
            handles.push(scope.spawn(move || {
                (lo as u64..hi as u64)
                    .map(|i| {
                        generate_one(prior, cfg, global_seed, stream_name, i, dropped, drop_cap)
                    })
                    .collect::<Result<Vec<_>>>()
            }));
        }
        results = handles.into_iter().map(|h| h.join().expect("worker panicked")).collect();
    });
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub(crate) fn latent_jacobian_direct(
    lin: &Linearization,
    decoder: &DMatrix<f64>,
    whitener: &DataWhitener,
) -> DMatrix<f64> {
    let d_y = lin.cfg.d_y();
    let mut jr = DMatrix::zeros(d_y, decoder.ncols());
    for (k, psi) in decoder.column_iter().enumerate() {
        let col = lin.action(&psi.into_owned()) / whitener.sigma;
        jr.set_column(k, &col);
    }
    jr
}

pub(crate) fn latent_jacobian_adjoint(
    lin: &Linearization,
    decoder: &DMatrix<f64>,
    whitener: &DataWhitener,
) -> DMatrix<f64> {
    let d_y = lin.cfg.d_y();
    let mut jr = DMatrix::zeros(d_y, decoder.ncols());
    let mut e = DVector::zeros(d_y);
    for row in 0..d_y {
        e[row] = 1.0;
        let jt_row = lin.adjoint_action(&e);
        e[row] = 0.0;
        let latent_row = (jt_row.transpose() * decoder) / whitener.sigma;
        jr.row_mut(row).copy_from(&latent_row);
    }
    jr
}
