//! Gaussian prior N(0, C) with C = K⁻², K = γ·L_A + δ·I on a regular grid.
//!
//! `L_A` is a symmetric finite-difference discretization of −∇·A∇ with
//! homogeneous Neumann boundary: 1-D stiffness tensor products for the
//! diagonal of A (5-point stencil in the interior) plus a cell-gradient cross
//! term when a12 ≠ 0 (9-point stencil). Boundary rows carry trapezoid weights,
//! constants stay in the kernel of L_A, and K is symmetric by construction.
//!
//! Because C = K⁻², the covariance square root is exact: C^{1/2} = K⁻¹.
//! Sampling is m = K⁻¹ξ with ξ ~ N(0, I); the precision is C⁻¹ = K².

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Nodal coefficient vector on the mesh (log-diffusivity values).
pub type Field = DVector<f64>;

/// Regular grid on the unit square with `nx` × `ny` cells.
///
/// Node (i, j) sits at (i·hx, j·hy), indexed as `j*(nx+1) + i`; j = 0 is the
/// bottom boundary, j = ny the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mesh {
    pub nx: usize,
    pub ny: usize,
}

impl Mesh {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::config(format!("mesh must be at least 2x2 cells, got {nx}x{ny}")));
        }
        if nx > 64 || ny > 64 {
            return Err(Error::config(format!(
                "mesh capped at 64 cells per axis for dense algebra, got {nx}x{ny}"
            )));
        }
        Ok(Mesh { nx, ny })
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.ny as f64
    }

    pub fn node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= self.nx && j <= self.ny);
        j * (self.nx + 1) + i
    }

    pub fn node_ij(&self, idx: usize) -> (usize, usize) {
        (idx % (self.nx + 1), idx / (self.nx + 1))
    }

    pub fn node_coords(&self, idx: usize) -> (f64, f64) {
        let (i, j) = self.node_ij(idx);
        (i as f64 * self.hx(), j as f64 * self.hy())
    }

    pub fn is_bottom(&self, idx: usize) -> bool {
        self.node_ij(idx).1 == 0
    }

    pub fn is_top(&self, idx: usize) -> bool {
        self.node_ij(idx).1 == self.ny
    }

    pub fn is_left(&self, idx: usize) -> bool {
        self.node_ij(idx).0 == 0
    }

    pub fn is_right(&self, idx: usize) -> bool {
        self.node_ij(idx).0 == self.nx
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        let (i, j) = self.node_ij(idx);
        i > 0 && i < self.nx && j > 0 && j < self.ny
    }
}

/// Symmetric 2×2 anisotropy, stored as (a11, a12, a22).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anisotropy {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Anisotropy {
    pub const ISOTROPIC: Anisotropy = Anisotropy { a11: 1.0, a12: 0.0, a22: 1.0 };

    pub fn is_spd(&self) -> bool {
        self.a11 > 0.0 && self.a11 * self.a22 - self.a12 * self.a12 > 0.0
    }
}

pub struct GaussianPrior {
    pub mesh: Mesh,
    pub gamma: f64,
    pub delta: f64,
    pub anisotropy: Anisotropy,
    k: DMatrix<f64>,
    chol_k: Cholesky<f64, Dyn>,
}

/// 1-D Neumann stiffness: (1/h)·tridiag(−1, 2, −1) with ends (1, −1).
fn stiffness_1d(n_cells: usize, h: f64) -> DMatrix<f64> {
    let n = n_cells + 1;
    let mut s = DMatrix::zeros(n, n);
    for e in 0..n_cells {
        s[(e, e)] += 1.0 / h;
        s[(e + 1, e + 1)] += 1.0 / h;
        s[(e, e + 1)] -= 1.0 / h;
        s[(e + 1, e)] -= 1.0 / h;
    }
    s
}

/// 1-D trapezoid weights: h in the interior, h/2 at the ends.
fn weights_1d(n_cells: usize, h: f64) -> Vec<f64> {
    let n = n_cells + 1;
    (0..n).map(|i| if i == 0 || i == n_cells { h / 2.0 } else { h }).collect()
}

fn assemble_laplacian(mesh: &Mesh, a: &Anisotropy) -> DMatrix<f64> {
    let n = mesh.node_count();
    let (hx, hy) = (mesh.hx(), mesh.hy());
    let sx = stiffness_1d(mesh.nx, hx);
    let sy = stiffness_1d(mesh.ny, hy);
    let wx = weights_1d(mesh.nx, hx);
    let wy = weights_1d(mesh.ny, hy);

    let mut b = DMatrix::zeros(n, n);
    // a11·(Sx ⊗ Wy): couples x-neighbors within each row j.
    for j in 0..=mesh.ny {
        for i in 0..=mesh.nx {
            let p = mesh.node_index(i, j);
            for i2 in i.saturating_sub(1)..=(i + 1).min(mesh.nx) {
                let q = mesh.node_index(i2, j);
                b[(p, q)] += a.a11 * sx[(i, i2)] * wy[j];
            }
        }
    }
    // a22·(Wx ⊗ Sy): couples y-neighbors within each column i.
    for j in 0..=mesh.ny {
        for i in 0..=mesh.nx {
            let p = mesh.node_index(i, j);
            for j2 in j.saturating_sub(1)..=(j + 1).min(mesh.ny) {
                let q = mesh.node_index(i, j2);
                b[(p, q)] += a.a22 * wx[i] * sy[(j, j2)];
            }
        }
    }
    // Cross term from cell-centered gradients; exactly symmetric entrywise.
    if a.a12 != 0.0 {
        let area = hx * hy;
        for cj in 0..mesh.ny {
            for ci in 0..mesh.nx {
                let corners = [
                    mesh.node_index(ci, cj),
                    mesh.node_index(ci + 1, cj),
                    mesh.node_index(ci, cj + 1),
                    mesh.node_index(ci + 1, cj + 1),
                ];
                // Coefficients of the cell-average gradients in corner order
                // (sw, se, nw, ne).
                let vx = [-0.5 / hx, 0.5 / hx, -0.5 / hx, 0.5 / hx];
                let vy = [-0.5 / hy, -0.5 / hy, 0.5 / hy, 0.5 / hy];
                for p in 0..4 {
                    for q in 0..4 {
                        b[(corners[p], corners[q])] +=
                            a.a12 * area * (vx[p] * vy[q] + vy[p] * vx[q]);
                    }
                }
            }
        }
    }
    // Rescale the bilinear form by the interior cell area so interior rows
    // match the operator-scaled 5/9-point stencil.
    b / (hx * hy)
}

impl GaussianPrior {
    pub fn build(mesh: Mesh, gamma: f64, delta: f64, anisotropy: Anisotropy) -> Result<Self> {
        if gamma < 0.0 {
            return Err(Error::config(format!("gamma must be nonnegative, got {gamma}")));
        }
        if delta <= 0.0 {
            return Err(Error::config(format!("delta must be positive, got {delta}")));
        }
        if !anisotropy.is_spd() {
            return Err(Error::config("anisotropy matrix must be symmetric positive definite"));
        }
        let n = mesh.node_count();
        let mut k = if gamma == 0.0 {
            DMatrix::zeros(n, n)
        } else {
            assemble_laplacian(&mesh, &anisotropy) * gamma
        };
        for d in 0..n {
            k[(d, d)] += delta;
        }
        let chol_k = Cholesky::new(k.clone())
            .ok_or_else(|| Error::numerical("prior operator not SPD"))?;
        Ok(GaussianPrior { mesh, gamma, delta, anisotropy, k, chol_k })
    }

    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// m = K⁻¹ξ with ξ ~ N(0, I); covariance K⁻² by construction.
    pub fn sample_with(&self, rng: &mut impl Rng) -> Field {
        let n = self.node_count();
        let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        self.chol_k.solve(&xi)
    }

    pub fn sample(&self, rng: &mut impl Rng, n_samples: usize) -> Result<Vec<Field>> {
        if n_samples == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        Ok((0..n_samples).map(|_| self.sample_with(rng)).collect())
    }

    /// C⁻¹m = K(Km).
    pub fn apply_precision(&self, m: &Field) -> Field {
        &self.k * (&self.k * m)
    }

    /// Cm = K⁻¹(K⁻¹m).
    pub fn apply_covariance(&self, m: &Field) -> Field {
        self.chol_k.solve(&self.chol_k.solve(m))
    }

    /// Cameron–Martin inner product ⟨a, b⟩_{C⁻¹} = (Ka)·(Kb).
    pub fn cm_inner(&self, a: &Field, b: &Field) -> f64 {
        (&self.k * a).dot(&(&self.k * b))
    }

    /// C^{-1/2}m = Km: maps a prior sample to a standard normal vector.
    pub fn whiten(&self, m: &Field) -> Field {
        &self.k * m
    }

    /// C^{1/2}ξ = K⁻¹ξ.
    pub fn unwhiten(&self, xi: &Field) -> Field {
        self.chol_k.solve(xi)
    }

    /// Kv without forming K².
    pub fn apply_k(&self, v: &Field) -> Field {
        &self.k * v
    }

    /// K⁻¹v.
    pub fn solve_k(&self, v: &Field) -> Field {
        self.chol_k.solve(v)
    }

    /// Dense covariance C = K⁻². Test and report helper; O(n³).
    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let kinv = self.chol_k.solve(&DMatrix::identity(n, n));
        &kinv * &kinv
    }
}
