// Solves the nonlinear reaction-diffusion problem at a prior draw, observes
// it on the interior lattice, and validates the adjoint Jacobian against
// finite differences.

use lazymap::forward::{self, interior_lattice, PdeConfig};
use lazymap::prior::{Anisotropy, GaussianPrior, Mesh};
use lazymap::seed;
use nalgebra::DVector;
use std::time::Instant;

fn main() {
    let mesh = Mesh::new(16, 16).unwrap();
    let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
    let points = interior_lattice(&mesh, 5).unwrap();
    let cfg = PdeConfig::nonlinear(mesh, points, 1.94e-3).unwrap();
    println!("observing {} interior lattice points, noise std {:.4}", cfg.d_y(), cfg.sigma());

    let mut rng = seed::substream(3, "forward-demo");
    let m = prior.sample_with(&mut rng);
    let t = Instant::now();
    let state = forward::solve_pde(&cfg, &m).unwrap();
    println!(
        "Newton converged in {} iterations ({:.2?}), state range [{:.4}, {:.4}]",
        state.newton_iters,
        t.elapsed(),
        state.u.min(),
        state.u.max()
    );

    let g = cfg.observe(&state.u);
    println!("observable: first 5 of {} entries {:?}", g.len(), &g.as_slice()[..5]);

    let y = forward::synthesize_observation(&cfg, &m, &mut rng).unwrap();
    println!("noisy observation differs by {:.5} (rms)", ((&y - &g).norm_squared() / g.len() as f64).sqrt());

    // Adjoint Jacobian vs central differences along a random direction.
    let t = Instant::now();
    let jac = forward::full_jacobian(&cfg, &m, Some(&state)).unwrap();
    println!("adjoint Jacobian {}x{} in {:.2?}", jac.nrows(), jac.ncols(), t.elapsed());
    let dir = prior.sample_with(&mut rng);
    let eps = 1e-5;
    let gp = forward::pto(&cfg, &(&m + &dir * eps)).unwrap();
    let gm = forward::pto(&cfg, &(&m - &dir * eps)).unwrap();
    let fd: DVector<f64> = (gp - gm) / (2.0 * eps);
    let an = &jac * &dir;
    println!("directional derivative rel error {:.3e}", (&fd - &an).norm() / an.norm());
}
