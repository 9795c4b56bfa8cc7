// Draws from the Matern-like Gaussian prior N(0, (gamma A + delta I)^-2)
// and checks the sample moments against the dense covariance.

use lazymap::prior::{Anisotropy, GaussianPrior, Mesh};
use lazymap::seed;

fn main() {
    let mesh = Mesh::new(16, 16).unwrap();
    let prior = GaussianPrior::build(mesh, 0.03, 3.33, Anisotropy::ISOTROPIC).unwrap();
    let n = prior.node_count();
    println!("mesh {}x{}, {} nodes", mesh.nx, mesh.ny, n);

    let cov = prior.covariance_dense();
    let center = mesh.node_index(8, 8);
    let corner = mesh.node_index(0, 0);
    println!(
        "marginal std: center {:.4}, corner {:.4} (boundary reflection inflates the corner)",
        cov[(center, center)].sqrt(),
        cov[(corner, corner)].sqrt()
    );

    let mut rng = seed::substream(11, "prior-demo");
    let draws: Vec<_> = (0..2000).map(|_| prior.sample_with(&mut rng)).collect();
    let m = draws.len() as f64;
    let emp_var_center: f64 = draws.iter().map(|d| d[center] * d[center]).sum::<f64>() / m;
    let emp_var_corner: f64 = draws.iter().map(|d| d[corner] * d[corner]).sum::<f64>() / m;
    println!(
        "empirical std over {} draws: center {:.4}, corner {:.4}",
        draws.len(),
        emp_var_center.sqrt(),
        emp_var_corner.sqrt()
    );

    // Spatial correlation falls off with distance.
    let mid_right = mesh.node_index(12, 8);
    let far = mesh.node_index(15, 15);
    let corr = |a: usize, b: usize| cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt();
    println!("correlation center->(12,8): {:.4}", corr(center, mid_right));
    println!("correlation center->(15,15): {:.4}", corr(center, far));

    // An anisotropic operator stretches correlation along one axis.
    let aniso = Anisotropy { a11: 4.0, a12: 0.0, a22: 0.25 };
    let stretched = GaussianPrior::build(mesh, 0.03, 3.33, aniso).unwrap();
    let cov_a = stretched.covariance_dense();
    let corr_a = |a: usize, b: usize| cov_a[(a, b)] / (cov_a[(a, a)] * cov_a[(b, b)]).sqrt();
    let up = mesh.node_index(8, 12);
    println!(
        "anisotropic correlation center->right {:.4} vs center->up {:.4}",
        corr_a(center, mid_right),
        corr_a(center, up)
    );
}
