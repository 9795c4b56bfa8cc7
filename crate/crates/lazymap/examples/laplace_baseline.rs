// Gauss-Newton MAP search plus low-rank Laplace approximation. On the linear
// test model the posterior is Gaussian and both must match the conjugate
// closed form to solver precision; on the nonlinear model they are the
// standard fast baseline.

use lazymap::baselines;
use lazymap::forward::{self, interior_lattice, PdeConfig};
use lazymap::prior::{Anisotropy, GaussianPrior, Mesh};
use lazymap::seed;

fn main() {
    let mesh = Mesh::new(8, 8).unwrap();
    let prior = GaussianPrior::build(mesh, 0.5, 1.0, Anisotropy::ISOTROPIC).unwrap();
    let points = interior_lattice(&mesh, 2).unwrap();
    let cfg = PdeConfig::linear_from_selector(mesh, points.clone(), 0.02).unwrap();

    let mut rng = seed::substream(61, "laplace-demo");
    let truth = prior.sample_with(&mut rng);
    let y = forward::synthesize_observation(&cfg, &truth, &mut rng).unwrap();

    let map = baselines::find_map(&cfg, &prior, &y, 100).unwrap();
    println!(
        "linear MAP: {} Gauss-Newton iterations, final gradient norm {:.2e}",
        map.iterations, map.gradient_norm
    );

    // Conjugate closed form.
    let b = cfg.linear_matrix().unwrap();
    let k = prior.operator();
    let precision = b.transpose() * b / cfg.noise_variance + k * k;
    let sigma_post = precision.try_inverse().unwrap();
    let mu_post = &sigma_post * (b.transpose() * &y) / cfg.noise_variance;
    println!("MAP vs closed form: {:.2e} relative", (&map.point - &mu_post).norm() / mu_post.norm());

    let la = baselines::build_laplace(&cfg, &prior, &y, Some(cfg.d_y())).unwrap();
    println!(
        "Laplace rank {}, covariance vs closed form: {:.2e} relative",
        la.d_la(),
        (&la.cov - &sigma_post).norm() / sigma_post.norm()
    );
    let s = la.sample_with(&mut rng);
    println!("one Laplace draw, norm {:.3}", s.norm());

    // Same machinery on the nonlinear model.
    let cfg = PdeConfig::nonlinear(mesh, points, 2.5e-4).unwrap();
    let prior = GaussianPrior::build(mesh, 0.05, 1.0, Anisotropy::ISOTROPIC).unwrap();
    let truth = prior.sample_with(&mut rng);
    let y = forward::synthesize_observation(&cfg, &truth, &mut rng).unwrap();
    let map = baselines::find_map(&cfg, &prior, &y, 100).unwrap();
    println!(
        "nonlinear MAP: {} iterations, gradient norm {:.2e}, distance to truth {:.3} (prior mean {:.3})",
        map.iterations,
        map.gradient_norm,
        (&map.point - &truth).norm(),
        truth.norm()
    );
    let la = baselines::build_laplace(&cfg, &prior, &y, None).unwrap();
    println!(
        "nonlinear Laplace: rank {} of {} nodes, leading curvature eigenvalue {:.1}",
        la.d_la(),
        prior.node_count(),
        la.eigenvalues[0]
    );
}
