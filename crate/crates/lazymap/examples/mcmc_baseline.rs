// Preconditioned Crank-Nicolson sampling of the full posterior. Dimension
// robust but slow: every proposal costs a PDE solve. Two chains, split-R-hat
// convergence check on the leading latent coordinates.

use lazymap::baselines::{pcn_sample, PcnOptions};
use lazymap::diagnostics;
use lazymap::forward::{self, interior_lattice, PdeConfig};
use lazymap::prior::{Anisotropy, GaussianPrior, Mesh};
use lazymap::seed::{self, stream};
use lazymap::subspace;
use std::time::Instant;

fn main() {
    let mesh = Mesh::new(8, 8).unwrap();
    let prior = GaussianPrior::build(mesh, 0.5, 1.0, Anisotropy::ISOTROPIC).unwrap();
    let points = interior_lattice(&mesh, 3).unwrap();
    let cfg = PdeConfig::linear_from_selector(mesh, points, 0.005).unwrap();

    let mut rng = seed::substream(71, "mcmc-demo");
    let truth = prior.sample_with(&mut rng);
    let y = forward::synthesize_observation(&cfg, &truth, &mut rng).unwrap();

    let samples = forward::generate_samples(&prior, &cfg, 1, 71, stream::PRIOR_SAMPLING, 1).unwrap();
    let h = subspace::gn_hessian_from_samples(&cfg, &samples).unwrap();
    let basis = subspace::solve_gevp(&prior, &h, 5).unwrap();

    let opts = PcnOptions { n: 2000, beta: 0.3, burn_in: 1500, thin: 4, auto_tune: true };
    let mut chains = Vec::new();
    let t = Instant::now();
    for c in 0..2u64 {
        let mut rng = seed::substream_indexed(72, stream::MCMC, c);
        let chain = pcn_sample(&cfg, &prior, Some(&y), &opts, &mut rng).unwrap();
        println!(
            "chain {c}: {} kept samples, acceptance {:.1}%, tuned beta {:.3}, {} solver failures",
            chain.samples.len(),
            100.0 * chain.acceptance_rate,
            chain.beta,
            chain.pde_failures
        );
        chains.push(chain);
    }
    println!("sampling took {:.2?}", t.elapsed());

    // Split-R-hat per latent coordinate, pooled over chains.
    let mut worst: f64 = 0.0;
    for i in 0..basis.d_r() {
        let series: Vec<Vec<f64>> = chains
            .iter()
            .map(|ch| ch.samples.iter().map(|m| basis.encode(m)[i]).collect())
            .collect();
        let r = diagnostics::split_rhat(&series).unwrap();
        worst = worst.max(r);
    }
    println!("worst split-R-hat over {} latent coordinates: {:.4}", basis.d_r(), worst);

    // Pooled posterior mean against the conjugate closed form.
    let b = cfg.linear_matrix().unwrap();
    let k = prior.operator();
    let precision = b.transpose() * b / cfg.noise_variance + k * k;
    let mu_post = precision.try_inverse().unwrap() * (b.transpose() * &y) / cfg.noise_variance;
    let mut mean = nalgebra::DVector::zeros(prior.node_count());
    let mut count = 0.0;
    for ch in &chains {
        for m in &ch.samples {
            mean += m;
            count += 1.0;
        }
    }
    mean /= count;
    println!("pooled mean error vs closed form: {:.2}%", 100.0 * (&mean - &mu_post).norm() / mu_post.norm());
}
