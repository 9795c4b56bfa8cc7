// Trains the reduced-basis observable surrogate twice on the same data, once
// output-only (L2) and once derivative-matched (H1), and compares held-out
// accuracy. The H1 objective buys Jacobian accuracy at equal sample count.

use lazymap::forward::{self, interior_lattice, PdeConfig, RawSample};
use lazymap::prior::{Anisotropy, GaussianPrior, Mesh};
use lazymap::seed::stream;
use lazymap::subspace::{self, DataWhitener};
use lazymap::surrogate::{self, Objective, TrainConfig};
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

fn main() {
    let mesh = Mesh::new(8, 8).unwrap();
    let prior = GaussianPrior::build(mesh, 0.05, 1.0, Anisotropy::ISOTROPIC).unwrap();
    let points = interior_lattice(&mesh, 3).unwrap();
    let cfg = PdeConfig::nonlinear(mesh, points, 2.5e-4).unwrap();
    let whitener = DataWhitener::new(cfg.noise_variance, cfg.d_y()).unwrap();

    let train_raw = forward::generate_samples(&prior, &cfg, 96, 31, stream::PRIOR_SAMPLING, 1).unwrap();
    let test_raw = forward::generate_samples(&prior, &cfg, 48, 31, stream::TEST_SAMPLING, 1).unwrap();
    let h = subspace::gn_hessian_from_samples(&cfg, &train_raw).unwrap();
    let basis = subspace::solve_gevp(&prior, &h, 8).unwrap();

    let embed = |raw: &[RawSample]| {
        let triples: Vec<(_, DVector<f64>, Option<DMatrix<f64>>)> = raw
            .iter()
            .map(|s| {
                let st = s.state.as_ref().unwrap();
                let j = forward::latent_jacobian(&cfg, &s.m, st, &basis.decoder, &whitener).unwrap();
                (s.m.clone(), s.g.clone(), Some(j))
            })
            .collect();
        subspace::embed_dataset(&basis, &whitener, &triples).unwrap()
    };
    let train_set = embed(&train_raw);
    let test_set = embed(&test_raw);
    println!("{} training, {} test samples, latent dim {}", train_set.len(), test_set.len(), basis.d_r());

    for objective in [Objective::L2, Objective::H1] {
        let tc = TrainConfig {
            objective,
            hidden_layers: 2,
            width: 32,
            epochs: 400,
            batch_size: 16,
            lr_schedule: vec![(300, 1e-3), (100, 3e-4)],
            seed: 32,
        };
        let t = Instant::now();
        let (_, report) = surrogate::train(&train_set, &tc, Some(&test_set)).unwrap();
        let (e_g, e_grad) = report.test_errors.unwrap();
        println!(
            "{objective:?}: E_g {:.4}, E_grad {:.4}, final epoch loss {:.4} ({:.2?})",
            e_g,
            e_grad.unwrap(),
            report.epoch_losses.last().unwrap(),
            t.elapsed()
        );
    }
}
