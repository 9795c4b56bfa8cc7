// The online phase: given one observation, train an inverse autoregressive
// flow against the frozen surrogate's reverse-KL objective, then weight the
// pushforward samples by the true model to judge the fit.

use lazymap::diagnostics::{self, WeightExponent};
use lazymap::forward::{self, interior_lattice, PdeConfig};
use lazymap::prior::{Anisotropy, GaussianPrior, Mesh};
use lazymap::seed::{self, stream};
use lazymap::subspace::{self, DataWhitener};
use lazymap::surrogate::{self, Objective, TrainConfig};
use lazymap::transport::{
    iaf_forward, pushforward_log_ratio, train_lazy_map, FlowConfig, LazyMapModel, MapPoint,
    RklObjective, StageSchedule,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::time::Instant;

fn main() {
    // Offline: data, basis, surrogate. Same small problem as the surrogate
    // example so the two can be read side by side.
    let mesh = Mesh::new(8, 8).unwrap();
    let prior = GaussianPrior::build(mesh, 0.05, 1.0, Anisotropy::ISOTROPIC).unwrap();
    let points = interior_lattice(&mesh, 3).unwrap();
    let cfg = PdeConfig::nonlinear(mesh, points, 2.5e-4).unwrap();
    let whitener = DataWhitener::new(cfg.noise_variance, cfg.d_y()).unwrap();
    let raw = forward::generate_samples(&prior, &cfg, 96, 31, stream::PRIOR_SAMPLING, 1).unwrap();
    let h = subspace::gn_hessian_from_samples(&cfg, &raw).unwrap();
    let basis = subspace::solve_gevp(&prior, &h, 8).unwrap();
    let triples: Vec<(_, DVector<f64>, Option<DMatrix<f64>>)> = raw
        .iter()
        .map(|s| {
            let st = s.state.as_ref().unwrap();
            let j = forward::latent_jacobian(&cfg, &s.m, st, &basis.decoder, &whitener).unwrap();
            (s.m.clone(), s.g.clone(), Some(j))
        })
        .collect();
    let train_set = subspace::embed_dataset(&basis, &whitener, &triples).unwrap();
    let tc = TrainConfig {
        objective: Objective::H1,
        hidden_layers: 2,
        width: 32,
        epochs: 400,
        batch_size: 16,
        lr_schedule: vec![(300, 1e-3), (100, 3e-4)],
        seed: 32,
    };
    let (net, _) = surrogate::train(&train_set, &tc, None).unwrap();
    let _ = raw;

    // One observation from a fresh truth.
    let mut rng = seed::substream_indexed(45, stream::NOISE, 3);
    let truth = prior.sample_with(&mut rng);
    let y = forward::synthesize_observation(&cfg, &truth, &mut rng).unwrap();

    // Online: all PDE solves are behind us, training touches only the net.
    let model = LazyMapModel::identity_init(basis.d_r(), &FlowConfig { n_layers: 3, hidden_layers: 1, width: 24 }, 46).unwrap();
    let objective = RklObjective::Surrogate { net: &net, whitened_obs: &y / whitener.sigma };
    let schedule = StageSchedule::new(vec![(400, 128, 5e-3), (200, 512, 1e-3)]).unwrap();
    let t = Instant::now();
    let (flow, report) = train_lazy_map(model, &objective, &schedule, 47).unwrap();
    println!(
        "online training: {} iterations in {:.2?}, loss {:.2} -> best {:.2}, diverged: {}",
        report.trace.len(),
        t.elapsed(),
        report.trace[0].loss,
        report.best_loss,
        report.diverged
    );

    // Importance weights against the true model, prior fill in the
    // complement. High ESS means the surrogate posterior transfers.
    let mut rng = seed::substream_indexed(45, stream::EVAL_SAMPLING, 0);
    let n = 2000;
    let mut phi = Vec::with_capacity(n);
    let mut phi_t = Vec::with_capacity(n);
    for _ in 0..n {
        let z = DVector::from_fn(basis.d_r(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let (x, _) = iaf_forward(&flow, &z);
        let fill = prior.sample_with(&mut rng);
        let m = subspace::lift_with_fill(&basis, &x, &fill);
        if let Ok(p) = forward::potential(&cfg, &y, &m) {
            phi.push(p);
            phi_t.push(pushforward_log_ratio(&flow, MapPoint::Source(&z)).unwrap());
        }
    }
    let (w_tilde, _) = diagnostics::importance_weights(&phi, &phi_t, WeightExponent::Single).unwrap();
    let ess = diagnostics::ess_percent(&w_tilde).unwrap();
    let shifted_rkl: f64 = phi.iter().zip(&phi_t).map(|(a, b)| a - b).sum::<f64>() / phi.len() as f64;
    println!("true-model reweighting over {} draws: ESS {:.1}%, shifted rKL {:.3}", phi.len(), ess, shifted_rkl);

    // In the data-informed subspace the posterior mean contracts toward the
    // truth; the complement stays at the prior and is not scored here.
    let mean = {
        let mut acc = nalgebra::DVector::zeros(prior.node_count());
        let mut rng = seed::substream(48, "posterior-mean");
        let draws = lazymap::transport::push_samples(&flow, &basis, &prior, 500, &mut rng, lazymap::transport::Fill::PriorComplement);
        for d in &draws {
            acc += d;
        }
        acc / 500.0
    };
    let truth_lat = basis.encode(&truth);
    println!(
        "latent distance to truth: prior mean {:.4}, posterior mean {:.4}",
        truth_lat.norm(),
        (basis.encode(&mean) - &truth_lat).norm()
    );
    let res = |m| (forward::pto(&cfg, m).unwrap() - &y).norm() / whitener.sigma;
    println!(
        "whitened data residual: at prior mean {:.2}, at posterior mean {:.2}",
        res(&nalgebra::DVector::zeros(prior.node_count())),
        res(&mean)
    );
}
