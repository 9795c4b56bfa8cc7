//! The command pipeline behind the CLI: offline surrogate construction,
//! online transport training, baselines, diagnostics, and amortization over
//! several observations. Every command reads and writes archives under one
//! output directory and is byte-deterministic given (config, seed).
//!
//! Archive directories under the output root: `dataset`, `basis`,
//! `surrogate`, `observations` (offline); `transport` (online); `laplace`,
//! `mcmc`, `lazymap` (baselines); `transport_y<j>` (amortize);
//! `prior_samples`. Reports: `diagnostics.csv`, `amortize.csv`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::archive::Archive;
use crate::baselines::{self, LaplaceModel};
use crate::config::{ModeName, RunConfig};
use crate::diagnostics::{self, DensityReport, MomentReport};
use crate::error::{Error, Result};
use crate::forward::{self, PdeConfig, RawSample};
use crate::prior::{Field, GaussianPrior};
use crate::seed::{self, stream};
use crate::subspace::{self, DataWhitener, EmbeddedDataset, ReducedBasis};
use crate::surrogate::{self, MlpSurrogate, Objective};
use crate::transport::{self, FlowConfig, LazyMapModel, MapPoint, RklObjective, TrainReport};

pub const DATASET_DIR: &str = "dataset";
pub const BASIS_DIR: &str = "basis";
pub const SURROGATE_DIR: &str = "surrogate";
pub const OBSERVATIONS_DIR: &str = "observations";
pub const TRANSPORT_DIR: &str = "transport";
pub const LAPLACE_DIR: &str = "laplace";
pub const MCMC_DIR: &str = "mcmc";
pub const LAZYMAP_DIR: &str = "lazymap";
pub const PRIOR_SAMPLES_DIR: &str = "prior_samples";
pub const DIAGNOSE_CSV: &str = "diagnostics.csv";
pub const AMORTIZE_CSV: &str = "amortize.csv";

/// Column order of `diagnostics.csv`; frozen so downstream plots are stable.
pub const DIAGNOSE_COLUMNS: &str = "method,config,n_train,d_r,n_eval,n_density,e_mean,e_cov,\
                                    e_skew,k_skew,e_rkl_shifted,e_fkl_shifted,ess_percent,e_map,\
                                    map_converged,reference_rhat";

/// Column order of `amortize.csv`; frozen.
pub const AMORTIZE_COLUMNS: &str = "observation,best_loss,diverged,n_density,ess_percent,\
                                    e_rkl_shifted,e_fkl_shifted,offline_samples_total,\
                                    offline_samples_per_y,online_training_solves";

fn stage<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{name}: {m}")),
        Error::Io(io) => Error::Config(format!("{name}: {io}")),
    })
}

/// Tracks archive directories written by a command so a failure can remove
/// partial outputs.
#[derive(Default)]
struct Outputs {
    created: Vec<PathBuf>,
}

impl Outputs {
    fn write(&mut self, archive: &Archive, dir: PathBuf) -> Result<()> {
        archive.write_dir(&dir)?;
        self.created.push(dir);
        Ok(())
    }

    fn clean(&self) {
        for dir in &self.created {
            let _ = std::fs::remove_dir_all(dir);
        }
    }
}

fn read_archive(out: &Path, dir: &str, expected_kind: &str) -> Result<Archive> {
    let path = out.join(dir);
    let archive = Archive::read_dir(&path)?;
    if archive.kind() != expected_kind {
        return Err(Error::config(format!(
            "archive at {} has kind {:?}, expected {:?}",
            path.display(),
            archive.kind(),
            expected_kind
        )));
    }
    Ok(archive)
}

fn usize_scalar(archive: &Archive, name: &str) -> Result<usize> {
    let v = archive.scalar(name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::config(format!("array {name:?} is not a nonnegative integer")));
    }
    Ok(v as usize)
}

// ---------------------------------------------------------------------------
// Offline phase
// ---------------------------------------------------------------------------

fn columns_matrix(columns: &[DVector<f64>]) -> DMatrix<f64> {
    let rows = columns.first().map(|c| c.len()).unwrap_or(0);
    let mut m = DMatrix::zeros(rows, columns.len());
    for (i, c) in columns.iter().enumerate() {
        m.set_column(i, c);
    }
    m
}

fn latent_jacobians(
    pde: &PdeConfig,
    basis: &ReducedBasis,
    whitener: &DataWhitener,
    samples: &[RawSample],
) -> Result<Vec<DMatrix<f64>>> {
    if let Some(b) = pde.linear_matrix() {
        let jr = b * &basis.decoder / whitener.sigma;
        return Ok(vec![jr; samples.len()]);
    }
    samples
        .iter()
        .map(|s| {
            let state = s
                .state
                .as_ref()
                .ok_or_else(|| Error::numerical("sample is missing its solved state"))?;
            forward::latent_jacobian(pde, &s.m, state, &basis.decoder, whitener)
        })
        .collect()
}

fn embed(
    basis: &ReducedBasis,
    whitener: &DataWhitener,
    samples: &[RawSample],
    jacobians: Vec<DMatrix<f64>>,
) -> Result<EmbeddedDataset> {
    let triples: Vec<(Field, DVector<f64>, Option<DMatrix<f64>>)> = samples
        .iter()
        .zip(jacobians)
        .map(|(s, j)| (s.m.clone(), s.g.clone(), Some(j)))
        .collect();
    subspace::embed_dataset(basis, whitener, &triples)
}

fn push_dataset_split(
    archive: &mut Archive,
    suffix: &str,
    ds: &EmbeddedDataset,
) -> Result<()> {
    archive.push_matrix(&format!("x_{suffix}"), &columns_matrix(&ds.inputs))?;
    archive.push_matrix(&format!("g_{suffix}"), &columns_matrix(&ds.outputs))?;
    let jacs = ds
        .jacobians
        .as_ref()
        .ok_or_else(|| Error::config("dataset split is missing jacobians"))?;
    archive.push_matrix_stack(&format!("jac_{suffix}"), jacs)
}

/// Offline phase: prior samples with observables and Jacobians, the
/// derivative-informed basis, the trained surrogate, and synthetic
/// observations. Any stage failure aborts with the stage name and removes
/// the partially written archives.
pub fn cmd_offline(cfg: &RunConfig, out: &Path, threads: usize) -> Result<()> {
    let mut outputs = Outputs::default();
    let result = offline_inner(cfg, out, threads, &mut outputs);
    if result.is_err() {
        outputs.clean();
    }
    result
}

fn offline_inner(cfg: &RunConfig, out: &Path, threads: usize, outputs: &mut Outputs) -> Result<()> {
    let hash = cfg.digest();
    let prior = stage("prior setup", cfg.build_prior())?;
    let pde = stage("model setup", cfg.build_model())?;
    let whitener = DataWhitener::new(cfg.model.sigma2, pde.d_y())?;

    let n_train = cfg.surrogate.n_train;
    let train_raw = stage(
        "sample generation",
        forward::generate_samples(&prior, &pde, n_train, cfg.seed, stream::PRIOR_SAMPLING, threads),
    )?;
    let test_raw = stage(
        "test sample generation",
        forward::generate_samples(
            &prior,
            &pde,
            cfg.surrogate.n_test,
            cfg.seed,
            stream::TEST_SAMPLING,
            threads,
        ),
    )?;

    // Observation substream j yields the truth draw, then the noise draw;
    // non-converging truths are redrawn from the same substream.
    let mut observations = Vec::with_capacity(cfg.model.n_observations);
    for j in 0..cfg.model.n_observations {
        let mut rng = seed::substream_indexed(cfg.seed, stream::NOISE, j as u64);
        let pair = stage("observation synthesis", {
            let mut attempt = 0;
            loop {
                let truth = prior.sample_with(&mut rng);
                match forward::synthesize_observation(&pde, &truth, &mut rng) {
                    Ok(y) => break Ok((truth, y)),
                    Err(Error::Numerical(_)) if attempt < 100 => attempt += 1,
                    Err(e) => break Err(e),
                }
            }
        })?;
        observations.push(pair);
    }

    let n_basis = cfg.subspace.n_basis_samples.unwrap_or(n_train).min(n_train);
    let h = stage("subspace estimation", subspace::gn_hessian_from_samples(&pde, &train_raw[..n_basis]))?;
    let basis = stage("subspace estimation", subspace::solve_gevp(&prior, &h, cfg.subspace.d_r))?;

    let train_jacs = stage("dataset embedding", latent_jacobians(&pde, &basis, &whitener, &train_raw))?;
    let train_ds = stage("dataset embedding", embed(&basis, &whitener, &train_raw, train_jacs))?;
    let test_ds = if test_raw.is_empty() {
        None
    } else {
        let jacs = stage("dataset embedding", latent_jacobians(&pde, &basis, &whitener, &test_raw))?;
        Some(stage("dataset embedding", embed(&basis, &whitener, &test_raw, jacs))?)
    };

    let train_cfg = cfg.surrogate_train();
    let (net, report) =
        stage("surrogate training", surrogate::train(&train_ds, &train_cfg, test_ds.as_ref()))?;

    let mut dataset = Archive::new("dataset", cfg.seed, &hash)?;
    push_dataset_split(&mut dataset, "train", &train_ds)?;
    if let Some(test) = &test_ds {
        push_dataset_split(&mut dataset, "test", test)?;
    }
    stage("archive write", outputs.write(&dataset, out.join(DATASET_DIR)))?;

    let mut basis_archive = Archive::new("basis", cfg.seed, &hash)?;
    basis_archive.push_matrix("decoder", &basis.decoder)?;
    basis_archive.push_matrix("encoder", &basis.encoder)?;
    basis_archive.push_vector("eigenvalues", &basis.eigenvalues)?;
    basis_archive.push_scalar("tail_sum", basis.tail_sum)?;
    stage("archive write", outputs.write(&basis_archive, out.join(BASIS_DIR)))?;

    let mut net_archive = Archive::new("surrogate", cfg.surrogate_seed(), &hash)?;
    net_archive.push_array(
        "sizes",
        vec![net.sizes.len()],
        net.sizes.iter().map(|s| *s as f64).collect(),
    )?;
    for (l, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
        net_archive.push_matrix(&format!("weights_{l}"), w)?;
        net_archive.push_vector(&format!("biases_{l}"), b)?;
    }
    net_archive.push_scalar(
        "objective",
        match train_cfg.objective {
            Objective::L2 => 0.0,
            Objective::H1 => 1.0,
        },
    )?;
    net_archive.push_array("epoch_losses", vec![report.epoch_losses.len()], report.epoch_losses.clone())?;
    let (e_g, e_grad) = match report.test_errors {
        Some((eg, egrad)) => (eg, egrad.unwrap_or(f64::NAN)),
        None => (f64::NAN, f64::NAN),
    };
    net_archive.push_scalar("test_e_g", e_g)?;
    net_archive.push_scalar("test_e_grad", e_grad)?;
    stage("archive write", outputs.write(&net_archive, out.join(SURROGATE_DIR)))?;

    let mut obs_archive = Archive::new("observations", cfg.seed, &hash)?;
    obs_archive.push_scalar("sigma2", cfg.model.sigma2)?;
    obs_archive.push_scalar("n_observations", cfg.model.n_observations as f64)?;
    for (j, (truth, y)) in observations.iter().enumerate() {
        obs_archive.push_vector(&format!("truth_{j}"), truth)?;
        obs_archive.push_vector(&format!("y_{j}"), y)?;
    }
    stage("archive write", outputs.write(&obs_archive, out.join(OBSERVATIONS_DIR)))?;

    match report.test_errors {
        Some((eg, Some(egrad))) => {
            println!("offline: {n_train} training samples, basis rank {}, test E_g = {eg:.4}, E_grad = {egrad:.4}", basis.d_r())
        }
        Some((eg, None)) => {
            println!("offline: {n_train} training samples, basis rank {}, test E_g = {eg:.4}", basis.d_r())
        }
        None => println!("offline: {n_train} training samples, basis rank {}", basis.d_r()),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Artifact loading
// ---------------------------------------------------------------------------

fn load_basis(out: &Path) -> Result<ReducedBasis> {
    let archive = read_archive(out, BASIS_DIR, "basis")?;
    Ok(ReducedBasis {
        decoder: archive.matrix("decoder")?,
        encoder: archive.matrix("encoder")?,
        eigenvalues: archive.vector("eigenvalues")?,
        tail_sum: archive.scalar("tail_sum")?,
    })
}

fn load_surrogate(out: &Path) -> Result<MlpSurrogate> {
    let archive = read_archive(out, SURROGATE_DIR, "surrogate")?;
    let (_, sizes_raw) = archive.array("sizes")?;
    let sizes: Vec<usize> = sizes_raw.iter().map(|v| *v as usize).collect();
    if sizes.len() < 2 {
        return Err(Error::config("surrogate archive has a degenerate size list"));
    }
    let mut weights = Vec::with_capacity(sizes.len() - 1);
    let mut biases = Vec::with_capacity(sizes.len() - 1);
    for l in 0..sizes.len() - 1 {
        let w = archive.matrix(&format!("weights_{l}"))?;
        let b = archive.vector(&format!("biases_{l}"))?;
        if w.nrows() != sizes[l + 1] || w.ncols() != sizes[l] || b.len() != sizes[l + 1] {
            return Err(Error::config(format!("surrogate archive layer {l} has inconsistent shapes")));
        }
        weights.push(w);
        biases.push(b);
    }
    let net = MlpSurrogate { sizes, weights, biases };
    net.check_finite()?;
    Ok(net)
}

struct Observations {
    sigma2: f64,
    ys: Vec<DVector<f64>>,
}

fn load_observations(out: &Path) -> Result<Observations> {
    let archive = read_archive(out, OBSERVATIONS_DIR, "observations")?;
    let sigma2 = archive.scalar("sigma2")?;
    let count = usize_scalar(&archive, "n_observations")?;
    let ys = (0..count).map(|j| archive.vector(&format!("y_{j}"))).collect::<Result<_>>()?;
    Ok(Observations { sigma2, ys })
}

fn push_flow(archive: &mut Archive, model: &LazyMapModel, flow: &FlowConfig) -> Result<()> {
    archive.push_scalar("d_r", model.d_r() as f64)?;
    archive.push_scalar("layers", flow.n_layers as f64)?;
    archive.push_scalar("hidden_layers", flow.hidden_layers as f64)?;
    archive.push_scalar("width", flow.width as f64)?;
    let mut perms = DMatrix::zeros(model.d_r(), model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, p) in layer.permutation.iter().enumerate() {
            perms[(i, l)] = *p as f64;
        }
    }
    archive.push_matrix("permutations", &perms)?;
    archive.push_vector("theta", &model.get_params())
}

fn push_trace(archive: &mut Archive, report: &TrainReport) -> Result<()> {
    let n = report.trace.len();
    archive.push_array(
        "trace_iteration",
        vec![n],
        report.trace.iter().map(|t| t.iteration as f64).collect(),
    )?;
    archive.push_array("trace_stage", vec![n], report.trace.iter().map(|t| t.stage as f64).collect())?;
    archive.push_array("trace_loss", vec![n], report.trace.iter().map(|t| t.loss).collect())?;
    archive.push_scalar("best_loss", report.best_loss)?;
    archive.push_scalar("diverged", report.diverged as u8 as f64)?;
    archive.push_scalar("dropped_samples", report.dropped_samples as f64)
}

/// Rebuilds a transport map from its archive: the identity skeleton comes
/// from the recorded seed and architecture, the parameters from `theta`.
fn load_flow(out: &Path, dir: &str, kind: &str) -> Result<LazyMapModel> {
    let archive = read_archive(out, dir, kind)?;
    let d_r = usize_scalar(&archive, "d_r")?;
    let flow = FlowConfig {
        n_layers: usize_scalar(&archive, "layers")?,
        hidden_layers: usize_scalar(&archive, "hidden_layers")?,
        width: usize_scalar(&archive, "width")?,
    };
    let mut model = LazyMapModel::identity_init(d_r, &flow, archive.seed())?;
    let perms = archive.matrix("permutations")?;
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, p) in layer.permutation.iter().enumerate() {
            if perms[(i, l)] != *p as f64 {
                return Err(Error::config(
                    "transport archive permutations do not match its recorded seed",
                ));
            }
        }
    }
    model.set_params(&archive.vector("theta")?)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Online phase and transport baselines
// ---------------------------------------------------------------------------

/// Online phase: trains the lazy map against the surrogate reverse-KL
/// objective for observation 0 and archives the result with its loss trace.
pub fn cmd_online(cfg: &RunConfig, out: &Path) -> Result<()> {
    let basis = stage("artifact loading", load_basis(out))?;
    let net = stage("artifact loading", load_surrogate(out))?;
    let obs = stage("artifact loading", load_observations(out))?;
    if net.d_r() != basis.d_r() {
        return Err(Error::config(format!(
            "latent dimension mismatch: basis has d_r = {}, surrogate expects {}",
            basis.d_r(),
            net.d_r()
        )));
    }
    let y = obs.ys.first().ok_or_else(|| Error::config("observations archive is empty"))?;
    if net.d_y() != y.len() {
        return Err(Error::config(format!(
            "observable dimension mismatch: surrogate emits {}, observation has {}",
            net.d_y(),
            y.len()
        )));
    }

    let flow = cfg.flow();
    let seed = cfg.transport_seed();
    let model = LazyMapModel::identity_init(basis.d_r(), &flow, seed)?;
    let objective =
        RklObjective::Surrogate { net: &net, whitened_obs: y / obs.sigma2.sqrt() };
    let schedule = cfg.transport_stages()?;
    let (trained, report) =
        stage("transport training", transport::train_lazy_map(model, &objective, &schedule, seed))?;

    let mut archive = Archive::new("transport", seed, &cfg.digest())?;
    push_flow(&mut archive, &trained, &flow)?;
    push_trace(&mut archive, &report)?;
    archive.write_dir(&out.join(TRANSPORT_DIR))?;
    println!(
        "online: {} iterations, best loss {:.6}{}",
        report.trace.len(),
        report.best_loss,
        if report.diverged { " (diverged, best parameters restored)" } else { "" }
    );
    Ok(())
}

/// Transport trained directly against the PDE model (no surrogate); the
/// reference "lazy map from the true model" baseline.
pub fn cmd_lazymap(cfg: &RunConfig, out: &Path) -> Result<()> {
    let basis = stage("artifact loading", load_basis(out))?;
    let obs = stage("artifact loading", load_observations(out))?;
    let y = obs.ys.first().ok_or_else(|| Error::config("observations archive is empty"))?;
    let pde = stage("model setup", cfg.build_model())?;
    if basis.node_count() != pde.mesh.node_count() {
        return Err(Error::config(format!(
            "mesh mismatch: basis has {} nodes, model has {}",
            basis.node_count(),
            pde.mesh.node_count()
        )));
    }

    let flow = cfg.flow();
    let seed = cfg.transport_seed();
    let model = LazyMapModel::identity_init(basis.d_r(), &flow, seed)?;
    let objective = RklObjective::Model { cfg: &pde, basis: &basis, observation: y.clone() };
    let schedule = cfg.lazymap_stages()?;
    let (trained, report) =
        stage("transport training", transport::train_lazy_map(model, &objective, &schedule, seed))?;

    let mut archive = Archive::new("lazymap", seed, &cfg.digest())?;
    push_flow(&mut archive, &trained, &flow)?;
    push_trace(&mut archive, &report)?;
    archive.write_dir(&out.join(LAZYMAP_DIR))?;
    println!(
        "lazymap: {} iterations against the true model, best loss {:.6}, {} dropped batch elements",
        report.trace.len(),
        report.best_loss,
        report.dropped_samples
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Classical baselines
// ---------------------------------------------------------------------------

pub fn cmd_laplace(cfg: &RunConfig, out: &Path) -> Result<()> {
    let obs = stage("artifact loading", load_observations(out))?;
    let y = obs.ys.first().ok_or_else(|| Error::config("observations archive is empty"))?;
    let prior = stage("prior setup", cfg.build_prior())?;
    let pde = stage("model setup", cfg.build_model())?;
    let la = stage(
        "laplace construction",
        baselines::build_laplace(&pde, &prior, y, cfg.baselines.laplace.d_la),
    )?;

    let mut archive = Archive::new("laplace", cfg.seed, &cfg.digest())?;
    archive.push_vector("map_point", &la.map_point)?;
    archive.push_scalar("map_iterations", la.map_iterations as f64)?;
    archive.push_vector("eigenvalues", &la.eigenvalues)?;
    archive.push_matrix("decoder", &la.decoder)?;
    archive.push_matrix("encoder", &la.encoder)?;
    archive.push_matrix("cov", &la.cov)?;
    archive.push_matrix("chol", &la.chol)?;
    archive.write_dir(&out.join(LAPLACE_DIR))?;
    println!(
        "laplace: MAP found in {} iterations, {} retained eigenpairs",
        la.map_iterations,
        la.d_la()
    );
    Ok(())
}

fn load_laplace(out: &Path) -> Result<LaplaceModel> {
    let archive = read_archive(out, LAPLACE_DIR, "laplace")?;
    Ok(LaplaceModel {
        map_point: archive.vector("map_point")?,
        map_iterations: usize_scalar(&archive, "map_iterations")?,
        eigenvalues: archive.vector("eigenvalues")?,
        decoder: archive.matrix("decoder")?,
        encoder: archive.matrix("encoder")?,
        cov: archive.matrix("cov")?,
        chol: archive.matrix("chol")?,
    })
}

pub fn cmd_mcmc(cfg: &RunConfig, out: &Path) -> Result<()> {
    let obs = stage("artifact loading", load_observations(out))?;
    let y = obs.ys.first().ok_or_else(|| Error::config("observations archive is empty"))?;
    let prior = stage("prior setup", cfg.build_prior())?;
    let pde = stage("model setup", cfg.build_model())?;
    let opts = cfg.pcn_options();
    let n_chains = cfg.baselines.pcn.n_chains;

    let mut chains = Vec::with_capacity(n_chains);
    for c in 0..n_chains {
        let mut rng = seed::substream_indexed(cfg.seed, stream::MCMC, c as u64);
        let chain =
            stage("pcn sampling", baselines::pcn_sample(&pde, &prior, Some(y), &opts, &mut rng))?;
        chains.push(chain);
    }

    let mut archive = Archive::new("mcmc", cfg.seed, &cfg.digest())?;
    let sample_mats: Vec<DMatrix<f64>> =
        chains.iter().map(|c| columns_matrix(&c.samples)).collect();
    archive.push_matrix_stack("samples", &sample_mats)?;
    archive.push_array(
        "acceptance",
        vec![n_chains],
        chains.iter().map(|c| c.acceptance_rate).collect(),
    )?;
    archive.push_array("beta", vec![n_chains], chains.iter().map(|c| c.beta).collect())?;
    archive.push_array(
        "pde_failures",
        vec![n_chains],
        chains.iter().map(|c| c.pde_failures as f64).collect(),
    )?;
    archive.write_dir(&out.join(MCMC_DIR))?;
    for (c, chain) in chains.iter().enumerate() {
        println!(
            "mcmc: chain {c} kept {} samples, acceptance {:.3}, final beta {:.4}",
            chain.samples.len(),
            chain.acceptance_rate,
            chain.beta
        );
    }
    Ok(())
}

pub fn cmd_prior_sample(cfg: &RunConfig, out: &Path) -> Result<()> {
    const COUNT: usize = 64;
    let prior = stage("prior setup", cfg.build_prior())?;
    let mut rng = seed::substream(cfg.seed, stream::PRIOR_SAMPLING);
    let samples: Vec<Field> = (0..COUNT).map(|_| prior.sample_with(&mut rng)).collect();
    let marginal_std = prior.covariance_dense().diagonal().map(f64::sqrt);

    let mut archive = Archive::new("prior_samples", cfg.seed, &cfg.digest())?;
    archive.push_matrix("samples", &columns_matrix(&samples))?;
    archive.push_vector("marginal_std", &marginal_std)?;
    archive.push_scalar("nx", cfg.prior.nx as f64)?;
    archive.push_scalar("ny", cfg.prior.ny as f64)?;
    archive.write_dir(&out.join(PRIOR_SAMPLES_DIR))?;
    let mean_std = marginal_std.mean();
    println!("prior-sample: {COUNT} fields, mean pointwise std {mean_std:.4}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Pushforward draws with the per-sample potentials needed by the density
/// diagnostics. Samples whose forward solve fails stay in the moment set but
/// drop out of the density estimates.
struct EvalSet {
    fields: Vec<Field>,
    phi: Vec<f64>,
    phi_t: Vec<f64>,
    dropped: usize,
}

fn eval_flow(
    model: &LazyMapModel,
    basis: &ReducedBasis,
    prior: &GaussianPrior,
    pde: &PdeConfig,
    y: &DVector<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<EvalSet> {
    let d_r = model.d_r();
    let mut set = EvalSet { fields: Vec::with_capacity(n), phi: Vec::new(), phi_t: Vec::new(), dropped: 0 };
    for _ in 0..n {
        let z = DVector::from_fn(d_r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (x, _) = transport::iaf_forward(model, &z);
        let fill = prior.sample_with(rng);
        let m = subspace::lift_with_fill(basis, &x, &fill);
        let log_ratio = transport::pushforward_log_ratio(model, MapPoint::Source(&z))?;
        match forward::potential(pde, y, &m) {
            Ok(p) => {
                set.phi.push(p);
                set.phi_t.push(log_ratio);
            }
            Err(Error::Numerical(_)) => set.dropped += 1,
            Err(e) => return Err(e),
        }
        set.fields.push(m);
    }
    Ok(set)
}

fn eval_laplace(
    la: &LaplaceModel,
    prior: &GaussianPrior,
    pde: &PdeConfig,
    y: &DVector<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<EvalSet> {
    let mut set = EvalSet { fields: Vec::with_capacity(n), phi: Vec::new(), phi_t: Vec::new(), dropped: 0 };
    for _ in 0..n {
        let m = la.sample_with(rng);
        let log_ratio = baselines::laplace_log_ratio(la, prior, &m);
        match forward::potential(pde, y, &m) {
            Ok(p) => {
                set.phi.push(p);
                set.phi_t.push(-log_ratio);
            }
            Err(Error::Numerical(_)) => set.dropped += 1,
            Err(e) => return Err(e),
        }
        set.fields.push(m);
    }
    Ok(set)
}

/// Exact posterior sampler for the linear observation model; the reference
/// when no chain is available.
fn analytic_reference(
    prior: &GaussianPrior,
    pde: &PdeConfig,
    y: &DVector<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Field>> {
    let b = pde
        .linear_matrix()
        .ok_or_else(|| Error::config("analytic reference needs the linear observation model"))?;
    let precision = b.transpose() * b / pde.noise_variance + prior.operator() * prior.operator();
    let cov = precision
        .try_inverse()
        .ok_or_else(|| Error::numerical("posterior precision is singular"))?;
    let mean = &cov * (b.transpose() * y / pde.noise_variance);
    let cov = (&cov + &cov.transpose()) * 0.5;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::numerical("posterior covariance is not positive definite"))?;
    let dim = mean.len();
    Ok((0..n)
        .map(|_| {
            let xi = Field::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            &mean + chol.l() * xi
        })
        .collect())
}

/// Pooled pCN reference with the split-R̂ convergence gate on the leading
/// latent coordinates.
fn mcmc_reference(out: &Path, basis: &ReducedBasis) -> Result<(Vec<Field>, f64)> {
    let archive = read_archive(out, MCMC_DIR, "mcmc")?;
    let chain_mats = archive.matrix_stack("samples")?;
    let k = basis.d_r().min(5);
    let mut rhat_max: f64 = 0.0;
    for coord in 0..k {
        let series: Vec<Vec<f64>> = chain_mats
            .iter()
            .map(|chain| {
                chain.column_iter().map(|m| basis.encode(&m.into_owned())[coord]).collect()
            })
            .collect();
        rhat_max = rhat_max.max(diagnostics::split_rhat(&series)?);
    }
    if rhat_max >= 1.05 {
        return Err(Error::numerical(format!(
            "pCN reference failed the split-R-hat gate: max {rhat_max:.4} over {k} leading latent coordinates"
        )));
    }
    let mut fields = Vec::new();
    for chain in &chain_mats {
        for col in chain.column_iter() {
            fields.push(col.into_owned());
        }
    }
    Ok((fields, rhat_max))
}

fn float_cell(v: f64) -> String {
    // Shortest round-trip formatting; stable across runs.
    format!("{v}")
}

struct DiagnoseRow {
    method: &'static str,
    n_density: usize,
    moments: MomentReport,
    density: DensityReport,
    map_converged: bool,
}

/// Compares every method archive present in `out` against the reference
/// posterior (pCN for the nonlinear model, the analytic sampler for the
/// linear one) and writes one CSV row per method.
pub fn cmd_diagnose(cfg: &RunConfig, out: &Path) -> Result<()> {
    let prior = stage("prior setup", cfg.build_prior())?;
    let pde = stage("model setup", cfg.build_model())?;
    let basis = stage("artifact loading", load_basis(out))?;
    let obs = stage("artifact loading", load_observations(out))?;
    let y = obs.ys.first().ok_or_else(|| Error::config("observations archive is empty"))?;
    let n_eval = cfg.diagnostics.n_eval;
    let exponent = cfg.weight_exponent();
    let k_skew = cfg.k_skew_effective();

    // Substream indices: 0 reference, 1 transport, 2 lazymap, 3 laplace.
    let (reference, rhat) = match cfg.model.mode {
        ModeName::LinearTest => {
            let mut rng = seed::substream_indexed(cfg.seed, stream::EVAL_SAMPLING, 0);
            let fields =
                stage("reference sampling", analytic_reference(&prior, &pde, y, n_eval, &mut rng))?;
            (fields, f64::NAN)
        }
        ModeName::Nonlinear => {
            let (fields, rhat) = stage("reference sampling", mcmc_reference(out, &basis))?;
            (fields, rhat)
        }
    };

    let laplace = if out.join(LAPLACE_DIR).join("manifest.txt").exists() {
        Some(stage("artifact loading", load_laplace(out))?)
    } else {
        None
    };

    let mut rows: Vec<DiagnoseRow> = Vec::new();
    let flow_methods: [(&'static str, &str, &str, u64); 2] =
        [("transport", TRANSPORT_DIR, "transport", 1), ("lazymap", LAZYMAP_DIR, "lazymap", 2)];
    for (method, dir, kind, stream_idx) in flow_methods {
        if !out.join(dir).join("manifest.txt").exists() {
            continue;
        }
        let model = stage("artifact loading", load_flow(out, dir, kind))?;
        if model.d_r() != basis.d_r() {
            return Err(Error::config(format!(
                "latent dimension mismatch: basis has d_r = {}, {method} map has {}",
                basis.d_r(),
                model.d_r()
            )));
        }
        let mut rng = seed::substream_indexed(cfg.seed, stream::EVAL_SAMPLING, stream_idx);
        let set = stage("pushforward evaluation",
            eval_flow(&model, &basis, &prior, &pde, y, n_eval, &mut rng))?;
        let moments =
            stage("moment diagnostics", diagnostics::moment_errors(&set.fields, &reference, &basis, k_skew))?;
        let (e_map, map_converged) = match &laplace {
            Some(la) => {
                let est = stage(
                    "pushforward mode search",
                    diagnostics::pushforward_map_estimate(&model, &basis, &la.map_point, cfg.seed),
                )?;
                (est.e_map, est.converged)
            }
            None => (f64::NAN, true),
        };
        let density = stage(
            "density diagnostics",
            diagnostics::density_report(&set.phi, &set.phi_t, exponent, e_map),
        )?;
        rows.push(DiagnoseRow { method, n_density: set.phi.len(), moments, density, map_converged });
    }

    if let Some(la) = &laplace {
        let mut rng = seed::substream_indexed(cfg.seed, stream::EVAL_SAMPLING, 3);
        let set = stage("pushforward evaluation", eval_laplace(la, &prior, &pde, y, n_eval, &mut rng))?;
        let moments =
            stage("moment diagnostics", diagnostics::moment_errors(&set.fields, &reference, &basis, k_skew))?;
        let density = stage(
            "density diagnostics",
            diagnostics::density_report(&set.phi, &set.phi_t, exponent, 0.0),
        )?;
        rows.push(DiagnoseRow {
            method: "laplace",
            n_density: set.phi.len(),
            moments,
            density,
            map_converged: true,
        });
    }

    if rows.is_empty() {
        return Err(Error::config(
            "no method archives found; run online, lazymap, or laplace first",
        ));
    }

    let config_id = &cfg.digest()[..12];
    let mut csv = String::from(DIAGNOSE_COLUMNS);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.method,
            config_id,
            cfg.surrogate.n_train,
            basis.d_r(),
            n_eval,
            row.n_density,
            float_cell(row.moments.e_mean),
            float_cell(row.moments.e_cov),
            float_cell(row.moments.e_skew),
            row.moments.k_skew,
            float_cell(row.density.e_rkl_shifted),
            float_cell(row.density.e_fkl_shifted),
            float_cell(row.density.ess_percent),
            float_cell(row.density.e_map),
            row.map_converged as u8,
            float_cell(rhat),
        ));
    }
    std::fs::write(out.join(DIAGNOSE_CSV), &csv)?;
    for row in &rows {
        println!(
            "diagnose {}: e_mean {:.2}%, e_cov {:.2}%, ESS {:.1}%, shifted rKL {:.4}",
            row.method,
            row.moments.e_mean,
            row.moments.e_cov,
            row.density.ess_percent,
            row.density.e_rkl_shifted
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Amortization
// ---------------------------------------------------------------------------

fn amortized_dir(j: usize) -> String {
    format!("transport_y{j}")
}

/// Trains one lazy map per archived observation against the single offline
/// surrogate and writes a per-observation report with the amortized
/// sample-cost ledger: offline samples are paid once and split across the
/// observations, while online training costs no model evaluations at all.
pub fn cmd_amortize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut outputs = Outputs::default();
    let result = amortize_inner(cfg, out, &mut outputs);
    if result.is_err() {
        outputs.clean();
    }
    result
}

fn amortize_inner(cfg: &RunConfig, out: &Path, outputs: &mut Outputs) -> Result<()> {
    let basis = stage("artifact loading", load_basis(out))?;
    let net = stage("artifact loading", load_surrogate(out))?;
    let obs = stage("artifact loading", load_observations(out))?;
    if net.d_r() != basis.d_r() {
        return Err(Error::config(format!(
            "latent dimension mismatch: basis has d_r = {}, surrogate expects {}",
            basis.d_r(),
            net.d_r()
        )));
    }
    let prior = stage("prior setup", cfg.build_prior())?;
    let pde = stage("model setup", cfg.build_model())?;
    let flow = cfg.flow();
    let schedule = cfg.transport_stages()?;
    let n_y = obs.ys.len();
    let sigma = obs.sigma2.sqrt();
    let exponent = cfg.weight_exponent();
    let n_eval = cfg.diagnostics.n_eval;

    let mut csv = String::from(AMORTIZE_COLUMNS);
    csv.push('\n');
    for (j, y) in obs.ys.iter().enumerate() {
        // Observation j trains from its own seed so maps are independent.
        let seed_j = cfg.transport_seed().wrapping_add(j as u64);
        let model = LazyMapModel::identity_init(basis.d_r(), &flow, seed_j)?;
        let objective = RklObjective::Surrogate { net: &net, whitened_obs: y / sigma };
        let (trained, report) = stage(
            "transport training",
            transport::train_lazy_map(model, &objective, &schedule, seed_j),
        )?;

        let mut archive = Archive::new("transport", seed_j, &cfg.digest())?;
        push_flow(&mut archive, &trained, &flow)?;
        push_trace(&mut archive, &report)?;
        stage("archive write", outputs.write(&archive, out.join(amortized_dir(j))))?;

        let mut rng = seed::substream_indexed(cfg.seed, stream::EVAL_SAMPLING, 100 + j as u64);
        let set = stage("pushforward evaluation",
            eval_flow(&trained, &basis, &prior, &pde, y, n_eval, &mut rng))?;
        let density = stage(
            "density diagnostics",
            diagnostics::density_report(&set.phi, &set.phi_t, exponent, f64::NAN),
        )?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            j,
            float_cell(report.best_loss),
            report.diverged as u8,
            set.phi.len(),
            float_cell(density.ess_percent),
            float_cell(density.e_rkl_shifted),
            float_cell(density.e_fkl_shifted),
            cfg.surrogate.n_train,
            float_cell(cfg.surrogate.n_train as f64 / n_y as f64),
            0,
        ));
        println!(
            "amortize y_{j}: best loss {:.6}, ESS {:.1}%",
            report.best_loss, density.ess_percent
        );
    }
    std::fs::write(out.join(AMORTIZE_CSV), &csv)?;
    println!(
        "amortize: {} offline samples shared by {n_y} observations ({} each)",
        cfg.surrogate.n_train,
        cfg.surrogate.n_train as f64 / n_y as f64
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    /// Linear 4×4 problem small enough for every command to run in a test.
    fn tiny_linear_config() -> RunConfig {
        RunConfig::from_toml_str(
            "\
seed = 5
[prior]
nx = 4
ny = 4
gamma = 0.5
delta = 1.0
[model]
mode = \"linear_test\"
d_y = 4
sigma2 = 0.05
[subspace]
d_r = 4
[surrogate]
objective = \"h1\"
hidden_layers = 0
width = 8
epochs = 120
batch_size = 16
lr_schedule = [{ epochs = 80, rate = 0.01 }, { epochs = 40, rate = 0.001 }]
n_train = 48
n_test = 16
[transport]
layers = 2
hidden_layers = 1
width = 16
stages = [{ iterations = 150, batch = 64, rate = 0.005 }]
[baselines.pcn]
n = 150
burn_in = 150
thin = 2
n_chains = 2
[baselines.lazymap]
stages = [{ iterations = 40, batch = 8, rate = 0.005 }]
[diagnostics]
n_eval = 400
k_skew = 4
",
        )
        .unwrap()
    }

    #[test]
    fn offline_writes_all_archives_and_is_deterministic() {
        let cfg = tiny_linear_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        cmd_offline(&cfg, d1.path(), 1).unwrap();
        cmd_offline(&cfg, d2.path(), 2).unwrap();
        for dir in [DATASET_DIR, BASIS_DIR, SURROGATE_DIR, OBSERVATIONS_DIR] {
            let m1 = std::fs::read(d1.path().join(dir).join("manifest.txt")).unwrap();
            let m2 = std::fs::read(d2.path().join(dir).join("manifest.txt")).unwrap();
            assert_eq!(m1, m2, "{dir} differs across runs/threads");
        }
        let basis = load_basis(d1.path()).unwrap();
        assert_eq!(basis.d_r(), 4);
        let net = load_surrogate(d1.path()).unwrap();
        assert_eq!(net.d_r(), 4);
        assert_eq!(net.d_y(), 4);
        let obs = load_observations(d1.path()).unwrap();
        assert_eq!(obs.ys.len(), 1);
        assert_eq!(obs.sigma2, 0.05);
    }

    #[test]
    fn online_trains_and_archives_a_reloadable_map() {
        let cfg = tiny_linear_config();
        let dir = tempfile::tempdir().unwrap();
        cmd_offline(&cfg, dir.path(), 1).unwrap();
        cmd_online(&cfg, dir.path()).unwrap();
        let archive = read_archive(dir.path(), TRANSPORT_DIR, "transport").unwrap();
        assert!(archive.scalar("best_loss").unwrap().is_finite());
        assert_eq!(archive.scalar("diverged").unwrap(), 0.0);
        let model = load_flow(dir.path(), TRANSPORT_DIR, "transport").unwrap();
        assert_eq!(model.d_r(), 4);
        // A trained map moved away from identity initialization.
        assert!(model.get_params().norm() > 1e-3);
    }

    #[test]
    fn online_without_offline_artifacts_is_a_config_error() {
        let cfg = tiny_linear_config();
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_online(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "unexpected error: {err}");
    }

    #[test]
    fn full_linear_pipeline_produces_consistent_diagnostics() {
        let cfg = tiny_linear_config();
        let dir = tempfile::tempdir().unwrap();
        cmd_offline(&cfg, dir.path(), 1).unwrap();
        cmd_online(&cfg, dir.path()).unwrap();
        cmd_laplace(&cfg, dir.path()).unwrap();
        cmd_lazymap(&cfg, dir.path()).unwrap();
        cmd_diagnose(&cfg, dir.path()).unwrap();

        let csv = std::fs::read_to_string(dir.path().join(DIAGNOSE_CSV)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), DIAGNOSE_COLUMNS);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("transport,"));
        assert!(rows[1].starts_with("lazymap,"));
        assert!(rows[2].starts_with("laplace,"));

        // Laplace is exact for the linear model: moment errors sit at the
        // Monte Carlo floor and the importance weights stay healthy.
        let laplace: Vec<&str> = rows[2].split(',').collect();
        let e_mean: f64 = laplace[6].parse().unwrap();
        let ess: f64 = laplace[12].parse().unwrap();
        let e_map: f64 = laplace[13].parse().unwrap();
        assert!(e_mean < 25.0, "laplace e_mean = {e_mean}");
        assert!(ess > 95.0, "laplace ESS = {ess}");
        assert_eq!(e_map, 0.0);
    }

    #[test]
    fn mcmc_gates_the_nonlinear_reference() {
        let mut cfg = tiny_linear_config();
        cfg.model.mode = ModeName::Nonlinear;
        cfg.baselines.pcn.n = 400;
        cfg.baselines.pcn.burn_in = 600;
        cfg.baselines.pcn.thin = 8;
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        cmd_offline(&cfg, dir.path(), 2).unwrap();
        cmd_mcmc(&cfg, dir.path()).unwrap();
        let archive = read_archive(dir.path(), MCMC_DIR, "mcmc").unwrap();
        let chains = archive.matrix_stack("samples").unwrap();
        assert_eq!(chains.len(), 2);
        assert_eq!(chains[0].ncols(), 400);

        cmd_laplace(&cfg, dir.path()).unwrap();
        cmd_diagnose(&cfg, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(DIAGNOSE_CSV)).unwrap();
        let row = csv.lines().nth(1).unwrap();
        assert!(row.starts_with("laplace,"));
        let rhat: f64 = row.split(',').last().unwrap().parse().unwrap();
        assert!(rhat.is_finite() && rhat < 1.05, "gate passed rhat {rhat}");
    }

    #[test]
    fn amortize_trains_one_map_per_observation() {
        let mut cfg = tiny_linear_config();
        cfg.model.n_observations = 2;
        cfg.diagnostics.n_eval = 200;
        let dir = tempfile::tempdir().unwrap();
        cmd_offline(&cfg, dir.path(), 1).unwrap();
        cmd_amortize(&cfg, dir.path()).unwrap();
        for j in 0..2 {
            let model = load_flow(dir.path(), &amortized_dir(j), "transport").unwrap();
            assert_eq!(model.d_r(), 4);
        }
        let csv = std::fs::read_to_string(dir.path().join(AMORTIZE_CSV)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), AMORTIZE_COLUMNS);
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2);
        // 48 offline samples shared by 2 observations.
        assert!(rows[0].ends_with(",48,24,0"), "row: {}", rows[0]);
    }

    #[test]
    fn prior_sample_writes_marginal_summaries() {
        let cfg = tiny_linear_config();
        let dir = tempfile::tempdir().unwrap();
        cmd_prior_sample(&cfg, dir.path()).unwrap();
        let archive = read_archive(dir.path(), PRIOR_SAMPLES_DIR, "prior_samples").unwrap();
        let samples = archive.matrix("samples").unwrap();
        assert_eq!(samples.ncols(), 64);
        assert_eq!(samples.nrows(), 25);
        let std = archive.vector("marginal_std").unwrap();
        assert!(std.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn failed_offline_stage_removes_partial_outputs() {
        let mut cfg = tiny_linear_config();
        // d_r larger than the training-sample count still works; an invalid
        // surrogate schedule is caught after the dataset archive is written.
        cfg.surrogate.lr_schedule.clear();
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_offline(&cfg, dir.path(), 1).unwrap_err();
        assert!(err.to_string().contains("surrogate training"), "err: {err}");
        assert!(!dir.path().join(DATASET_DIR).exists());
        assert!(!dir.path().join(BASIS_DIR).exists());
    }
}
