//! TOML run configuration: schema, validation, defaults, and conversion into
//! the per-module configuration types. Unknown keys are rejected so a typo
//! fails loudly instead of silently falling back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::PcnOptions;
use crate::diagnostics::WeightExponent;
use crate::error::{Error, Result};
use crate::forward::{interior_lattice, PdeConfig};
use crate::prior::{Anisotropy, GaussianPrior, Mesh};
use crate::surrogate::{Objective, TrainConfig};
use crate::transport::{FlowConfig, StageSchedule};

/// Full run configuration. Every field has a default tuned to the desk-scale
/// nonlinear problem (16×16 cells, 25 observations, σ² = 1.94e-3), so an
/// empty config file is a valid complete run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every random stream is a named substream of it.
    pub seed: u64,
    pub prior: PriorSection,
    pub model: ModelSection,
    pub subspace: SubspaceSection,
    pub surrogate: SurrogateSection,
    pub transport: TransportSection,
    pub baselines: BaselinesSection,
    pub diagnostics: DiagnosticsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            prior: PriorSection::default(),
            model: ModelSection::default(),
            subspace: SubspaceSection::default(),
            surrogate: SurrogateSection::default(),
            transport: TransportSection::default(),
            baselines: BaselinesSection::default(),
            diagnostics: DiagnosticsSection::default(),
        }
    }
}

/// Gaussian field prior: cells per side and the differential operator
/// K = γ ∇·A∇ + δ.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub nx: usize,
    pub ny: usize,
    pub gamma: f64,
    pub delta: f64,
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection { nx: 16, ny: 16, gamma: 0.03, delta: 3.33, a11: 1.0, a12: 0.0, a22: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    /// Reaction–diffusion PDE observable.
    Nonlinear,
    /// Pointwise observation of the parameter itself; conjugate, used by the
    /// closed-form oracles.
    LinearTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsLayoutName {
    /// Uniform k×k interior lattice with nearest-node snapping; requires
    /// d_y = k².
    Lattice,
    /// Node indices listed in `obs_indices`.
    Explicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub mode: ModeName,
    pub d_y: usize,
    pub sigma2: f64,
    pub obs_layout: ObsLayoutName,
    pub obs_indices: Option<Vec<usize>>,
    /// How many synthetic observations the offline phase generates.
    pub n_observations: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            mode: ModeName::Nonlinear,
            d_y: 25,
            sigma2: 1.94e-3,
            obs_layout: ObsLayoutName::Lattice,
            obs_indices: None,
            n_observations: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceSection {
    pub d_r: usize,
    /// Training samples used for the averaged Gauss–Newton Hessian; all of
    /// them when absent.
    pub n_basis_samples: Option<usize>,
}

impl Default for SubspaceSection {
    fn default() -> Self {
        SubspaceSection { d_r: 16, n_basis_samples: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveName {
    L2,
    H1,
}

/// One span of a piecewise-constant learning-rate schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSpan {
    pub epochs: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub objective: ObjectiveName,
    pub hidden_layers: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Spans must sum to `epochs`.
    pub lr_schedule: Vec<LrSpan>,
    pub n_train: usize,
    pub n_test: usize,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection {
            objective: ObjectiveName::H1,
            hidden_layers: 3,
            width: 64,
            epochs: 500,
            batch_size: 32,
            lr_schedule: vec![LrSpan { epochs: 375, rate: 1e-3 }, LrSpan { epochs: 125, rate: 3e-4 }],
            n_train: 256,
            n_test: 512,
            seed: None,
        }
    }
}

/// One stage of transport training: iteration count, latent batch size,
/// Adamax step size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub iterations: usize,
    pub batch: usize,
    pub rate: f64,
}

fn stage_specs(stages: &[StageSpec]) -> Result<StageSchedule> {
    StageSchedule::new(stages.iter().map(|s| (s.iterations, s.batch, s.rate)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    pub layers: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub stages: Vec<StageSpec>,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
}

impl Default for TransportSection {
    fn default() -> Self {
        let desk = StageSchedule::desk_default();
        TransportSection {
            layers: 8,
            hidden_layers: 2,
            width: 64,
            stages: desk
                .stages
                .iter()
                .map(|s| StageSpec { iterations: s.iterations, batch: s.batch_size, rate: s.learning_rate })
                .collect(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcnSection {
    pub n: usize,
    pub beta: f64,
    pub burn_in: usize,
    pub thin: usize,
    pub auto_tune: bool,
    /// Independent chains; the split-R̂ convergence check pools them.
    pub n_chains: usize,
}

impl Default for PcnSection {
    fn default() -> Self {
        PcnSection { n: 5000, beta: 0.2, burn_in: 2000, thin: 10, auto_tune: true, n_chains: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaplaceSection {
    /// Retained eigenpair count; spectral cutoff λ_j > 1e-6 λ₁ when absent.
    pub d_la: Option<usize>,
}

impl Default for LaplaceSection {
    fn default() -> Self {
        LaplaceSection { d_la: None }
    }
}

/// Transport trained against the true model instead of the surrogate; every
/// batch element costs a PDE solve, so the default schedule is small.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LazymapSection {
    pub stages: Vec<StageSpec>,
}

impl Default for LazymapSection {
    fn default() -> Self {
        let model = StageSchedule::model_default();
        LazymapSection {
            stages: model
                .stages
                .iter()
                .map(|s| StageSpec { iterations: s.iterations, batch: s.batch_size, rate: s.learning_rate })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesSection {
    pub pcn: PcnSection,
    pub laplace: LaplaceSection,
    pub lazymap: LazymapSection,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        BaselinesSection {
            pcn: PcnSection::default(),
            laplace: LaplaceSection::default(),
            lazymap: LazymapSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightExponentName {
    Single,
    Doubled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    /// Pushforward sample count for expectations.
    pub n_eval: usize,
    /// Leading latent coordinates for the skewness tensor; clamped to d_r.
    pub k_skew: usize,
    pub weight_exponent: WeightExponentName,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection { n_eval: 50_000, k_skew: 10, weight_exponent: WeightExponentName::Single }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads from a file (defaults when absent) and applies a seed override.
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_toml_str(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the effective configuration; archives record it so artifacts
    /// from different configs never silently mix.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        crate::archive::sha256_hex(text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.prior;
        if p.nx < 2 || p.ny < 2 {
            return Err(Error::config("prior mesh needs at least 2 cells per side"));
        }
        if !(p.gamma >= 0.0 && p.gamma.is_finite()) || !(p.delta > 0.0 && p.delta.is_finite()) {
            return Err(Error::config("prior needs gamma >= 0 and delta > 0"));
        }
        if p.a11 <= 0.0 || p.a11 * p.a22 - p.a12 * p.a12 <= 0.0 {
            return Err(Error::config("prior anisotropy must be positive definite"));
        }
        let nodes = (p.nx + 1) * (p.ny + 1);

        let m = &self.model;
        if !(m.sigma2 > 0.0 && m.sigma2.is_finite()) {
            return Err(Error::config("model.sigma2 must be positive"));
        }
        if m.d_y == 0 {
            return Err(Error::config("model.d_y must be positive"));
        }
        if m.n_observations == 0 {
            return Err(Error::config("model.n_observations must be positive"));
        }
        match m.obs_layout {
            ObsLayoutName::Lattice => {
                if m.obs_indices.is_some() {
                    return Err(Error::config(
                        "model.obs_indices is only valid with obs_layout = \"explicit\"",
                    ));
                }
                let k = (m.d_y as f64).sqrt().round() as usize;
                if k * k != m.d_y {
                    return Err(Error::config("lattice layout needs a square model.d_y"));
                }
            }
            ObsLayoutName::Explicit => {
                let idx = m
                    .obs_indices
                    .as_ref()
                    .ok_or_else(|| Error::config("explicit layout needs model.obs_indices"))?;
                if idx.len() != m.d_y {
                    return Err(Error::config(format!(
                        "model.obs_indices has {} entries but d_y = {}",
                        idx.len(),
                        m.d_y
                    )));
                }
                if idx.iter().any(|i| *i >= nodes) {
                    return Err(Error::config("model.obs_indices out of mesh range"));
                }
            }
        }

        let s = &self.subspace;
        if s.d_r == 0 || s.d_r > nodes {
            return Err(Error::config("subspace.d_r must be in 1..=node count"));
        }
        if let Some(nb) = s.n_basis_samples {
            if nb == 0 || nb > self.surrogate.n_train {
                return Err(Error::config(
                    "subspace.n_basis_samples must be in 1..=surrogate.n_train",
                ));
            }
        }

        let sg = &self.surrogate;
        if sg.n_train == 0 {
            return Err(Error::config("surrogate.n_train must be positive"));
        }
        if sg.batch_size == 0 || sg.width == 0 {
            return Err(Error::config("surrogate.batch_size and width must be positive"));
        }
        let span_sum: usize = sg.lr_schedule.iter().map(|s| s.epochs).sum();
        if span_sum != sg.epochs {
            return Err(Error::config(format!(
                "surrogate.lr_schedule spans sum to {span_sum}, not epochs = {}",
                sg.epochs
            )));
        }
        if sg.lr_schedule.iter().any(|s| !(s.rate > 0.0 && s.rate.is_finite())) {
            return Err(Error::config("surrogate learning rates must be positive"));
        }

        let t = &self.transport;
        if t.layers == 0 || t.width == 0 {
            return Err(Error::config("transport.layers and width must be positive"));
        }
        stage_specs(&t.stages)?;
        stage_specs(&self.baselines.lazymap.stages)?;

        let pcn = &self.baselines.pcn;
        if !(pcn.beta > 0.0 && pcn.beta < 1.0) {
            return Err(Error::config("pcn.beta must lie strictly inside (0, 1)"));
        }
        if pcn.thin == 0 || pcn.n == 0 || pcn.n_chains == 0 {
            return Err(Error::config("pcn.n, pcn.thin, and pcn.n_chains must be positive"));
        }
        if let Some(d_la) = self.baselines.laplace.d_la {
            if d_la > nodes {
                return Err(Error::config("laplace.d_la exceeds the node count"));
            }
        }

        let d = &self.diagnostics;
        if d.n_eval < 10 {
            return Err(Error::config("diagnostics.n_eval must be at least 10"));
        }
        if d.k_skew == 0 {
            return Err(Error::config("diagnostics.k_skew must be positive"));
        }
        Ok(())
    }

    pub fn build_prior(&self) -> Result<GaussianPrior> {
        let p = &self.prior;
        let mesh = Mesh::new(p.nx, p.ny)?;
        let a = Anisotropy { a11: p.a11, a12: p.a12, a22: p.a22 };
        GaussianPrior::build(mesh, p.gamma, p.delta, a)
    }

    pub fn build_model(&self) -> Result<PdeConfig> {
        let mesh = Mesh::new(self.prior.nx, self.prior.ny)?;
        let m = &self.model;
        let points = match m.obs_layout {
            ObsLayoutName::Lattice => {
                let k = (m.d_y as f64).sqrt().round() as usize;
                interior_lattice(&mesh, k)?
            }
            ObsLayoutName::Explicit => m.obs_indices.clone().unwrap_or_default(),
        };
        match m.mode {
            ModeName::Nonlinear => PdeConfig::nonlinear(mesh, points, m.sigma2),
            ModeName::LinearTest => PdeConfig::linear_from_selector(mesh, points, m.sigma2),
        }
    }

    pub fn surrogate_seed(&self) -> u64 {
        self.surrogate.seed.unwrap_or(self.seed)
    }

    pub fn transport_seed(&self) -> u64 {
        self.transport.seed.unwrap_or(self.seed)
    }

    pub fn surrogate_train(&self) -> TrainConfig {
        let sg = &self.surrogate;
        TrainConfig {
            objective: match sg.objective {
                ObjectiveName::L2 => Objective::L2,
                ObjectiveName::H1 => Objective::H1,
            },
            hidden_layers: sg.hidden_layers,
            width: sg.width,
            epochs: sg.epochs,
            batch_size: sg.batch_size,
            lr_schedule: sg.lr_schedule.iter().map(|s| (s.epochs, s.rate)).collect(),
            seed: self.surrogate_seed(),
        }
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            n_layers: self.transport.layers,
            hidden_layers: self.transport.hidden_layers,
            width: self.transport.width,
        }
    }

    pub fn transport_stages(&self) -> Result<StageSchedule> {
        stage_specs(&self.transport.stages)
    }

    pub fn lazymap_stages(&self) -> Result<StageSchedule> {
        stage_specs(&self.baselines.lazymap.stages)
    }

    pub fn pcn_options(&self) -> PcnOptions {
        let p = &self.baselines.pcn;
        PcnOptions { n: p.n, beta: p.beta, burn_in: p.burn_in, thin: p.thin, auto_tune: p.auto_tune }
    }

    pub fn weight_exponent(&self) -> WeightExponent {
        match self.diagnostics.weight_exponent {
            WeightExponentName::Single => WeightExponent::Single,
            WeightExponentName::Doubled => WeightExponent::Doubled,
        }
    }

    /// Skewness coordinate count, clamped to the basis rank.
    pub fn k_skew_effective(&self) -> usize {
        self.diagnostics.k_skew.min(self.subspace.d_r)
    }
}
