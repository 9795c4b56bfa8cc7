//! Lazy transport map in reduced coordinates: a stack of masked affine
//! autoregressive layers trained by reverse-KL minimization against either
//! the surrogate likelihood or the true forward model.
//!
//! Each layer conjugates an affine autoregressive update with a fixed
//! permutation, x = P⁻¹(AR(P z)), so an identity-initialized stack maps
//! z to itself exactly. Log-scales are clamped, which keeps every layer a
//! strictly increasing triangular map with positive Jacobian determinant.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::forward::{self, PdeConfig};
use crate::prior::{Field, GaussianPrior};
use crate::seed::{self, stream};
use crate::subspace::{self, ReducedBasis};
use crate::surrogate::{MlpSurrogate, gelu, gelu_prime};

/// Log-scales are clamped to ±7; outside the band the gradient is zero.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

/// One flow layer: permutation plus a masked conditioner MLP emitting a
/// shift μ_j and log-scale s_j for every coordinate, each depending only on
/// permuted coordinates strictly before j.
#[derive(Debug, Clone)]
pub struct IafLayer {
    /// Permuted input: w_i = z[permutation[i]].
    pub permutation: Vec<usize>,
    /// Conditioner weights; the last layer emits [μ; s] stacked (2d rows).
    /// Stored pre-masked: entries outside the autoregressive pattern are 0.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    /// 0/1 masks, same shapes as `weights`.
    pub masks: Vec<DMatrix<f64>>,
}

/// MADE-style degree masks for a conditioner with the given hidden widths.
/// Input degree i+1; hidden degrees cycle through 1..max(1,d−1); the output
/// rows for coordinate j (both μ_j and s_j) connect strictly below degree
/// j+1, which for d = 1 leaves the conditioner with biases only.
fn made_masks(d: usize, hidden: &[usize]) -> Vec<DMatrix<f64>> {
    let in_deg: Vec<usize> = (1..=d).collect();
    let cycle = d.saturating_sub(1).max(1);
    let hid_deg: Vec<Vec<usize>> =
        hidden.iter().map(|&h| (0..h).map(|k| (k % cycle) + 1).collect()).collect();
    let mut masks = Vec::with_capacity(hidden.len() + 1);
    let mut prev = in_deg.clone();
    for deg in &hid_deg {
        masks.push(DMatrix::from_fn(deg.len(), prev.len(), |r, c| {
            if deg[r] >= prev[c] { 1.0 } else { 0.0 }
        }));
        prev = deg.clone();
    }
    masks.push(DMatrix::from_fn(2 * d, prev.len(), |r, c| {
        let out_deg = (r % d) + 1;
        if out_deg > prev[c] { 1.0 } else { 0.0 }
    }));
    masks
}

impl IafLayer {
    /// Identity-initialized layer: hidden conditioner weights drawn from the
    /// scaled-uniform fan-in rule (then masked), final layer zero so that
    /// μ = 0 and s = 0.
    pub fn identity_init(
        d: usize,
        hidden: &[usize],
        permutation: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::config("flow dimension must be positive"));
        }
        if permutation.len() != d {
            return Err(Error::config("permutation length must equal the flow dimension"));
        }
        let mut seen = vec![false; d];
        for &p in &permutation {
            if p >= d || seen[p] {
                return Err(Error::config("invalid permutation"));
            }
            seen[p] = true;
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("conditioner widths must be positive"));
        }
        let masks = made_masks(d, hidden);
        let n = masks.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for (l, mask) in masks.iter().enumerate() {
            let mut w = DMatrix::zeros(mask.nrows(), mask.ncols());
            if l + 1 < n {
                let bound = 1.0 / (mask.ncols() as f64).sqrt();
                for v in w.iter_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
                w.component_mul_assign(mask);
            }
            weights.push(w);
            biases.push(DVector::zeros(mask.nrows()));
        }
        Ok(IafLayer { permutation, weights, biases, masks })
    }

    pub fn d(&self) -> usize {
        self.permutation.len()
    }

    /// Conditioner outputs (μ, raw log-scale) for a single permuted input.
    pub fn conditioner(&self, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let last = self.weights.len() - 1;
        let mut a = w.clone();
        for l in 0..last {
            let mut s = &self.weights[l] * &a + &self.biases[l];
            s.apply(|v| *v = gelu(*v));
            a = s;
        }
        let out = &self.weights[last] * &a + &self.biases[last];
        let d = self.d();
        (out.rows(0, d).into_owned(), out.rows(d, d).into_owned())
    }
}

/// Per-layer forward caches kept for the backward pass.
struct LayerCache {
    /// acts[0] is the permuted input; acts[l] the l-th hidden activation.
    acts: Vec<DMatrix<f64>>,
    /// Hidden pre-activations.
    pres: Vec<DMatrix<f64>>,
    s_raw: DMatrix<f64>,
    exp_s: DMatrix<f64>,
}

fn layer_forward(layer: &IafLayer, z: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, LayerCache) {
    let d = layer.d();
    let b = z.ncols();
    let mut w = DMatrix::zeros(d, b);
    for i in 0..d {
        w.row_mut(i).copy_from(&z.row(layer.permutation[i]));
    }
    let last = layer.weights.len() - 1;
    let mut acts = Vec::with_capacity(last + 1);
    let mut pres = Vec::with_capacity(last);
    acts.push(w);
    for l in 0..last {
        let mut s = &layer.weights[l] * &acts[l];
        for mut col in s.column_iter_mut() {
            col += &layer.biases[l];
        }
        acts.push(s.map(gelu));
        pres.push(s);
    }
    let mut out = &layer.weights[last] * &acts[last];
    for mut col in out.column_iter_mut() {
        col += &layer.biases[last];
    }
    let s_raw = out.rows(d, d).into_owned();
    let s_clamped = s_raw.map(|v| v.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP));
    let exp_s = s_clamped.map(f64::exp);
    let xp = out.rows(0, d).into_owned() + exp_s.component_mul(&acts[0]);
    let logdet = s_clamped.row_sum().transpose();
    let mut x = DMatrix::zeros(d, b);
    for i in 0..d {
        x.row_mut(layer.permutation[i]).copy_from(&xp.row(i));
    }
    (x, logdet, LayerCache { acts, pres, s_raw, exp_s })
}

/// Gradient storage mirroring one layer's conditioner.
struct LayerGrad {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

/// Reverse pass through one layer. `x_bar` is the adjoint of the layer
/// output; `ld_bar[b]` is the adjoint of sample b's log-determinant
/// contribution. Returns the adjoint of the layer input.
fn layer_backward(
    layer: &IafLayer,
    cache: &LayerCache,
    x_bar: &DMatrix<f64>,
    ld_bar: &DVector<f64>,
    grad: &mut LayerGrad,
) -> DMatrix<f64> {
    let d = layer.d();
    let b = x_bar.ncols();
    let mut xp_bar = DMatrix::zeros(d, b);
    for i in 0..d {
        xp_bar.row_mut(i).copy_from(&x_bar.row(layer.permutation[i]));
    }

    // s̄ collects both the scale path x'σ = e^s·w and the logdet path, then
    // dies where the clamp is active.
    let w_in = &cache.acts[0];
    let mut s_bar = xp_bar.component_mul(&cache.exp_s).component_mul(w_in);
    for (c, mut col) in s_bar.column_iter_mut().enumerate() {
        col.add_scalar_mut(ld_bar[c]);
    }
    s_bar.zip_apply(&cache.s_raw, |v, raw| {
        if raw.abs() >= LOG_SCALE_CLAMP {
            *v = 0.0;
        }
    });
    let w_bar_direct = xp_bar.component_mul(&cache.exp_s);

    // Conditioner backward with stacked output adjoint [μ̄; s̄].
    let last = layer.weights.len() - 1;
    let mut out_bar = DMatrix::zeros(2 * d, b);
    out_bar.rows_mut(0, d).copy_from(&xp_bar);
    out_bar.rows_mut(d, d).copy_from(&s_bar);

    let mut gw = &out_bar * cache.acts[last].transpose();
    gw.component_mul_assign(&layer.masks[last]);
    grad.w[last] += gw;
    grad.b[last] += out_bar.column_sum();
    let mut a_bar = layer.weights[last].transpose() * out_bar;

    for l in (0..last).rev() {
        a_bar.zip_apply(&cache.pres[l], |v, s| *v *= gelu_prime(s));
        let mut gw = &a_bar * cache.acts[l].transpose();
        gw.component_mul_assign(&layer.masks[l]);
        grad.w[l] += gw;
        grad.b[l] += a_bar.column_sum();
        a_bar = layer.weights[l].transpose() * a_bar;
    }

    let w_bar = w_bar_direct + a_bar;
    let mut z_bar = DMatrix::zeros(d, b);
    for i in 0..d {
        z_bar.row_mut(layer.permutation[i]).copy_from(&w_bar.row(i));
    }
    z_bar
}

/// Flow architecture.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub hidden_layers: usize,
    pub width: usize,
}

impl FlowConfig {
    /// Desk-scale default: 8 layers, conditioners with 2 hidden layers of 64.
    pub fn desk_default() -> Self {
        FlowConfig { n_layers: 8, hidden_layers: 2, width: 64 }
    }
}

/// The trainable lazy map 𝒯 : ℝ^{d_r} → ℝ^{d_r}.
#[derive(Debug, Clone)]
pub struct LazyMapModel {
    pub layers: Vec<IafLayer>,
}

impl LazyMapModel {
    /// Identity-initialized stack; per-layer permutations are drawn once
    /// from the seed and stored with the model.
    pub fn identity_init(d_r: usize, cfg: &FlowConfig, global_seed: u64) -> Result<Self> {
        if cfg.n_layers == 0 {
            return Err(Error::config("flow needs at least one layer"));
        }
        if cfg.hidden_layers > 0 && cfg.width == 0 {
            return Err(Error::config("conditioner width must be positive"));
        }
        let hidden = vec![cfg.width; cfg.hidden_layers];
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut perm: Vec<usize> = (0..d_r).collect();
            perm.shuffle(&mut seed::substream_indexed(global_seed, stream::FLOW_PERM, l as u64));
            let mut rng = seed::substream_indexed(global_seed, stream::FLOW_INIT, l as u64);
            layers.push(IafLayer::identity_init(d_r, &hidden, perm, &mut rng)?);
        }
        Ok(LazyMapModel { layers })
    }

    pub fn d_r(&self) -> usize {
        self.layers[0].d()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|w| w.len()).sum::<usize>()
                    + l.biases.iter().map(|b| b.len()).sum::<usize>()
            })
            .sum()
    }

    /// Concatenated trainable weights, layer by layer.
    pub fn get_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for (w, b) in layer.weights.iter().zip(&layer.biases) {
                out.extend(w.iter());
                out.extend(b.iter());
            }
        }
        DVector::from_vec(out)
    }

    /// Writes a parameter vector back, re-applying the autoregressive masks
    /// so components on masked positions are ignored.
    pub fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::config("parameter vector length mismatch"));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            for (w, b) in layer.weights.iter_mut().zip(layer.biases.iter_mut()) {
                for v in w.iter_mut() {
                    *v = theta[at];
                    at += 1;
                }
                for v in b.iter_mut() {
                    *v = theta[at];
                    at += 1;
                }
            }
            for (w, m) in layer.weights.iter_mut().zip(&layer.masks) {
                w.component_mul_assign(m);
            }
        }
        Ok(())
    }

    fn forward_cached(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, Vec<LayerCache>) {
        let mut x = z.clone();
        let mut logdet = DVector::zeros(z.ncols());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (xn, ld, cache) = layer_forward(layer, &x);
            x = xn;
            logdet += ld;
            caches.push(cache);
        }
        (x, logdet, caches)
    }

    fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| LayerGrad {
                w: l.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
                b: l.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            })
            .collect()
    }

    /// Backward through the whole stack; returns the flat θ-gradient.
    fn backward(
        &self,
        caches: &[LayerCache],
        mut x_bar: DMatrix<f64>,
        ld_bar: &DVector<f64>,
    ) -> DVector<f64> {
        let mut grads: Vec<LayerGrad> = self.zero_grads();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            x_bar = layer_backward(layer, &caches[i], &x_bar, ld_bar, &mut grads[i]);
        }
        let mut out = Vec::with_capacity(self.param_count());
        for g in &grads {
            for (w, b) in g.w.iter().zip(&g.b) {
                out.extend(w.iter());
                out.extend(b.iter());
            }
        }
        DVector::from_vec(out)
    }
}

/// Applies the map to one latent point: (𝒯(z), log det ∇𝒯(z)).
pub fn iaf_forward(model: &LazyMapModel, z: &DVector<f64>) -> (DVector<f64>, f64) {
    let zm = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
    let (x, ld) = iaf_forward_batch(model, &zm);
    (x.column(0).into_owned(), ld[0])
}

/// Batched map application; column b of the result is 𝒯 of column b.
pub fn iaf_forward_batch(model: &LazyMapModel, z: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (x, ld, _) = model.forward_cached(z);
    (x, ld)
}

/// Pushforward log-density at 𝒯(z) as a function of the source point,
/// −½‖z‖² − log det ∇𝒯(z) up to the Gaussian constant, with its z-gradient.
/// Drives the pushforward mode search.
pub fn source_log_density_and_grad(model: &LazyMapModel, z: &DVector<f64>) -> (f64, DVector<f64>) {
    let d = z.len();
    let zm = DMatrix::from_column_slice(d, 1, z.as_slice());
    let (_, ld, caches) = model.forward_cached(&zm);
    let mut grads = model.zero_grads();
    let mut x_bar = DMatrix::zeros(d, 1);
    let ld_bar = DVector::from_element(1, 1.0);
    for (i, layer) in model.layers.iter().enumerate().rev() {
        x_bar = layer_backward(layer, &caches[i], &x_bar, &ld_bar, &mut grads[i]);
    }
    let ld_grad = x_bar.column(0).into_owned();
    (-0.5 * z.norm_squared() - ld[0], -z - ld_grad)
}

/// What the reverse-KL objective evaluates the pushed samples against.
pub enum RklObjective<'a> {
    /// ½‖g_w(𝒯(z)) − ŷ‖² with a frozen surrogate and whitened data ŷ.
    Surrogate { net: &'a MlpSurrogate, whitened_obs: DVector<f64> },
    /// Φ(D𝒯(z)) with the true forward model and zero complement fill.
    Model { cfg: &'a PdeConfig, basis: &'a ReducedBasis, observation: DVector<f64> },
}

/// One objective evaluation over a latent batch.
pub struct RklEval {
    pub loss: f64,
    pub grad: DVector<f64>,
    /// Batch elements dropped because the forward model failed on them.
    pub dropped: usize,
}

/// Batch-mean single-sample reverse-KL estimate and its exact θ-gradient:
/// mean over z of misfit(𝒯(z)) + ½‖𝒯(z)‖² − logdet(z).
pub fn rkl_loss_and_grad(
    model: &LazyMapModel,
    objective: &RklObjective,
    z: &DMatrix<f64>,
) -> Result<RklEval> {
    let b = z.ncols();
    if b == 0 {
        return Err(Error::config("empty latent batch"));
    }
    let d = model.d_r();
    if z.nrows() != d {
        return Err(Error::config("latent batch dimension mismatch"));
    }
    let (x, logdet, caches) = model.forward_cached(z);

    // Per-column misfit values, input-gradient columns, and sample weights.
    // Weights are uniform 1/B for the surrogate objective; with the true
    // model, failed elements get weight 0 and the rest renormalize to 1/kept.
    let (misfits, mut x_bar, weights, dropped) = match objective {
        RklObjective::Surrogate { net, whitened_obs } => {
            if net.d_r() != d {
                return Err(Error::config("surrogate latent dimension mismatch"));
            }
            if whitened_obs.len() != net.d_y() {
                return Err(Error::config("whitened observation length mismatch"));
            }
            let mut resid = net.forward_matrix(&x);
            for mut col in resid.column_iter_mut() {
                col -= whitened_obs;
            }
            let misfits: Vec<f64> =
                resid.column_iter().map(|c| 0.5 * c.norm_squared()).collect();
            let x_bar = net.vjp_matrix(&x, &resid);
            (misfits, x_bar, vec![1.0 / b as f64; b], 0)
        }
        RklObjective::Model { cfg, basis, observation } => {
            if basis.d_r() != d {
                return Err(Error::config("basis latent dimension mismatch"));
            }
            let mut x_bar = DMatrix::zeros(d, b);
            let mut misfits = vec![0.0; b];
            let mut weights = vec![0.0; b];
            let mut kept = 0usize;
            for c in 0..b {
                let xc = x.column(c).into_owned();
                let m = subspace::lift_zero(basis, &xc);
                match forward::potential_and_gradient(cfg, observation, &m) {
                    Ok((phi, grad_m)) => {
                        misfits[c] = phi;
                        x_bar.set_column(c, &basis.decoder.tr_mul(&grad_m));
                        weights[c] = 1.0;
                        kept += 1;
                    }
                    Err(Error::Numerical(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if kept == 0 {
                return Err(Error::numerical("forward model failed on every batch element"));
            }
            let inv = 1.0 / kept as f64;
            for w in &mut weights {
                *w *= inv;
            }
            (misfits, x_bar, weights, b - kept)
        }
    };

    let mut loss = 0.0;
    let mut ld_bar = DVector::zeros(b);
    for c in 0..b {
        let wc = weights[c];
        if wc > 0.0 {
            loss += wc * (misfits[c] + 0.5 * x.column(c).norm_squared() - logdet[c]);
            ld_bar[c] = -wc;
        }
        let mut col = x_bar.column_mut(c);
        col += x.column(c);
        col *= wc;
    }
    if !loss.is_finite() {
        return Err(Error::numerical("transport step diverged"));
    }
    let grad = model.backward(&caches, x_bar, &ld_bar);
    Ok(RklEval { loss, grad, dropped })
}

/// Reverse-KL loss/gradient against a frozen surrogate.
pub fn rkl_loss_and_grad_surrogate(
    model: &LazyMapModel,
    net: &MlpSurrogate,
    whitened_obs: &DVector<f64>,
    z_batch: &[DVector<f64>],
) -> Result<(f64, DVector<f64>)> {
    let z = columns_to_matrix(model.d_r(), z_batch)?;
    let eval = rkl_loss_and_grad(
        model,
        &RklObjective::Surrogate { net, whitened_obs: whitened_obs.clone() },
        &z,
    )?;
    Ok((eval.loss, eval.grad))
}

/// Reverse-KL loss/gradient against the true forward model (zero fill).
/// Also reports how many batch elements were dropped to solver failures.
pub fn rkl_loss_and_grad_model(
    model: &LazyMapModel,
    cfg: &PdeConfig,
    basis: &ReducedBasis,
    observation: &DVector<f64>,
    z_batch: &[DVector<f64>],
) -> Result<(f64, DVector<f64>, usize)> {
    let z = columns_to_matrix(model.d_r(), z_batch)?;
    let eval = rkl_loss_and_grad(
        model,
        &RklObjective::Model { cfg, basis, observation: observation.clone() },
        &z,
    )?;
    Ok((eval.loss, eval.grad, eval.dropped))
}

fn columns_to_matrix(d: usize, cols: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if cols.is_empty() {
        return Err(Error::config("empty latent batch"));
    }
    if cols.iter().any(|c| c.len() != d) {
        return Err(Error::config("latent batch dimension mismatch"));
    }
    let mut z = DMatrix::zeros(d, cols.len());
    for (i, c) in cols.iter().enumerate() {
        z.set_column(i, c);
    }
    Ok(z)
}

/// One optimization stage: iterations at a fixed batch size and rate.
#[derive(Debug, Clone, Copy)]
pub struct Stage {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

impl StageSchedule {
    pub fn new(stages: Vec<(usize, usize, f64)>) -> Result<Self> {
        let stages: Vec<Stage> = stages
            .into_iter()
            .map(|(iterations, batch_size, learning_rate)| Stage {
                iterations,
                batch_size,
                learning_rate,
            })
            .collect();
        for s in &stages {
            if s.batch_size == 0 || s.learning_rate <= 0.0 {
                return Err(Error::config("stage batch sizes and rates must be positive"));
            }
        }
        Ok(StageSchedule { stages })
    }

    /// Desk-scale default for surrogate-driven training.
    pub fn desk_default() -> Self {
        Self::new(vec![(2000, 128, 5e-3), (1000, 512, 5e-3), (500, 2048, 5e-4)]).unwrap()
    }

    /// Small default for training against the true model, where every batch
    /// element costs a nonlinear solve.
    pub fn model_default() -> Self {
        Self::new(vec![(150, 8, 5e-3), (75, 32, 1e-3)]).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub iteration: usize,
    pub stage: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<TraceEntry>,
    pub diverged: bool,
    pub best_loss: f64,
    pub dropped_samples: usize,
}

struct Adamax {
    m: DVector<f64>,
    u: DVector<f64>,
    t: i32,
}

impl Adamax {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adamax { m: DVector::zeros(n), u: DVector::zeros(n), t: 0 }
    }

    fn step(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>, rate: f64) {
        self.t += 1;
        let bc = 1.0 - Self::BETA1.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.u[i] = (Self::BETA2 * self.u[i]).max(g.abs());
            theta[i] -= rate / bc * self.m[i] / (self.u[i] + Self::EPS);
        }
    }
}

/// Staged Adamax training. Each iteration draws a fresh reference batch from
/// the seed substream, so the run is deterministic. Optimizer moments reset
/// at stage boundaries. Two consecutive non-finite losses abort training and
/// the best parameters seen so far are restored.
pub fn train_lazy_map(
    mut model: LazyMapModel,
    objective: &RklObjective,
    schedule: &StageSchedule,
    global_seed: u64,
) -> Result<(LazyMapModel, TrainReport)> {
    let d = model.d_r();
    let mut theta = model.get_params();
    let mut best_loss = f64::INFINITY;
    let mut best_theta: Option<DVector<f64>> = None;
    let mut trace = Vec::new();
    let mut diverged = false;
    let mut dropped_total = 0usize;
    let mut global_iter = 0usize;

    'stages: for (stage_idx, stage) in schedule.stages.iter().enumerate() {
        let mut opt = Adamax::new(theta.len());
        let mut consecutive_bad = 0usize;
        for _ in 0..stage.iterations {
            let mut rng = seed::substream_indexed(
                global_seed,
                stream::TRANSPORT_BATCH,
                global_iter as u64,
            );
            let z = DMatrix::from_fn(d, stage.batch_size, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            model.set_params(&theta)?;
            let step = rkl_loss_and_grad(&model, objective, &z);
            let (loss, ok) = match &step {
                Ok(eval) if eval.grad.iter().all(|v| v.is_finite()) => (eval.loss, true),
                Ok(eval) => (eval.loss, false),
                Err(Error::Numerical(_)) => (f64::NAN, false),
                Err(_) => {
                    return Err(step.err().unwrap());
                }
            };
            trace.push(TraceEntry { iteration: global_iter, stage: stage_idx, loss });
            global_iter += 1;
            if ok {
                let eval = step.unwrap();
                consecutive_bad = 0;
                dropped_total += eval.dropped;
                if eval.loss < best_loss {
                    best_loss = eval.loss;
                    best_theta = Some(theta.clone());
                }
                opt.step(&mut theta, &eval.grad, stage.learning_rate);
            } else {
                consecutive_bad += 1;
                if consecutive_bad >= 2 {
                    diverged = true;
                    break 'stages;
                }
            }
        }
    }

    if diverged {
        if let Some(best) = best_theta {
            theta = best;
        }
    }
    model.set_params(&theta)?;
    Ok((model, TrainReport { trace, diverged, best_loss, dropped_samples: dropped_total }))
}

/// How pushed latent samples are completed to full fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    /// Fresh prior draw in the complement of the subspace.
    PriorComplement,
    /// Zero complement: m = D 𝒯(z).
    Zero,
}

/// Draws z ~ N(0, I), pushes through the map, and lifts to full fields.
pub fn push_samples(
    model: &LazyMapModel,
    basis: &ReducedBasis,
    prior: &GaussianPrior,
    n: usize,
    rng: &mut impl Rng,
    fill: Fill,
) -> Vec<Field> {
    let d = model.d_r();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (x, _) = iaf_forward(model, &z);
        let m = match fill {
            Fill::Zero => subspace::lift_zero(basis, &x),
            Fill::PriorComplement => subspace::lift(basis, prior, &x, rng),
        };
        out.push(m);
    }
    out
}

/// Where the pushforward density ratio is requested.
pub enum MapPoint<'a> {
    /// A latent source point z; the ratio is evaluated at its image 𝒯(z).
    Source(&'a DVector<f64>),
    /// An arbitrary latent point, which would require inverting the map.
    Arbitrary(&'a DVector<f64>),
}

/// log dρ/d(𝒯_♯ρ) at a pushforward sample, via
/// log(𝒯_♯ρ)(𝒯(z)) = log ρ(z) − logdet(z). Zero identically for the
/// identity map. Arbitrary evaluation points are rejected: they would need
/// 𝒯⁻¹, which this implementation deliberately does not provide.
pub fn pushforward_log_ratio(model: &LazyMapModel, at: MapPoint) -> Result<f64> {
    match at {
        MapPoint::Source(z) => {
            let (x, ld) = iaf_forward(model, z);
            Ok(0.5 * z.norm_squared() - 0.5 * x.norm_squared() + ld)
        }
        MapPoint::Arbitrary(_) => Err(Error::config(
            "pushforward density at an arbitrary point requires inverting the map, \
             which is not supported; supply the originating latent point instead",
        )),
    }
}

/// Exact affine map x = mean + L z from a lower Cholesky factor, as a single
/// maskable layer: strictly-lower rows feed μ, the log-diagonal feeds s.
pub fn affine_from_cholesky(mean: &DVector<f64>, chol_lower: &DMatrix<f64>) -> Result<LazyMapModel> {
    let d = mean.len();
    if chol_lower.nrows() != d || chol_lower.ncols() != d {
        return Err(Error::config("Cholesky factor shape mismatch"));
    }
    let mut layer = IafLayer::identity_init(d, &[], (0..d).collect(), &mut seed::substream(0, "unused"))?;
    let mut w = DMatrix::zeros(2 * d, d);
    let mut b = DVector::zeros(2 * d);
    for j in 0..d {
        let diag = chol_lower[(j, j)];
        if diag <= 0.0 {
            return Err(Error::config("Cholesky factor must have positive diagonal"));
        }
        let s = diag.ln();
        if s.abs() >= LOG_SCALE_CLAMP {
            return Err(Error::config("Cholesky diagonal outside representable scale range"));
        }
        for k in 0..j {
            w[(j, k)] = chol_lower[(j, k)];
        }
        b[j] = mean[j];
        b[d + j] = s;
    }
    layer.weights[0] = w.component_mul(&layer.masks[0]);
    layer.biases[0] = b;
    Ok(LazyMapModel { layers: vec![layer] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::interior_lattice;
    use crate::prior::{Anisotropy, GaussianPrior, Mesh};
    use crate::subspace::solve_gevp;
    use approx::assert_relative_eq;

    fn randomize(model: &mut LazyMapModel, scale: f64, seed: u64) {
        let mut rng = seed::substream(seed, "randomize");
        let theta = DVector::from_fn(model.param_count(), |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        model.set_params(&theta).unwrap();
    }

    fn random_batch(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seed::substream(seed, "batch");
        DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn identity_initialized_stack_is_identity() {
        let model =
            LazyMapModel::identity_init(5, &FlowConfig { n_layers: 4, hidden_layers: 2, width: 16 }, 0)
                .unwrap();
        let z = random_batch(5, 3, 1);
        let (x, ld) = iaf_forward_batch(&model, &z);
        assert_eq!(x, z);
        assert_eq!(ld, DVector::zeros(3));
        let z0 = z.column(0).into_owned();
        assert_eq!(pushforward_log_ratio(&model, MapPoint::Source(&z0)).unwrap(), 0.0);
    }

    #[test]
    fn constant_conditioner_shifts_scalar_flow() {
        // d_r = 1: every conditioner weight is masked away, so μ and s are
        // the output biases. μ = 2, s = 0 gives x = z + 2 with logdet 0.
        let mut model =
            LazyMapModel::identity_init(1, &FlowConfig { n_layers: 1, hidden_layers: 1, width: 8 }, 0)
                .unwrap();
        assert_eq!(model.layers[0].masks.last().unwrap().sum(), 0.0);
        let last = model.layers[0].biases.len() - 1;
        model.layers[0].biases[last][0] = 2.0;
        let z = DVector::from_vec(vec![0.7]);
        let (x, ld) = iaf_forward(&model, &z);
        assert_eq!(x[0], 2.7);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn scalar_affine_flow_log_ratio_closed_form() {
        let (a, b): (f64, f64) = (0.6, -1.3);
        let mut model =
            LazyMapModel::identity_init(1, &FlowConfig { n_layers: 1, hidden_layers: 0, width: 0 }, 0)
                .unwrap();
        model.layers[0].biases[0][0] = b;
        model.layers[0].biases[0][1] = a.ln();
        for &zv in &[-1.1, 0.0, 0.4, 2.2] {
            let z = DVector::from_vec(vec![zv]);
            let (x, ld) = iaf_forward(&model, &z);
            assert_relative_eq!(x[0], a * zv + b, epsilon = 1e-14);
            assert_relative_eq!(ld, a.ln(), epsilon = 1e-14);
            // log N(x; 0, 1) − log N(x; b, a²) by hand.
            let log_std = -0.5 * x[0] * x[0];
            let log_aff = -0.5 * (x[0] - b) * (x[0] - b) / (a * a) - a.ln();
            let by_hand = log_std - log_aff;
            let ratio = pushforward_log_ratio(&model, MapPoint::Source(&z)).unwrap();
            assert_relative_eq!(ratio, by_hand, epsilon = 1e-12);
        }
    }

    #[test]
    fn autoregressive_probe_all_layers() {
        let mut model =
            LazyMapModel::identity_init(5, &FlowConfig { n_layers: 3, hidden_layers: 2, width: 16 }, 7)
                .unwrap();
        randomize(&mut model, 0.8, 8);
        let mut rng = seed::substream(9, "probe");
        for layer in &model.layers {
            let w: DVector<f64> =
                DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (mu0, s0) = layer.conditioner(&w);
            for k in 0..5 {
                let mut wp = w.clone();
                wp[k] += 0.7;
                let (mu1, s1) = layer.conditioner(&wp);
                for j in 0..=k {
                    assert_eq!(mu0[j], mu1[j], "μ_{j} moved with coordinate {k}");
                    assert_eq!(s0[j], s1[j], "s_{j} moved with coordinate {k}");
                }
            }
        }
    }

    #[test]
    fn logdet_matches_brute_force_jacobian() {
        let mut model =
            LazyMapModel::identity_init(4, &FlowConfig { n_layers: 3, hidden_layers: 1, width: 16 }, 2)
                .unwrap();
        randomize(&mut model, 0.5, 3);
        let z = random_batch(4, 1, 4).column(0).into_owned();
        let (_, ld) = iaf_forward(&model, &z);
        let eps = 1e-5;
        let mut jac = DMatrix::zeros(4, 4);
        for c in 0..4 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += eps;
            zm[c] -= eps;
            let (xp, _) = iaf_forward(&model, &zp);
            let (xm, _) = iaf_forward(&model, &zm);
            jac.set_column(c, &((xp - xm) / (2.0 * eps)));
        }
        let det = jac.lu().determinant();
        assert!(det > 0.0, "triangular layers must preserve orientation");
        assert_relative_eq!(ld.exp(), det, max_relative = 1e-8);
    }

    #[test]
    fn surrogate_objective_at_identity_equals_half_norm() {
        let model =
            LazyMapModel::identity_init(3, &FlowConfig { n_layers: 2, hidden_layers: 1, width: 8 }, 5)
                .unwrap();
        let net = MlpSurrogate::zeros(vec![3, 4]).unwrap();
        let z = random_batch(3, 64, 6);
        let eval = rkl_loss_and_grad(
            &model,
            &RklObjective::Surrogate { net: &net, whitened_obs: DVector::zeros(4) },
            &z,
        )
        .unwrap();
        let expected: f64 =
            z.column_iter().map(|c| 0.5 * c.norm_squared()).sum::<f64>() / 64.0;
        assert_relative_eq!(eval.loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let mut model =
            LazyMapModel::identity_init(3, &FlowConfig { n_layers: 2, hidden_layers: 1, width: 16 }, 10)
                .unwrap();
        randomize(&mut model, 0.3, 11);
        let net = {
            let mut rng = seed::substream(12, "net");
            MlpSurrogate::init(vec![3, 8, 2], &mut rng).unwrap()
        };
        let mut rng = seed::substream(13, "obs");
        let obs = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = random_batch(3, 4, 14);
        let objective = RklObjective::Surrogate { net: &net, whitened_obs: obs };
        let eval = rkl_loss_and_grad(&model, &objective, &z).unwrap();
        let theta = model.get_params();
        let eps = 1e-6;
        let mut dir_rng = seed::substream(15, "directions");
        for _ in 0..10 {
            let mut dir = DVector::from_fn(theta.len(), |_, _| {
                dir_rng.sample::<f64, _>(StandardNormal)
            });
            dir /= dir.norm();
            let mut mp = model.clone();
            mp.set_params(&(&theta + &dir * eps)).unwrap();
            let mut mm = model.clone();
            mm.set_params(&(&theta - &dir * eps)).unwrap();
            let lp = rkl_loss_and_grad(&mp, &objective, &z).unwrap().loss;
            let lm = rkl_loss_and_grad(&mm, &objective, &z).unwrap().loss;
            let fd = (lp - lm) / (2.0 * eps);
            let analytic = eval.grad.dot(&dir);
            assert_relative_eq!(analytic, fd, max_relative = 1e-4, epsilon = 1e-10);
        }
    }

    #[test]
    fn source_density_gradient_matches_finite_differences() {
        let mut model =
            LazyMapModel::identity_init(4, &FlowConfig { n_layers: 3, hidden_layers: 1, width: 12 }, 40)
                .unwrap();
        randomize(&mut model, 0.4, 41);
        let mut rng = seed::substream(42, "probe");
        let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (value, grad) = source_log_density_and_grad(&model, &z);
        assert!(value.is_finite());
        let eps = 1e-6;
        for _ in 0..10 {
            let mut dir = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            dir /= dir.norm();
            let fp = source_log_density_and_grad(&model, &(&z + &dir * eps)).0;
            let fm = source_log_density_and_grad(&model, &(&z - &dir * eps)).0;
            let fd = (fp - fm) / (2.0 * eps);
            assert_relative_eq!(grad.dot(&dir), fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    fn linear_setup() -> (GaussianPrior, PdeConfig, ReducedBasis) {
        let mesh = Mesh::new(4, 4).unwrap();
        let prior = GaussianPrior::build(mesh, 0.5, 1.0, Anisotropy::ISOTROPIC).unwrap();
        let pts = interior_lattice(&mesh, 2).unwrap();
        let cfg = PdeConfig::linear_from_selector(mesh, pts, 0.05).unwrap();
        let b = cfg.linear_matrix().unwrap();
        let h = b.transpose() * b / 0.05;
        let basis = solve_gevp(&prior, &h, 4).unwrap();
        (prior, cfg, basis)
    }

    #[test]
    fn model_objective_agrees_with_exact_affine_surrogate() {
        let (_prior, cfg, basis) = linear_setup();
        let sigma = cfg.sigma();
        let bd = cfg.linear_matrix().unwrap() * &basis.decoder;
        let mut net = MlpSurrogate::zeros(vec![4, cfg.d_y()]).unwrap();
        net.weights[0] = &bd / sigma;
        let mut rng = seed::substream(20, "y");
        let y = DVector::from_fn(cfg.d_y(), |_, _| rng.sample::<f64, _>(StandardNormal));

        let mut model =
            LazyMapModel::identity_init(4, &FlowConfig { n_layers: 2, hidden_layers: 1, width: 8 }, 21)
                .unwrap();
        randomize(&mut model, 0.4, 22);
        let z = random_batch(4, 6, 23);

        let se = rkl_loss_and_grad(
            &model,
            &RklObjective::Surrogate { net: &net, whitened_obs: &y / sigma },
            &z,
        )
        .unwrap();
        let me = rkl_loss_and_grad(
            &model,
            &RklObjective::Model { cfg: &cfg, basis: &basis, observation: y.clone() },
            &z,
        )
        .unwrap();
        assert_eq!(me.dropped, 0);
        assert_relative_eq!(se.loss, me.loss, max_relative = 1e-8);
        assert!((&se.grad - &me.grad).norm() <= 1e-8 * se.grad.norm());
    }

    #[test]
    fn latent_objective_equals_full_space_objective_on_subspace() {
        let (prior, cfg, basis) = linear_setup();
        let mut model =
            LazyMapModel::identity_init(4, &FlowConfig { n_layers: 2, hidden_layers: 1, width: 8 }, 24)
                .unwrap();
        randomize(&mut model, 0.4, 25);
        let mut rng = seed::substream(26, "y");
        let y = DVector::from_fn(cfg.d_y(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = random_batch(4, 5, 27);
        for c in 0..5 {
            let zc = z.column(c).into_owned();
            let (x, ld) = iaf_forward(&model, &zc);
            let m = subspace::lift_zero(&basis, &x);
            // Latent per-sample objective.
            let latent =
                forward::potential(&cfg, &y, &m).unwrap() + 0.5 * x.norm_squared() - ld;
            // Full-space objective at the zero-complement lift: the prior
            // term is ½‖m‖²_{C⁻¹} evaluated with the true precision.
            let full = forward::potential(&cfg, &y, &m).unwrap()
                + 0.5 * prior.apply_precision(&m).dot(&m)
                - ld;
            assert_relative_eq!(latent, full, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn dropped_elements_renormalize_the_batch() {
        // A selector matrix with a huge row makes the potential overflow for
        // one crafted element? Instead exercise the drop path directly: the
        // linear model never fails, so check the kept-count bookkeeping via
        // the nonlinear solver with an absurd field that cannot converge.
        let mesh = Mesh::new(4, 4).unwrap();
        let pts = interior_lattice(&mesh, 2).unwrap();
        let cfg = PdeConfig::nonlinear(mesh, pts, 0.05).unwrap();
        let prior = GaussianPrior::build(mesh, 0.5, 1.0, Anisotropy::ISOTROPIC).unwrap();
        let h = DMatrix::identity(mesh.node_count(), mesh.node_count());
        let basis = solve_gevp(&prior, &h, 2).unwrap();
        let model =
            LazyMapModel::identity_init(2, &FlowConfig { n_layers: 1, hidden_layers: 1, width: 4 }, 28)
                .unwrap();
        let y = DVector::zeros(cfg.d_y());
        // Benign batch: nothing drops.
        let z = random_batch(2, 3, 29);
        let eval = rkl_loss_and_grad(
            &model,
            &RklObjective::Model { cfg: &cfg, basis: &basis, observation: y.clone() },
            &z,
        )
        .unwrap();
        assert_eq!(eval.dropped, 0);
        // One element pushed far outside the solver's range drops out, and
        // the loss equals the mean over the survivors.
        let mut z_bad = z.clone();
        z_bad.set_column(1, &(DVector::from_element(2, 1.0) * 1e6));
        let eval_bad = rkl_loss_and_grad(
            &model,
            &RklObjective::Model { cfg: &cfg, basis: &basis, observation: y.clone() },
            &z_bad,
        )
        .unwrap();
        assert_eq!(eval_bad.dropped, 1);
        let survivors = [0usize, 2];
        let mut expect = 0.0;
        for &c in &survivors {
            let zc = z_bad.column(c).into_owned();
            let (x, ld) = iaf_forward(&model, &zc);
            let m = subspace::lift_zero(&basis, &x);
            expect += forward::potential(&cfg, &y, &m).unwrap() + 0.5 * x.norm_squared() - ld;
        }
        assert_relative_eq!(eval_bad.loss, expect / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_iteration_schedule_is_a_noop() {
        let mut model =
            LazyMapModel::identity_init(3, &FlowConfig { n_layers: 2, hidden_layers: 1, width: 8 }, 30)
                .unwrap();
        randomize(&mut model, 0.3, 31);
        let before = model.get_params();
        let net = MlpSurrogate::zeros(vec![3, 2]).unwrap();
        let objective =
            RklObjective::Surrogate { net: &net, whitened_obs: DVector::zeros(2) };
        let schedule = StageSchedule::new(vec![]).unwrap();
        let (model, report) = train_lazy_map(model, &objective, &schedule, 32).unwrap();
        assert_eq!(model.get_params(), before);
        assert!(report.trace.is_empty());
        assert!(!report.diverged);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let run = || {
            let model = LazyMapModel::identity_init(
                2,
                &FlowConfig { n_layers: 2, hidden_layers: 1, width: 8 },
                33,
            )
            .unwrap();
            let mut rng = seed::substream(34, "net");
            let net = MlpSurrogate::init(vec![2, 8, 2], &mut rng).unwrap();
            let obs = DVector::from_vec(vec![0.8, -0.4]);
            let objective = RklObjective::Surrogate { net: &net, whitened_obs: obs };
            let schedule = StageSchedule::new(vec![(150, 64, 5e-3)]).unwrap();
            train_lazy_map(model, &objective, &schedule, 35).unwrap()
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(m1.get_params(), m2.get_params());
        assert_eq!(r1.trace.len(), r2.trace.len());
        for (a, b) in r1.trace.iter().zip(&r2.trace) {
            assert_eq!(a.loss, b.loss);
        }
        // Batches are stochastic, so compare averaged ends of the trace.
        let quarter = r1.trace.len() / 4;
        let head: f64 =
            r1.trace[..quarter].iter().map(|t| t.loss).sum::<f64>() / quarter as f64;
        let tail: f64 = r1.trace[r1.trace.len() - quarter..].iter().map(|t| t.loss).sum::<f64>()
            / quarter as f64;
        assert!(tail < head, "training did not improve: head {head}, tail {tail}");
        assert!(!r1.diverged);
    }

    #[test]
    fn divergence_restores_best_parameters() {
        let model =
            LazyMapModel::identity_init(2, &FlowConfig { n_layers: 1, hidden_layers: 1, width: 4 }, 36)
                .unwrap();
        let before = model.get_params();
        // A surrogate with an overflowing weight makes every loss infinite.
        let mut net = MlpSurrogate::zeros(vec![2, 2]).unwrap();
        net.weights[0][(0, 0)] = 1e308;
        let objective =
            RklObjective::Surrogate { net: &net, whitened_obs: DVector::zeros(2) };
        let schedule = StageSchedule::new(vec![(50, 8, 1e-3)]).unwrap();
        let (model, report) = train_lazy_map(model, &objective, &schedule, 37).unwrap();
        assert!(report.diverged);
        assert_eq!(report.trace.len(), 2, "aborts after two consecutive bad steps");
        assert!(report.trace.iter().all(|t| !t.loss.is_finite()));
        assert_eq!(model.get_params(), before);
    }

    #[test]
    fn push_samples_fill_modes_and_reproducibility() {
        let (prior, _cfg, basis) = linear_setup();
        let model =
            LazyMapModel::identity_init(4, &FlowConfig { n_layers: 2, hidden_layers: 1, width: 8 }, 38)
                .unwrap();
        let mut rng_a = seed::substream(39, "push");
        let a = push_samples(&model, &basis, &prior, 4, &mut rng_a, Fill::PriorComplement);
        let mut rng_b = seed::substream(39, "push");
        let b = push_samples(&model, &basis, &prior, 4, &mut rng_b, Fill::PriorComplement);
        for (ma, mb) in a.iter().zip(&b) {
            assert_eq!(ma, mb);
        }
        // Zero fill with the identity map reproduces D z for the same draws.
        let mut rng_c = seed::substream(40, "push");
        let c = push_samples(&model, &basis, &prior, 3, &mut rng_c, Fill::Zero);
        let mut rng_d = seed::substream(40, "push");
        for m in &c {
            let z = DVector::from_fn(4, |_, _| rng_d.sample::<f64, _>(StandardNormal));
            assert_relative_eq!(*m, &basis.decoder * z, epsilon = 1e-14);
        }
    }

    #[test]
    fn arbitrary_evaluation_point_is_rejected() {
        let model =
            LazyMapModel::identity_init(2, &FlowConfig { n_layers: 1, hidden_layers: 1, width: 4 }, 41)
                .unwrap();
        let p = DVector::from_vec(vec![0.1, 0.2]);
        assert!(matches!(
            pushforward_log_ratio(&model, MapPoint::Arbitrary(&p)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn affine_from_cholesky_reproduces_gaussian() {
        let mean = DVector::from_vec(vec![0.3, -1.0, 0.5]);
        let cov = {
            let a = DMatrix::from_row_slice(
                3,
                3,
                &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0],
            );
            a
        };
        let chol = cov.clone().cholesky().unwrap();
        let model = affine_from_cholesky(&mean, &chol.l()).unwrap();
        let z = random_batch(3, 6, 42);
        for c in 0..6 {
            let zc = z.column(c).into_owned();
            let (x, ld) = iaf_forward(&model, &zc);
            assert_relative_eq!(x, &mean + chol.l() * &zc, epsilon = 1e-12);
            assert_relative_eq!(
                ld,
                chol.l().diagonal().map(f64::ln).sum(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn pushforward_ratio_self_normalizes() {
        let mut model =
            LazyMapModel::identity_init(4, &FlowConfig { n_layers: 2, hidden_layers: 1, width: 16 }, 43)
                .unwrap();
        randomize(&mut model, 0.1, 44);
        let n = 50_000;
        let z = random_batch(4, n, 45);
        let mut vals = Vec::with_capacity(n);
        let (x, ld) = iaf_forward_batch(&model, &z);
        for c in 0..n {
            let phi_t =
                0.5 * z.column(c).norm_squared() - 0.5 * x.column(c).norm_squared() + ld[c];
            vals.push(phi_t.exp());
        }
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 1.0).abs() <= 3.0 * se,
            "mean {mean}, se {se}: pushforward ratio must integrate to 1"
        );
    }
}
