//! Reduced-basis MLP surrogate g_w : ℝ^{d_r} → ℝ^{d_y} with an analytic
//! input-Jacobian, L² and H¹ training objectives, and an Adam loop.
//!
//! The H¹ objective penalizes the Jacobian misfit ‖J_r − ∇g_w(z)‖²_F, so its
//! weight-gradient must differentiate through the Jacobian computation. That
//! is done by reverse accumulation over the extended graph: alongside the
//! usual delta propagation, the adjoint of each layer Jacobian J^l flows
//! backward, and the dependence of GELU'(s) on the pre-activations injects a
//! GELU'' term into the deltas. Correctness is pinned by finite differences.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::subspace::EmbeddedDataset;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact-erf GELU: x·Φ(x) with the standard normal CDF Φ.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// GELU'(x) = Φ(x) + x·φ(x).
pub fn gelu_prime(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * std_normal_pdf(x)
}

/// GELU''(x) = φ(x)·(2 − x²).
pub fn gelu_second(x: f64) -> f64 {
    std_normal_pdf(x) * (2.0 - x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    L2,
    H1,
}

/// Layered perceptron: GELU on hidden layers, identity output.
#[derive(Debug, Clone)]
pub struct MlpSurrogate {
    /// [d_r, h₁, …, h_L, d_y].
    pub sizes: Vec<usize>,
    /// weights[l]: sizes[l+1] × sizes[l].
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpSurrogate {
    /// Zero-initialized network of the given shape.
    pub fn zeros(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config("network needs at least input and output sizes"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        let weights = sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        let biases = sizes[1..].iter().map(|&s| DVector::zeros(s)).collect();
        Ok(MlpSurrogate { sizes, weights, biases })
    }

    /// Scaled-uniform fan-in initialization: W ~ U(±1/√fan_in), b = 0.
    pub fn init(sizes: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for w in &mut net.weights {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn d_r(&self) -> usize {
        self.sizes[0]
    }

    pub fn d_y(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn forward(&self, z: &DVector<f64>) -> DVector<f64> {
        let last = self.n_layers() - 1;
        let mut a = z.clone();
        for l in 0..=last {
            let mut s = &self.weights[l] * &a + &self.biases[l];
            if l < last {
                s.apply(|v| *v = gelu(*v));
            }
            a = s;
        }
        a
    }

    pub fn forward_batch(&self, zs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        zs.iter().map(|z| self.forward(z)).collect()
    }

    /// ∇_z g_w(z), by forward accumulation J ← diag(GELU'(s))·W·J.
    pub fn input_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let last = self.n_layers() - 1;
        let mut a = z.clone();
        let mut jac = DMatrix::identity(self.d_r(), self.d_r());
        for l in 0..=last {
            let s = &self.weights[l] * &a + &self.biases[l];
            jac = &self.weights[l] * jac;
            if l < last {
                for (row, &sv) in s.iter().enumerate() {
                    let d = gelu_prime(sv);
                    jac.row_mut(row).scale_mut(d);
                }
                a = s.map(gelu);
            }
        }
        jac
    }

    /// Column-wise batched forward: column b of the result is g_w of column b
    /// of `z`, identical to the per-vector path.
    pub fn forward_matrix(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.n_layers() - 1;
        let mut a = z.clone();
        for l in 0..=last {
            let mut s = &self.weights[l] * &a;
            for mut col in s.column_iter_mut() {
                col += &self.biases[l];
            }
            if l < last {
                s.apply(|v| *v = gelu(*v));
            }
            a = s;
        }
        a
    }

    /// Column-wise batched vector-Jacobian product: column b of the result is
    /// J(z_b)ᵀ·ȳ_b. Recomputes the forward caches internally.
    pub fn vjp_matrix(&self, z: &DMatrix<f64>, y_bar: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.n_layers() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut a = z.clone();
        for l in 0..last {
            let mut s = &self.weights[l] * &a;
            for mut col in s.column_iter_mut() {
                col += &self.biases[l];
            }
            a = s.map(gelu);
            pre.push(s);
        }
        let mut bar = self.weights[last].transpose() * y_bar;
        for l in (0..last).rev() {
            bar.zip_apply(&pre[l], |v, s| *v *= gelu_prime(s));
            bar = self.weights[l].transpose() * bar;
        }
        bar
    }

    /// Jᵀr without forming the Jacobian (one reverse pass); used when the
    /// surrogate sits inside an outer objective with upstream gradient r.
    pub fn input_gradient(&self, z: &DVector<f64>, upstream: &DVector<f64>) -> DVector<f64> {
        let last = self.n_layers() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut a = z.clone();
        for l in 0..last {
            let s = &self.weights[l] * &a + &self.biases[l];
            a = s.map(gelu);
            pre.push(s);
        }
        let mut bar = self.weights[last].transpose() * upstream;
        for l in (0..last).rev() {
            let s = &pre[l];
            for (i, v) in bar.iter_mut().enumerate() {
                *v *= gelu_prime(s[i]);
            }
            bar = self.weights[l].transpose() * bar;
        }
        bar
    }

    pub fn check_finite(&self) -> Result<()> {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if !w.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
                return Err(Error::numerical("non-finite surrogate weights"));
            }
        }
        Ok(())
    }
}

/// Gradient with the same shape as the network parameters.
#[derive(Debug, Clone)]
pub struct WeightGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl WeightGrad {
    fn zeros_like(net: &MlpSurrogate) -> Self {
        WeightGrad {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            *w *= c;
        }
        for b in &mut self.biases {
            *b *= c;
        }
    }
}

/// Batch loss (1/N)Σ‖g − g_w(z)‖² [+ ‖J_r − ∇g_w(z)‖²_F] and its exact
/// weight-gradient.
pub fn loss_and_grad(
    net: &MlpSurrogate,
    batch: &EmbeddedDataset,
    indices: &[usize],
    objective: Objective,
) -> Result<(f64, WeightGrad)> {
    if indices.is_empty() {
        return Err(Error::config("empty training batch"));
    }
    if objective == Objective::H1 && batch.jacobians.is_none() {
        return Err(Error::config("H1 objective requires jacobian data"));
    }
    let last = net.n_layers() - 1;
    let d_r = net.d_r();
    let mut grad = WeightGrad::zeros_like(net);
    let mut loss = 0.0;

    for &idx in indices {
        let z = &batch.inputs[idx];
        let g = &batch.outputs[idx];

        // Forward pass with caches; a[l] is the input of layer l.
        let mut acts: Vec<DVector<f64>> = Vec::with_capacity(last + 1);
        let mut pres: Vec<DVector<f64>> = Vec::with_capacity(last);
        let mut jacs: Vec<DMatrix<f64>> = Vec::new(); // J^l after activation
        let mut pre_jacs: Vec<DMatrix<f64>> = Vec::new(); // B^l = W^l J^{l-1}
        acts.push(z.clone());
        let with_jac = objective == Objective::H1;
        let mut jac_prev = if with_jac { Some(DMatrix::identity(d_r, d_r)) } else { None };
        for l in 0..last {
            let s = &net.weights[l] * &acts[l] + &net.biases[l];
            if let Some(jp) = &jac_prev {
                let b_l = &net.weights[l] * jp;
                let mut j_l = b_l.clone();
                for (row, &sv) in s.iter().enumerate() {
                    j_l.row_mut(row).scale_mut(gelu_prime(sv));
                }
                pre_jacs.push(b_l);
                jacs.push(j_l.clone());
                jac_prev = Some(j_l);
            }
            acts.push(s.map(gelu));
            pres.push(s);
        }
        let out = &net.weights[last] * &acts[last] + &net.biases[last];

        let r = &out - g;
        loss += r.norm_squared();

        // Output layer adjoints.
        let y_bar = r * 2.0;
        grad.weights[last].gemm(1.0, &y_bar, &acts[last].transpose(), 1.0);
        grad.biases[last] += &y_bar;
        let mut a_bar = net.weights[last].transpose() * &y_bar;

        let mut j_bar: Option<DMatrix<f64>> = None;
        if with_jac {
            let j_hidden = if last == 0 {
                DMatrix::identity(d_r, d_r)
            } else {
                jacs[last - 1].clone()
            };
            let j_out = &net.weights[last] * &j_hidden;
            let target = &batch.jacobians.as_ref().unwrap()[idx];
            let rj = (&j_out - target) * 2.0;
            loss += 0.25 * rj.norm_squared();
            grad.weights[last].gemm(1.0, &rj, &j_hidden.transpose(), 1.0);
            j_bar = Some(net.weights[last].transpose() * rj);
        }

        for l in (0..last).rev() {
            let s = &pres[l];
            let mut s_bar = a_bar.clone();
            for (i, v) in s_bar.iter_mut().enumerate() {
                *v *= gelu_prime(s[i]);
            }
            if let Some(jb) = j_bar.take() {
                // d̄_i = row-dot of J̄ and B^l; feeds GELU'' into the deltas.
                let b_l = &pre_jacs[l];
                for i in 0..s.len() {
                    let mut acc = 0.0;
                    for c in 0..d_r {
                        acc += jb[(i, c)] * b_l[(i, c)];
                    }
                    s_bar[i] += gelu_second(s[i]) * acc;
                }
                let mut b_bar = jb;
                for (row, &sv) in s.iter().enumerate() {
                    b_bar.row_mut(row).scale_mut(gelu_prime(sv));
                }
                let j_prev_t = if l == 0 {
                    DMatrix::identity(d_r, d_r)
                } else {
                    jacs[l - 1].transpose()
                };
                grad.weights[l].gemm(1.0, &b_bar, &j_prev_t, 1.0);
                j_bar = Some(net.weights[l].transpose() * b_bar);
            }
            grad.weights[l].gemm(1.0, &s_bar, &acts[l].transpose(), 1.0);
            grad.biases[l] += &s_bar;
            a_bar = net.weights[l].transpose() * s_bar;
        }
    }

    let inv_n = 1.0 / indices.len() as f64;
    grad.scale(inv_n);
    Ok((loss * inv_n, grad))
}

/// Training configuration: architecture, objective, and Adam schedule.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub hidden_layers: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// (epoch span, learning rate) pairs; spans must sum to `epochs`.
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale default: 3×64 network, 500 epochs, batch 32, 1e-3 dropping
    /// to 3e-4 for the final quarter.
    pub fn desk_default(objective: Objective, seed: u64) -> Self {
        TrainConfig {
            objective,
            hidden_layers: 3,
            width: 64,
            epochs: 500,
            batch_size: 32,
            lr_schedule: vec![(375, 1e-3), (125, 3e-4)],
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.width == 0 {
            return Err(Error::config("epochs, batch size, and width must be positive"));
        }
        let span: usize = self.lr_schedule.iter().map(|(s, _)| s).sum();
        if span != self.epochs {
            return Err(Error::config(format!(
                "learning-rate spans sum to {span}, expected {} epochs",
                self.epochs
            )));
        }
        if self.lr_schedule.iter().any(|&(s, r)| s == 0 || r <= 0.0) {
            return Err(Error::config("learning-rate spans and rates must be positive"));
        }
        Ok(())
    }

    fn rate_at(&self, epoch: usize) -> f64 {
        let mut acc = 0;
        for &(span, rate) in &self.lr_schedule {
            acc += span;
            if epoch < acc {
                return rate;
            }
        }
        self.lr_schedule.last().unwrap().1
    }
}

#[derive(Debug, Clone)]
pub struct LossReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// (E_g, E_∇g) on a held-out set, when one was supplied.
    pub test_errors: Option<(f64, Option<f64>)>,
}

struct Adam {
    m: WeightGrad,
    v: WeightGrad,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &MlpSurrogate) -> Self {
        Adam { m: WeightGrad::zeros_like(net), v: WeightGrad::zeros_like(net), t: 0 }
    }

    fn step(&mut self, net: &mut MlpSurrogate, grad: &WeightGrad, rate: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for l in 0..net.weights.len() {
            for (w, (g, (m, v))) in net.weights[l].iter_mut().zip(
                grad.weights[l]
                    .iter()
                    .zip(self.m.weights[l].iter_mut().zip(self.v.weights[l].iter_mut())),
            ) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *w -= rate * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            }
            for (b, (g, (m, v))) in net.biases[l].iter_mut().zip(
                grad.biases[l]
                    .iter()
                    .zip(self.m.biases[l].iter_mut().zip(self.v.biases[l].iter_mut())),
            ) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *b -= rate * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Adam training with per-epoch reshuffled minibatches, deterministic in
/// `cfg.seed`. Test errors are attached when a held-out set is given.
pub fn train(
    dataset: &EmbeddedDataset,
    cfg: &TrainConfig,
    testset: Option<&EmbeddedDataset>,
) -> Result<(MlpSurrogate, LossReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let d_r = dataset.inputs[0].len();
    let d_y = dataset.outputs[0].len();
    let mut sizes = vec![d_r];
    sizes.extend(std::iter::repeat(cfg.width).take(cfg.hidden_layers));
    sizes.push(d_y);
    let mut net = MlpSurrogate::init(sizes, &mut seed::substream(cfg.seed, stream::INIT))?;

    let mut adam = Adam::new(&net);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::substream_indexed(cfg.seed, stream::MINIBATCH, epoch as u64);
        indices.shuffle(&mut rng);
        let rate = cfg.rate_at(epoch);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in indices.chunks(cfg.batch_size) {
            let (loss, grad) = loss_and_grad(&net, dataset, chunk, cfg.objective)?;
            if !loss.is_finite() {
                return Err(Error::numerical("training diverged"));
            }
            adam.step(&mut net, &grad, rate);
            epoch_loss += loss;
            n_batches += 1;
        }
        epoch_losses.push(epoch_loss / n_batches as f64);
    }
    net.check_finite()?;

    let test_errors = match testset {
        Some(ts) => Some(generalization_errors(&net, ts)?),
        None => None,
    };
    Ok((net, LossReport { epoch_losses, test_errors }))
}

/// Relative RMS errors over a test set:
/// E_g = sqrt(mean ‖g − g_w(z)‖²/‖g‖²) and the Jacobian analogue in the
/// Frobenius norm (present only when the set carries Jacobians).
pub fn generalization_errors(
    net: &MlpSurrogate,
    testset: &EmbeddedDataset,
) -> Result<(f64, Option<f64>)> {
    if testset.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let mut acc_g = 0.0;
    for (z, g) in testset.inputs.iter().zip(&testset.outputs) {
        let denom = g.norm_squared();
        if denom == 0.0 {
            return Err(Error::numerical("zero-norm test observable"));
        }
        acc_g += (net.forward(z) - g).norm_squared() / denom;
    }
    let e_g = (acc_g / testset.len() as f64).sqrt();

    let e_grad = match &testset.jacobians {
        None => None,
        Some(jacs) => {
            let mut acc = 0.0;
            for (z, jr) in testset.inputs.iter().zip(jacs) {
                let denom = jr.norm_squared();
                if denom == 0.0 {
                    return Err(Error::numerical("zero-norm test jacobian"));
                }
                acc += (net.input_jacobian(z) - jr).norm_squared() / denom;
            }
            Some((acc / testset.len() as f64).sqrt())
        }
    };
    Ok((e_g, e_grad))
}
