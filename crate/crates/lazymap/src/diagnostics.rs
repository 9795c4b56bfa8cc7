//! Posterior accuracy measures: relative moment discrepancies between sample
//! sets, importance-weight diagnostics (effective sample size, forward and
//! reverse KL up to the unknown evidence shift), a pushforward mode estimate
//! with its relative error, and the split-R̂ chain convergence check.
//!
//! The KL estimates are shifted by log Z, which is never estimated; they are
//! comparable across methods only for the same observation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::prior::Field;
use crate::seed::{self, stream};
use crate::subspace::ReducedBasis;
use crate::transport::{self, LazyMapModel};

/// Relative moment discrepancies between an approximate and a reference
/// sample set, in percent.
#[derive(Debug, Clone)]
pub struct MomentReport {
    /// Relative Euclidean error of the full-space sample means.
    pub e_mean: f64,
    /// Relative Frobenius error of the full-space sample covariances.
    pub e_cov: f64,
    /// Relative Frobenius error of the third standardized central moment
    /// tensor over the leading latent coordinates.
    pub e_skew: f64,
    /// Leading-coordinate count the skewness tensor was built on.
    pub k_skew: usize,
}

/// Density-based diagnostics for one inference method on one observation.
#[derive(Debug, Clone)]
pub struct DensityReport {
    /// Mean of Φ − Φ_T over pushforward samples; reverse KL plus a −log Z
    /// shift shared by all methods on the same observation.
    pub e_rkl_shifted: f64,
    /// Self-normalized importance estimate of the forward KL plus a +log Z
    /// shift.
    pub e_fkl_shifted: f64,
    /// Effective sample size of the importance weights, percent of N.
    pub ess_percent: f64,
    /// Relative Euclidean error of the pushforward mode vs the reference MAP,
    /// percent.
    pub e_map: f64,
    /// Sample count the estimates used.
    pub n: usize,
}

/// Exponent convention for the posterior-to-pushforward density ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightExponent {
    /// w̃ = exp(−Φ + Φ_T), the importance weight that makes self-normalized
    /// estimators consistent.
    Single,
    /// w̃ = exp(−2Φ + 2Φ_T); squares the ratio. Kept for comparison with
    /// reports that use that convention.
    Doubled,
}

fn relative_percent(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den * 100.0
    }
}

/// Sample mean and covariance of a set of fields, accumulated in blocks so
/// large sets never materialize an n×N deviation matrix.
fn sample_moments(samples: &[Field]) -> (Field, DMatrix<f64>) {
    let n = samples[0].len();
    let count = samples.len();
    let mut mean = Field::zeros(n);
    for s in samples {
        mean += s;
    }
    mean /= count as f64;

    const BLOCK: usize = 2048;
    let mut cov = DMatrix::zeros(n, n);
    let mut block = DMatrix::zeros(n, BLOCK);
    for chunk in samples.chunks(BLOCK) {
        let mut dev = block.columns_mut(0, chunk.len());
        for (c, s) in chunk.iter().enumerate() {
            dev.set_column(c, &(s - &mean));
        }
        let dev = block.columns(0, chunk.len());
        cov.gemm(1.0, &dev, &dev.transpose(), 1.0);
    }
    cov /= (count - 1) as f64;
    (mean, cov)
}

/// Third standardized central moment tensor over the leading `k` latent
/// coordinates, flattened; standardization uses the set's own mean and
/// standard deviation per coordinate.
fn skewness_tensor(samples: &[Field], basis: &ReducedBasis, k: usize) -> DVector<f64> {
    let count = samples.len();
    let mut coords = DMatrix::zeros(k, count);
    for (c, s) in samples.iter().enumerate() {
        let x = basis.encode(s);
        coords.set_column(c, &x.rows(0, k).into_owned());
    }
    for mut row in coords.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
        let sd = (row.dot(&row) / (count as f64 - 1.0)).sqrt();
        if sd > 0.0 {
            row /= sd;
        } else {
            row.fill(0.0);
        }
    }
    let mut tensor = DVector::zeros(k * k * k);
    for c in 0..count {
        let u = coords.column(c);
        for a in 0..k {
            for b in 0..k {
                let p = u[a] * u[b];
                let base = (a * k + b) * k;
                for d in 0..k {
                    tensor[base + d] += p * u[d];
                }
            }
        }
    }
    tensor / count as f64
}

/// Compares the first three moments of an approximate posterior sample set
/// against a reference set: mean and covariance in the full discretized
/// space, skewness over the leading `k_skew` latent coordinates (clamped to
/// the basis rank). All errors are relative, in percent.
pub fn moment_errors(
    approx: &[Field],
    reference: &[Field],
    basis: &ReducedBasis,
    k_skew: usize,
) -> Result<MomentReport> {
    if approx.len() < 10 || reference.len() < 10 {
        return Err(Error::config("moment diagnostics need at least 10 samples per set"));
    }
    if k_skew == 0 {
        return Err(Error::config("skewness needs at least one latent coordinate"));
    }
    let n = basis.node_count();
    if approx.iter().chain(reference).any(|s| s.len() != n) {
        return Err(Error::config("sample dimension does not match the basis"));
    }
    let k = k_skew.min(basis.d_r());

    let (mean_a, cov_a) = sample_moments(approx);
    let (mean_r, cov_r) = sample_moments(reference);
    let e_mean = relative_percent((&mean_a - &mean_r).norm(), mean_r.norm());
    let e_cov = relative_percent((&cov_a - &cov_r).norm(), cov_r.norm());

    let skew_a = skewness_tensor(approx, basis, k);
    let skew_r = skewness_tensor(reference, basis, k);
    let e_skew = relative_percent((&skew_a - &skew_r).norm(), skew_r.norm());

    Ok(MomentReport { e_mean, e_cov, e_skew, k_skew: k })
}

/// Importance weights of the posterior with respect to the pushforward from
/// per-sample potentials Φ and pushforward potentials Φ_T. Computed in
/// log-space with a max shift, so underflow to an all-zero weight set cannot
/// occur. Returns (unnormalized w̃ with max 1, normalized w with mean 1).
pub fn importance_weights(
    phi: &[f64],
    phi_t: &[f64],
    exponent: WeightExponent,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if phi.is_empty() || phi.len() != phi_t.len() {
        return Err(Error::config("potential lists must be nonempty and of equal length"));
    }
    let scale = match exponent {
        WeightExponent::Single => 1.0,
        WeightExponent::Doubled => 2.0,
    };
    let log_w: Vec<f64> = phi.iter().zip(phi_t).map(|(p, pt)| scale * (pt - p)).collect();
    if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::numerical("non-finite log importance weight"));
    }
    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w_tilde: Vec<f64> = log_w.iter().map(|v| (v - shift).exp()).collect();
    let mean = w_tilde.iter().sum::<f64>() / w_tilde.len() as f64;
    let w = w_tilde.iter().map(|v| v / mean).collect();
    Ok((w_tilde, w))
}

/// Effective sample size of a weight list as a percentage of N:
/// (Σw̃)² / (N Σw̃²) × 100. Scale-invariant, so it can be fed either raw or
/// max-shifted weights.
pub fn ess_percent(w_tilde: &[f64]) -> Result<f64> {
    if w_tilde.is_empty() {
        return Err(Error::config("effective sample size of an empty weight list"));
    }
    let sum: f64 = w_tilde.iter().sum();
    let sum_sq: f64 = w_tilde.iter().map(|w| w * w).sum();
    if sum <= 0.0 || !sum.is_finite() || !sum_sq.is_finite() {
        return Err(Error::numerical("degenerate importance weights"));
    }
    Ok(sum * sum / (w_tilde.len() as f64 * sum_sq) * 100.0)
}

/// Shifted KL estimates from pushforward samples: reverse KL as the plain
/// mean of Φ − Φ_T, forward KL as the self-normalized importance estimate of
/// Φ_T − Φ under the normalized weights `w`.
pub fn kl_estimates(phi: &[f64], phi_t: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    if phi.is_empty() || phi.len() != phi_t.len() || phi.len() != w.len() {
        return Err(Error::config("potential and weight lists must be nonempty and of equal length"));
    }
    let n = phi.len() as f64;
    let rkl = phi.iter().zip(phi_t).map(|(p, pt)| p - pt).sum::<f64>() / n;
    let w_sum: f64 = w.iter().sum();
    if w_sum <= 0.0 {
        return Err(Error::numerical("importance weights sum to zero"));
    }
    let fkl = phi
        .iter()
        .zip(phi_t)
        .zip(w)
        .map(|((p, pt), wi)| wi * (pt - p))
        .sum::<f64>()
        / w_sum;
    Ok((rkl, fkl))
}

/// Assembles the density-based diagnostics for one method from its per-sample
/// potentials; `e_map` comes from [`pushforward_map_estimate`] or is set to
/// NaN when no reference MAP exists.
pub fn density_report(
    phi: &[f64],
    phi_t: &[f64],
    exponent: WeightExponent,
    e_map: f64,
) -> Result<DensityReport> {
    let (w_tilde, w) = importance_weights(phi, phi_t, exponent)?;
    let ess = ess_percent(&w_tilde)?;
    let (e_rkl_shifted, e_fkl_shifted) = kl_estimates(phi, phi_t, &w)?;
    Ok(DensityReport { e_rkl_shifted, e_fkl_shifted, ess_percent: ess, e_map, n: phi.len() })
}

/// Pushforward mode search result.
#[derive(Debug, Clone)]
pub struct PushforwardMap {
    /// Decoded mode, zero complement fill.
    pub point: Field,
    /// Source point the ascent ended at.
    pub source: DVector<f64>,
    /// Relative Euclidean error vs the reference MAP, percent.
    pub e_map: f64,
    /// False when the ascent hit its iteration limit before the gradient
    /// tolerance; the best point found is still reported.
    pub converged: bool,
}

const MAP_STARTS: usize = 64;
const MAP_MAX_ITERS: usize = 500;
const MAP_GRAD_TOL: f64 = 1e-8;

/// Maximizes the pushforward log-density over the source point by gradient
/// ascent from the best of 64 sampled starts, decodes with zero fill, and
/// reports the relative error against `reference_map` (the MAP point of a
/// Laplace or direct optimization baseline).
pub fn pushforward_map_estimate(
    model: &LazyMapModel,
    basis: &ReducedBasis,
    reference_map: &Field,
    seed: u64,
) -> Result<PushforwardMap> {
    if basis.d_r() != model.d_r() {
        return Err(Error::config("basis rank does not match the transport map"));
    }
    if reference_map.len() != basis.node_count() {
        return Err(Error::config("reference MAP dimension does not match the basis"));
    }
    let d = model.d_r();
    let mut rng = seed::substream(seed, stream::MAP_SEARCH);
    let mut z = DVector::zeros(d);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..MAP_STARTS {
        let cand = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (value, _) = transport::source_log_density_and_grad(model, &cand);
        if value > best {
            best = value;
            z = cand;
        }
    }

    let (mut value, mut grad) = transport::source_log_density_and_grad(model, &z);
    let mut converged = false;
    let mut step = 1.0_f64;
    'ascent: for _ in 0..MAP_MAX_ITERS {
        if grad.norm() <= MAP_GRAD_TOL {
            converged = true;
            break;
        }
        let mut alpha = step;
        loop {
            let cand = &z + &grad * alpha;
            let (cv, cg) = transport::source_log_density_and_grad(model, &cand);
            if cv.is_finite() && cv >= value + 1e-4 * alpha * grad.norm_squared() {
                z = cand;
                value = cv;
                grad = cg;
                step = (alpha * 2.0).min(1.0);
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-14 {
                // No ascent step left; treat the current point as the mode.
                converged = grad.norm() <= MAP_GRAD_TOL;
                break 'ascent;
            }
        }
    }

    let (x, _) = transport::iaf_forward(model, &z);
    let point = basis.decode(&x);
    let e_map = relative_percent((&point - reference_map).norm(), reference_map.norm());
    Ok(PushforwardMap { point, source: z, e_map, converged })
}

/// Split-R̂ over a set of scalar chains: every chain is halved, and the
/// usual between/within variance ratio is taken over the half-chains. Chains
/// are truncated to the shortest length; values near 1 indicate mixing.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.is_empty() {
        return Err(Error::config("split-R̂ needs at least one chain"));
    }
    let len = chains.iter().map(Vec::len).min().unwrap();
    if len < 4 {
        return Err(Error::config("split-R̂ needs chains of length at least 4"));
    }
    let half = len / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for chain in chains {
        halves.push(&chain[..half]);
        // For odd lengths the middle element is dropped.
        halves.push(&chain[len - half..len]);
    }
    let m = halves.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let w = vars.iter().sum::<f64>() / m;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}
