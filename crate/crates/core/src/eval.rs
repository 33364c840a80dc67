//! Evaluation: KL divergence to the closed-form safe conditional, the
//! guidance-decomposition order check, the Taylor-gap bound and auxiliary
//! metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safety::{SafePosterior, SafetyFn};
use crate::sampler::SampleBatch;
use crate::schedule::NoiseSchedule;
use crate::score::ToyWorld;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Finite-difference step used by every evaluator in this module.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KlEstimator {
    GaussianFit,
    KnnEstimator { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub estimator: KlEstimator,
    /// Divergence in nats.
    pub value: f64,
    pub sample_count: usize,
    /// Which way the divergence was taken.
    pub direction: String,
    /// Jitter amplitude applied to break duplicate points, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    /// Degradation notes, e.g. when too few samples force a mean-only fit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub tool_version: String,
}

/// Closed-form KL between two Gaussians where the reference covariance is
/// `scale * I`.
pub fn gaussian_kl(
    mean_fit: &DVector<f64>,
    cov_fit: &DMatrix<f64>,
    mean_ref: &DVector<f64>,
    ref_scale: f64,
) -> Result<f64> {
    let d = mean_fit.len() as f64;
    let det_fit = cov_fit.determinant();
    if det_fit <= 0.0 {
        return Err(Error::Estimation("singular sample covariance".into()));
    }
    let diff = mean_fit - mean_ref;
    let trace = cov_fit.trace() / ref_scale;
    let maha = diff.norm_squared() / ref_scale;
    let log_det_ratio = (ref_scale.powf(d) / det_fit).ln();
    Ok(0.5 * (trace + maha - d + log_det_ratio))
}

/// Fits a maximum-likelihood Gaussian to the samples and evaluates the
/// closed-form `KL(fitted || reference)`.
pub fn kl_gaussian_fit(samples: &SampleBatch, reference: &SafePosterior) -> Result<KlReport> {
    let n = samples.samples.len();
    let mean = samples.mean();
    // Too few samples for a covariance estimate: fall back to a mean-only
    // fit with the covariance pinned at the reference, and say so.
    let (cov, note) = if n >= samples.dim + 2 {
        (samples.covariance(), None)
    } else {
        (
            DMatrix::identity(samples.dim, samples.dim) * reference.covariance_scale,
            Some(format!(
                "covariance fixed to reference: {n} samples is too few to fit one"
            )),
        )
    };
    let value = gaussian_kl(&mean, &cov, &reference.mean, reference.covariance_scale)?;
    Ok(KlReport {
        estimator: KlEstimator::GaussianFit,
        value,
        sample_count: n,
        direction: "KL(fitted-from-samples || reference)".into(),
        jitter: None,
        note,
        tool_version: TOOL_VERSION.into(),
    })
}

fn knn_kth_distances(points: &[DVector<f64>], others: &[DVector<f64>], k: usize, skip_self: bool) -> Vec<f64> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            // k smallest distances via a bounded insertion buffer
            let mut best = vec![f64::INFINITY; k];
            for (j, q) in others.iter().enumerate() {
                if skip_self && i == j {
                    continue;
                }
                let d = (p - q).norm();
                if d < best[k - 1] {
                    let pos = best.partition_point(|&b| b < d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            best[k - 1]
        })
        .collect()
}

/// k-nearest-neighbor KL estimate between two sample sets, `KL(p || q)`.
pub fn kl_knn(samples_p: &[DVector<f64>], samples_q: &[DVector<f64>], k: usize) -> Result<KlReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let (n, m) = (samples_p.len(), samples_q.len());
    if n <= k || m <= k {
        return Err(Error::Estimation(format!(
            "both sample sets must exceed k = {k} points"
        )));
    }
    let dim = samples_p[0].len() as f64;

    let estimate = |p: &[DVector<f64>], q: &[DVector<f64>]| -> Option<f64> {
        let rho = knn_kth_distances(p, p, k, true);
        let nu = knn_kth_distances(p, q, k, false);
        if rho.iter().chain(nu.iter()).any(|&d| d <= 0.0) {
            return None;
        }
        let sum: f64 = rho
            .iter()
            .zip(&nu)
            .map(|(r, s)| (s / r).ln())
            .sum();
        Some(dim / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln())
    };

    if let Some(value) = estimate(samples_p, samples_q) {
        return Ok(KlReport {
            estimator: KlEstimator::KnnEstimator { k },
            value,
            sample_count: n,
            direction: "KL(p-samples || q-samples)".into(),
            jitter: None,
            note: None,
            tool_version: TOOL_VERSION.into(),
        });
    }

    // Duplicate points degenerate the estimator; retry with recorded jitter.
    let jitter = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a69_7474);
    let perturb = |xs: &[DVector<f64>], rng: &mut ChaCha8Rng| -> Vec<DVector<f64>> {
        xs.iter()
            .map(|x| x.map(|v| v + jitter * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let p = perturb(samples_p, &mut rng);
    let q = perturb(samples_q, &mut rng);
    let value = estimate(&p, &q)
        .ok_or_else(|| Error::Estimation("degenerate sample sets even after jitter".into()))?;
    Ok(KlReport {
        estimator: KlEstimator::KnnEstimator { k },
        value,
        sample_count: n,
        direction: "KL(p-samples || q-samples)".into(),
        jitter: Some(jitter),
        note: None,
        tool_version: TOOL_VERSION.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub rho_values: Vec<f64>,
    pub residual_norms: Vec<f64>,
    /// Convergence order fitted from consecutive residual pairs
    /// (`log2` of the residual ratio per `rho` halving).
    pub estimated_orders: Vec<f64>,
    pub fd_step: f64,
    pub tool_version: String,
}

/// Checks the decomposition of the embedding-updated score into base score
/// plus an alignment guidance term, with an `O(rho^2)` remainder.
///
/// Both sides are evaluated with the same central-difference machinery on
/// scalar maps, so at `rho = 0` the residual is exactly zero.
pub fn theorem1_residual(
    world: &ToyWorld,
    schedule: &NoiseSchedule,
    g: &dyn SafetyFn,
    x_t: &DVector<f64>,
    t: usize,
    rho_values: &[f64],
) -> Result<TheoremCheckReport> {
    let abar = schedule.alpha_bar(t)?;
    let sqrt_abar = abar.sqrt();
    let c = &world.cond;
    let dim = world.dim;

    // grad_c g_t(y, c) with the analytic Tweedie map sqrt(abar) y + (1-abar) c.
    let embed_grad = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let x0_hat = y * sqrt_abar + c * (1.0 - abar);
        Ok(g.grad(&x0_hat)? * (1.0 - abar))
    };

    let fd_grad = |f: &dyn Fn(&DVector<f64>) -> Result<f64>, y: &DVector<f64>| -> Result<DVector<f64>> {
        let mut out = DVector::zeros(dim);
        for i in 0..dim {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[i] += FD_STEP;
            ym[i] -= FD_STEP;
            out[i] = (f(&yp)? - f(&ym)?) / (2.0 * FD_STEP);
        }
        Ok(out)
    };

    let mut residuals = Vec::with_capacity(rho_values.len());
    for &rho in rho_values {
        // Left side: total derivative of log q_t(y | c + rho * d(y)).
        let lhs_scalar = |y: &DVector<f64>| -> Result<f64> {
            let c_upd = c + embed_grad(y)? * rho;
            Ok(-0.5 * (y - c_upd * sqrt_abar).norm_squared())
        };
        // Right side: base score plus the gradient of the alignment term
        // rho * d(y)^T grad_c log q_t(y | c).
        let base_scalar = |y: &DVector<f64>| -> Result<f64> {
            Ok(-0.5 * (y - c * sqrt_abar).norm_squared())
        };
        let align_scalar = |y: &DVector<f64>| -> Result<f64> {
            let grad_c_logq = (y - c * sqrt_abar) * sqrt_abar;
            Ok(rho * embed_grad(y)?.dot(&grad_c_logq))
        };
        let lhs = fd_grad(&lhs_scalar, x_t)?;
        let rhs = fd_grad(&base_scalar, x_t)? + fd_grad(&align_scalar, x_t)?;
        residuals.push((lhs - rhs).norm());
    }

    let mut orders = Vec::new();
    for w in rho_values.windows(2) {
        let i = orders.len();
        let (r0, r1) = (residuals[i], residuals[i + 1]);
        if r0 > 0.0 && r1 > 0.0 && w[1] != 0.0 && w[0] != w[1] {
            orders.push((r0 / r1).log2() / (w[0] / w[1]).log2());
        } else {
            orders.push(f64::NAN);
        }
    }

    Ok(TheoremCheckReport {
        rho_values: rho_values.to_vec(),
        residual_norms: residuals,
        estimated_orders: orders,
        fd_step: FD_STEP,
        tool_version: TOOL_VERSION.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorBoundReport {
    /// `|E[g(x0) | x_t, c] - g(E[x0 | x_t, c])|`, Monte-Carlo estimate.
    pub lhs: f64,
    pub lhs_std_error: f64,
    pub lipschitz: f64,
    /// Mean deviation `E ||x0 - E[x0]||` of the conditional distribution.
    pub mean_deviation: f64,
    pub mean_deviation_std_error: f64,
    pub bound_satisfied: bool,
    pub n_mc: usize,
    /// Radius around the safe center on which the Lipschitz constant was
    /// maximized.
    pub lipschitz_region_radius: f64,
    pub tool_version: String,
}

/// Grid maximization of the gradient norm over a square region around
/// `center` with the given half-width.
pub fn lipschitz_grid(g: &dyn SafetyFn, center: &DVector<f64>, radius: f64, n: usize) -> Result<f64> {
    let dim = center.len();
    if dim != 2 {
        return Err(Error::InvalidArgument(
            "grid Lipschitz oracle is implemented for 2D".into(),
        ));
    }
    let mut max = 0.0f64;
    for i in 0..=n {
        for j in 0..=n {
            let x = DVector::from_vec(vec![
                center[0] - radius + 2.0 * radius * i as f64 / n as f64,
                center[1] - radius + 2.0 * radius * j as f64 / n as f64,
            ]);
            max = max.max(g.grad(&x)?.norm());
        }
    }
    Ok(max)
}

/// Verifies `|E[g(x0)] - g(E[x0])| <= L * m1` against the toy posterior
/// `q(x0 | x_t, c) = N(sqrt(abar) x_t + (1 - abar) c, (1 - abar) I)`.
pub fn taylor_bound_check(
    world: &ToyWorld,
    schedule: &NoiseSchedule,
    g: &dyn SafetyFn,
    x_t: &DVector<f64>,
    t: usize,
    n_mc: usize,
    seed: u64,
) -> Result<TaylorBoundReport> {
    if n_mc < 1000 {
        return Err(Error::InvalidArgument("n_mc must be >= 1000".into()));
    }
    let abar = schedule.alpha_bar(t)?;
    let mean = x_t * abar.sqrt() + &world.cond * (1.0 - abar);
    let std = (1.0 - abar).sqrt();
    let dim = world.dim;

    let lipschitz_region_radius = 6.0;
    let lipschitz = lipschitz_grid(g, &world.safe_center, lipschitz_region_radius, 600)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g_sum = 0.0;
    let mut g_sq = 0.0;
    let mut dev_sum = 0.0;
    let mut dev_sq = 0.0;
    for _ in 0..n_mc {
        let x0 = DVector::from_iterator(
            dim,
            (0..dim).map(|i| mean[i] + std * rng.sample::<f64, _>(StandardNormal)),
        );
        let gv = g.value(&x0)?;
        g_sum += gv;
        g_sq += gv * gv;
        let dv = (x0 - &mean).norm();
        dev_sum += dv;
        dev_sq += dv * dv;
    }
    let nf = n_mc as f64;
    let g_mean = g_sum / nf;
    let g_var = (g_sq / nf - g_mean * g_mean).max(0.0);
    let lhs_std_error = (g_var / nf).sqrt();
    let mean_deviation = dev_sum / nf;
    let dev_var = (dev_sq / nf - mean_deviation * mean_deviation).max(0.0);
    let mean_deviation_std_error = (dev_var / nf).sqrt();

    let lhs = (g_mean - g.value(&mean)?).abs();
    let combined_se = (lhs_std_error.powi(2) + (lipschitz * mean_deviation_std_error).powi(2)).sqrt();
    let bound_satisfied = lhs <= lipschitz * mean_deviation + 3.0 * combined_se;

    Ok(TaylorBoundReport {
        lhs,
        lhs_std_error,
        lipschitz,
        mean_deviation,
        mean_deviation_std_error,
        bound_satisfied,
        n_mc,
        lipschitz_region_radius,
        tool_version: TOOL_VERSION.into(),
    })
}

/// Fraction of samples with safety value at or above `level`.
pub fn safety_rate(samples: &SampleBatch, g: &dyn SafetyFn, level: f64) -> Result<f64> {
    let mut count = 0usize;
    for x in &samples.samples {
        if g.value(x)? >= level {
            count += 1;
        }
    }
    Ok(count as f64 / samples.samples.len() as f64)
}
