//! Conditional score models for the Gaussian toy world.
//!
//! The data law is `q(x0 | c) = N(c, I)`, so the forward marginal at
//! timestep `t` is `N(sqrt(abar_t) * c, I)` and its score has the closed
//! form `-(x_t - sqrt(abar_t) * c)`. A learned alternative lives in
//! [`crate::mlp`]; both are used through the [`ScoreModel`] trait.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// The analytically tractable world: unit-covariance Gaussian data centered
/// on the condition, plus the center of the safe region.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub dim: usize,
    pub cond: DVector<f64>,
    pub safe_center: DVector<f64>,
}

impl ToyWorld {
    pub fn new(cond: Vec<f64>, safe_center: Vec<f64>) -> Result<Self> {
        if cond.is_empty() {
            return Err(Error::InvalidArgument("condition must be non-empty".into()));
        }
        if cond.len() != safe_center.len() {
            return Err(Error::DimensionMismatch {
                expected: cond.len(),
                got: safe_center.len(),
            });
        }
        Ok(Self {
            dim: cond.len(),
            cond: DVector::from_vec(cond),
            safe_center: DVector::from_vec(safe_center),
        })
    }

    /// The default 2D setup: condition (1, 0), safe center (1, 2).
    pub fn default_2d() -> Self {
        Self::new(vec![1.0, 0.0], vec![1.0, 2.0]).unwrap()
    }
}

/// Serialized world description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub cond: Vec<f64>,
    pub safe_center: Vec<f64>,
}

impl WorldSpec {
    pub fn build(&self) -> Result<ToyWorld> {
        ToyWorld::new(self.cond.clone(), self.safe_center.clone())
    }
}

/// A conditional score function `s(x_t, c, t)` with reverse-mode input
/// gradients.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    fn score(&self, x_t: &DVector<f64>, c: &DVector<f64>, t: usize) -> Result<DVector<f64>>;

    /// Vector-Jacobian products of the score with respect to both inputs:
    /// returns `(cot^T ds/dx_t, cot^T ds/dc)`.
    fn vjp(
        &self,
        x_t: &DVector<f64>,
        c: &DVector<f64>,
        t: usize,
        cotangent: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)>;

    /// True only for the closed-form toy score, which exact safe guidance
    /// requires.
    fn is_exact(&self) -> bool {
        false
    }
}

fn check_dim(expected: usize, v: &DVector<f64>) -> Result<()> {
    if v.len() != expected {
        Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        })
    } else {
        Ok(())
    }
}

/// The exact score of the forward marginal: `-(x_t - sqrt(abar_t) * c)`.
pub fn analytic_score(
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    c: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    check_dim(c.len(), x_t)?;
    let abar = schedule.alpha_bar(t)?;
    Ok(-(x_t - c * abar.sqrt()))
}

/// Closed-form score model over a [`NoiseSchedule`].
#[derive(Debug, Clone)]
pub struct AnalyticScore<'a> {
    pub schedule: &'a NoiseSchedule,
    pub dim: usize,
}

impl<'a> AnalyticScore<'a> {
    pub fn new(schedule: &'a NoiseSchedule, dim: usize) -> Self {
        Self { schedule, dim }
    }
}

impl ScoreModel for AnalyticScore<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x_t: &DVector<f64>, c: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        check_dim(self.dim, x_t)?;
        check_dim(self.dim, c)?;
        analytic_score(self.schedule, x_t, c, t)
    }

    fn vjp(
        &self,
        x_t: &DVector<f64>,
        c: &DVector<f64>,
        t: usize,
        cotangent: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim(self.dim, x_t)?;
        check_dim(self.dim, c)?;
        check_dim(self.dim, cotangent)?;
        let abar = self.schedule.alpha_bar(t)?;
        // ds/dx = -I, ds/dc = sqrt(abar) * I.
        Ok((-cotangent, cotangent * abar.sqrt()))
    }

    fn is_exact(&self) -> bool {
        true
    }
}

/// Tweedie's posterior-mean estimate:
/// `E[x0 | x_t, c] = (x_t + (1 - abar_t) * s(x_t, c, t)) / sqrt(abar_t)`.
pub fn tweedie_denoise(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    c: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    let abar = schedule.alpha_bar(t)?;
    let s = model.score(x_t, c, t)?;
    Ok((x_t + s * (1.0 - abar)) / abar.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.2).unwrap()
    }

    #[test]
    fn score_vanishes_at_the_mode() {
        let s = schedule();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let abar = s.alpha_bar(40).unwrap();
        let x = &c * abar.sqrt();
        let out = analytic_score(&s, &x, &c, 40).unwrap();
        assert_relative_eq!(out.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn score_direct_substitution() {
        // abar = 0.9 at t = 1 of a single-step schedule with beta = 0.1.
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let x = DVector::from_vec(vec![2.0, 1.0]);
        let out = analytic_score(&s, &x, &c, 1).unwrap();
        assert_relative_eq!(out[0], -(2.0 - 0.9f64.sqrt()), epsilon = 1e-14);
        assert_relative_eq!(out[1], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn score_rejects_dimension_mismatch() {
        let s = schedule();
        let model = AnalyticScore::new(&s, 2);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let x = DVector::from_vec(vec![1.0]);
        assert!(model.score(&x, &c, 10).is_err());
    }

    /// Monte-Carlo estimate of `log q_t(x_t | c)` through the forward
    /// noising kernel: `q_t(x_t|c) = E_{x0 ~ N(c, I)}[N(x_t; sqrt(abar) x0, (1-abar) I)]`.
    fn mc_log_density(
        schedule: &NoiseSchedule,
        x_t: &DVector<f64>,
        _c: &DVector<f64>,
        t: usize,
        x0s: &[DVector<f64>],
    ) -> f64 {
        let abar = schedule.alpha_bar(t).unwrap();
        let var = 1.0 - abar;
        let dim = x_t.len() as f64;
        let log_norm = -0.5 * dim * (2.0 * std::f64::consts::PI * var).ln();
        // log-mean-exp over kernel log-densities
        let logs: Vec<f64> = x0s
            .iter()
            .map(|x0| {
                let diff = x_t - x0 * abar.sqrt();
                log_norm - 0.5 * diff.norm_squared() / var
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + (logs.iter().map(|l| (l - max).exp()).sum::<f64>() / logs.len() as f64).ln()
    }

    #[test]
    fn score_matches_mc_density_finite_differences() {
        let s = schedule();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0s: Vec<DVector<f64>> = (0..200_000)
            .map(|_| {
                DVector::from_iterator(2, (0..2).map(|i| c[i] + rng.sample::<f64, _>(StandardNormal)))
            })
            .collect();
        for (t, xt) in [(50usize, vec![0.8, 0.4]), (80, vec![-0.3, 0.6])] {
            let x = DVector::from_vec(xt);
            let exact = analytic_score(&s, &x, &c, t).unwrap();
            let h = 1e-3;
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (mc_log_density(&s, &xp, &c, t, &x0s)
                    - mc_log_density(&s, &xm, &c, t, &x0s))
                    / (2.0 * h);
                assert!(
                    (fd - exact[i]).abs() <= 0.02 * exact[i].abs().max(1.0),
                    "t={t} i={i}: fd {fd} vs exact {}",
                    exact[i]
                );
            }
        }
    }

    #[test]
    fn tweedie_identity_at_zero_noise() {
        // Tiny beta so abar is essentially 1.
        let s = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let model = AnalyticScore::new(&s, 2);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let x = DVector::from_vec(vec![0.7, -0.2]);
        let out = tweedie_denoise(&model, &s, &x, &c, 1).unwrap();
        assert_relative_eq!(out, x, epsilon = 1e-10);
    }

    #[test]
    fn tweedie_reduced_closed_form() {
        // With the analytic score the estimate reduces to
        // sqrt(abar) x_t + (1 - abar) c; abar = 0.25 here.
        let s = NoiseSchedule::linear(1, 0.75, 0.75).unwrap();
        let model = AnalyticScore::new(&s, 2);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let x = DVector::from_vec(vec![2.0, 0.0]);
        let out = tweedie_denoise(&model, &s, &x, &c, 1).unwrap();
        assert_relative_eq!(out[0], 1.75, epsilon = 1e-14);
        assert_relative_eq!(out[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn tweedie_closed_form_identity_on_random_inputs() {
        let s = schedule();
        let model = AnalyticScore::new(&s, 2);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = rng.gen_range(1..=100);
            let abar = s.alpha_bar(t).unwrap();
            let x =
                DVector::from_iterator(2, (0..2).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0));
            let out = tweedie_denoise(&model, &s, &x, &c, t).unwrap();
            let closed = &x * abar.sqrt() + &c * (1.0 - abar);
            assert!((out - closed).norm() < 1e-12);
        }
    }

    #[test]
    fn tweedie_matches_importance_weighted_posterior_mean() {
        let s = schedule();
        let model = AnalyticScore::new(&s, 2);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (t, xt) in [(40usize, vec![1.2, -0.5]), (85, vec![0.1, 0.9])] {
            let x = DVector::from_vec(xt);
            let abar = s.alpha_bar(t).unwrap();
            let var = 1.0 - abar;
            let n = 200_000;
            let mut wsum = 0.0;
            let mut mean = DVector::zeros(2);
            let mut draws = Vec::with_capacity(n);
            for _ in 0..n {
                let x0 = DVector::from_iterator(
                    2,
                    (0..2).map(|i| c[i] + rng.sample::<f64, _>(StandardNormal)),
                );
                let diff = &x - &x0 * abar.sqrt();
                let w = (-0.5 * diff.norm_squared() / var).exp();
                wsum += w;
                mean += &x0 * w;
                draws.push((x0, w));
            }
            mean /= wsum;
            // Weighted standard error per component.
            let mut se = DVector::zeros(2);
            for (x0, w) in &draws {
                let d = x0 - &mean;
                se += d.component_mul(&d) * (w * w);
            }
            let se = se.map(|v: f64| v.sqrt() / wsum);
            let exact = tweedie_denoise(&model, &s, &x, &c, t).unwrap();
            for i in 0..2 {
                assert!(
                    (exact[i] - mean[i]).abs() <= 3.0 * se[i].max(1e-6),
                    "t={t} i={i}: tweedie {} vs mc {} (se {})",
                    exact[i],
                    mean[i],
                    se[i]
                );
            }
        }
    }

    #[test]
    fn forward_marginal_moments() {
        let s = schedule();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = 60;
        let abar = s.alpha_bar(t).unwrap();
        let n = 20_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let x0 =
                DVector::from_iterator(2, (0..2).map(|i| c[i] + rng.sample::<f64, _>(StandardNormal)));
            let eps = DVector::from_iterator(2, (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)));
            samples.push(&x0 * abar.sqrt() + eps * (1.0 - abar).sqrt());
        }
        let mean = samples.iter().sum::<DVector<f64>>() / n as f64;
        let se = (1.0 / n as f64).sqrt(); // marginal variance is exactly 1
        for i in 0..2 {
            assert!((mean[i] - abar.sqrt() * c[i]).abs() < 4.0 * se);
        }
        let mut cov = nalgebra::DMatrix::zeros(2, 2);
        for x in &samples {
            let d = x - &mean;
            cov += &d * d.transpose();
        }
        cov /= n as f64;
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - target).abs() < 0.1);
            }
        }
    }
}
