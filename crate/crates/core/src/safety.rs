//! Clean-sample safety functions and the closed-form safe posterior.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::{tweedie_denoise, ScoreModel, ToyWorld};

/// Floor applied to safety values before any logarithm downstream; the
/// quartic bump underflows double precision in the far field.
pub const SAFETY_FLOOR: f64 = 1e-12;

/// A scalar safety evaluator `g(x0)` with analytic gradient.
///
/// This is the extension point for non-toy safety functions; anything that
/// scores a clean sample and exposes a gradient slots in here.
pub trait SafetyFn: Sync {
    fn value(&self, x0: &DVector<f64>) -> Result<f64>;
    fn grad(&self, x0: &DVector<f64>) -> Result<DVector<f64>>;

    /// `grad(log g)` with the value clamped at [`SAFETY_FLOOR`].
    fn grad_log(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.value(x0)?.max(SAFETY_FLOOR);
        Ok(self.grad(x0)? / g)
    }
}

fn check_dims(a: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
    if a.len() != b.len() {
        Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        })
    } else {
        Ok(())
    }
}

/// The ideal safety function `exp(-||x0 - mu||^2 / 2)`, proportional to
/// the true safe probability.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSafety {
    pub center: DVector<f64>,
}

impl SafetyFn for GaussianSafety {
    fn value(&self, x0: &DVector<f64>) -> Result<f64> {
        check_dims(&self.center, x0)?;
        Ok((-0.5 * (x0 - &self.center).norm_squared()).exp())
    }

    fn grad(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.value(x0)?;
        Ok(-(x0 - &self.center) * g)
    }
}

/// The approximated safety function `exp(-||x0 - mu||^4 / 2)`: same argmax
/// and relative ordering as [`GaussianSafety`], different shape.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarticSafety {
    pub center: DVector<f64>,
}

impl SafetyFn for QuarticSafety {
    fn value(&self, x0: &DVector<f64>) -> Result<f64> {
        check_dims(&self.center, x0)?;
        let r2 = (x0 - &self.center).norm_squared();
        Ok((-0.5 * r2 * r2).exp())
    }

    fn grad(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        check_dims(&self.center, x0)?;
        let d = x0 - &self.center;
        let r2 = d.norm_squared();
        let g = (-0.5 * r2 * r2).exp();
        Ok(d * (-2.0 * r2 * g))
    }
}

/// The ideal safety function value `g*(x0) = exp(-||x0 - mu||^2 / 2)`.
pub fn g_star(x0: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    GaussianSafety { center: mu.clone() }.value(x0)
}

/// The approximated safety function value `exp(-||x0 - mu||^4 / 2)`.
pub fn g_tilde(x0: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    QuarticSafety { center: mu.clone() }.value(x0)
}

/// Safety-function selection as it appears in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyKind {
    GStar,
    GTilde,
}

impl SafetyKind {
    pub fn build(&self, center: &DVector<f64>) -> Box<dyn SafetyFn> {
        match self {
            SafetyKind::GStar => Box::new(GaussianSafety {
                center: center.clone(),
            }),
            SafetyKind::GTilde => Box::new(QuarticSafety {
                center: center.clone(),
            }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SafetyKind::GStar => "g_star",
            SafetyKind::GTilde => "g_tilde",
        }
    }
}

/// Expected safety of the final denoised output, realized through the
/// Tweedie estimate: `g(E[x0 | x_t, c])`.
pub fn time_dependent_safety(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    g: &dyn SafetyFn,
    x_t: &DVector<f64>,
    c: &DVector<f64>,
    t: usize,
) -> Result<f64> {
    let x0_hat = tweedie_denoise(model, schedule, x_t, c, t)?;
    g.value(&x0_hat)
}

/// The closed-form safe conditional `N((c + mu) / 2, I / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafePosterior {
    pub mean: DVector<f64>,
    pub covariance_scale: f64,
}

pub fn safe_posterior(world: &ToyWorld) -> SafePosterior {
    SafePosterior {
        mean: (&world.cond + &world.safe_center) * 0.5,
        covariance_scale: 0.5,
    }
}

/// Exact safe-guidance term for the toy world.
///
/// Noising the safe conditional `N((c + mu)/2, I/2)` gives a marginal
/// `N(sqrt(abar) (c + mu)/2, (1 - abar/2) I)`, so the guidance is the
/// difference of the safe-marginal score and the base score:
/// `-(x_t - sqrt(abar)(c + mu)/2) / (1 - abar/2) + (x_t - sqrt(abar) c)`.
pub fn exact_safe_guidance(
    world: &ToyWorld,
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    if x_t.len() != world.dim {
        return Err(Error::DimensionMismatch {
            expected: world.dim,
            got: x_t.len(),
        });
    }
    let abar = schedule.alpha_bar(t)?;
    let safe_mean = (&world.cond + &world.safe_center) * (0.5 * abar.sqrt());
    let safe_var = 1.0 - abar / 2.0;
    Ok(-(x_t - safe_mean) / safe_var + (x_t - &world.cond * abar.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use crate::score::AnalyticScore;

    fn mu() -> DVector<f64> {
        DVector::from_vec(vec![1.0, 2.0])
    }

    #[test]
    fn g_star_values() {
        let m = mu();
        assert_relative_eq!(g_star(&m, &m).unwrap(), 1.0);
        // ||x - mu||^2 = 2
        let x = DVector::from_vec(vec![2.0, 3.0]);
        assert_relative_eq!(g_star(&x, &m).unwrap(), (-1.0f64).exp(), epsilon = 1e-12);
        assert!(g_star(&DVector::from_vec(vec![1.0]), &m).is_err());
    }

    #[test]
    fn g_tilde_values() {
        let m = mu();
        assert_relative_eq!(g_tilde(&m, &m).unwrap(), 1.0);
        // ||x - mu|| = 1
        let x = DVector::from_vec(vec![1.0, 3.0]);
        assert_relative_eq!(g_tilde(&x, &m).unwrap(), (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = mu();
        let fns: Vec<Box<dyn SafetyFn>> = vec![
            Box::new(GaussianSafety { center: m.clone() }),
            Box::new(QuarticSafety { center: m.clone() }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for g in &fns {
            for _ in 0..100 {
                let x = DVector::from_iterator(2, (0..2).map(|_| rng.gen_range(-1.0..3.0)));
                let grad = g.grad(&x).unwrap();
                for i in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (g.value(&xp).unwrap() - g.value(&xm).unwrap()) / (2.0 * h);
                    let denom = fd.abs().max(grad[i].abs()).max(1e-9);
                    assert!((fd - grad[i]).abs() / denom < 1e-6);
                }
            }
        }
    }

    #[test]
    fn order_preservation_on_random_pairs() {
        let m = mu();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let a = DVector::from_iterator(2, (0..2).map(|_| rng.gen_range(-2.0..4.0)));
            let b = DVector::from_iterator(2, (0..2).map(|_| rng.gen_range(-2.0..4.0)));
            let ds = g_star(&a, &m).unwrap() - g_star(&b, &m).unwrap();
            let dt = g_tilde(&a, &m).unwrap() - g_tilde(&b, &m).unwrap();
            assert!(
                ds.signum() == dt.signum() || ds == 0.0 || dt == 0.0,
                "ordering violated at {a:?} {b:?}"
            );
        }
    }

    #[test]
    fn time_dependent_safety_at_zero_noise() {
        let schedule = NoiseSchedule::linear(1, 1e-13, 1e-13).unwrap();
        let model = AnalyticScore::new(&schedule, 2);
        let m = mu();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        for g in [
            Box::new(GaussianSafety { center: m.clone() }) as Box<dyn SafetyFn>,
            Box::new(QuarticSafety { center: m.clone() }),
        ] {
            let v = time_dependent_safety(&model, &schedule, g.as_ref(), &m, &c, 1).unwrap();
            assert_relative_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn time_dependent_safety_reduced_form() {
        // abar = 0.25: Tweedie estimate of (2, 0) is (1.75, 0), so the value
        // is exp(-(0.75^2 + 2^2) / 2).
        let schedule = NoiseSchedule::linear(1, 0.75, 0.75).unwrap();
        let model = AnalyticScore::new(&schedule, 2);
        let g = GaussianSafety { center: mu() };
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let x = DVector::from_vec(vec![2.0, 0.0]);
        let v = time_dependent_safety(&model, &schedule, &g, &x, &c, 1).unwrap();
        assert_relative_eq!(v, (-2.28125f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn time_dependent_safety_close_to_mc_expectation() {
        // The Tweedie form approximates E[g(x0) | x_t, c]; the gap is the
        // first-order Taylor error, so compare loosely.
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.2).unwrap();
        let model = AnalyticScore::new(&schedule, 2);
        let g = GaussianSafety { center: mu() };
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let x = DVector::from_vec(vec![1.5, 1.0]);
        let t = 30;
        let abar = schedule.alpha_bar(t).unwrap();
        let mean = &x * abar.sqrt() + &c * (1.0 - abar);
        let std = (1.0 - abar).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let mc: f64 = (0..n)
            .map(|_| {
                let x0 = DVector::from_iterator(
                    2,
                    (0..2).map(|i| mean[i] + std * rng.sample::<f64, _>(StandardNormal)),
                );
                g.value(&x0).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        let approx_v = time_dependent_safety(&model, &schedule, &g, &x, &c, t).unwrap();
        // Bounded by L * m1 (checked rigorously in eval); generous here.
        assert!((approx_v - mc).abs() < 0.1, "approx {approx_v} vs mc {mc}");
    }

    #[test]
    fn time_dependent_safety_monotone_toward_safe_center() {
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.2).unwrap();
        let model = AnalyticScore::new(&schedule, 2);
        let g = GaussianSafety { center: mu() };
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let t = 40;
        let abar = schedule.alpha_bar(t).unwrap();
        let target = mu() * abar.sqrt();
        let start = DVector::from_vec(vec![-2.0, -1.0]);
        let mut prev = -1.0;
        for k in 0..=20 {
            let lambda = k as f64 / 20.0;
            let x = &start + (&target - &start) * lambda;
            let v = time_dependent_safety(&model, &schedule, &g, &x, &c, t).unwrap();
            assert!(v >= prev - 1e-12, "not monotone at step {k}");
            prev = v;
        }
    }

    #[test]
    fn safe_posterior_closed_form() {
        let world = ToyWorld::default_2d();
        let p = safe_posterior(&world);
        assert_relative_eq!(p.mean[0], 1.0);
        assert_relative_eq!(p.mean[1], 1.0);
        assert_relative_eq!(p.covariance_scale, 0.5);

        let degenerate = ToyWorld::new(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap();
        let p = safe_posterior(&degenerate);
        assert_relative_eq!(p.mean, degenerate.safe_center);
    }

    #[test]
    fn safe_posterior_matches_product_of_gaussians() {
        // Completing the square in N(x; c, I) * exp(-||x - mu||^2 / 2):
        // precision 2I, mean (c + mu) / 2.
        let world = ToyWorld::new(vec![0.3, -1.2], vec![2.0, 0.7]).unwrap();
        let p = safe_posterior(&world);
        let precision = 1.0 + 1.0;
        let mean = (&world.cond * 1.0 + &world.safe_center * 1.0) / precision;
        assert_relative_eq!(p.mean, mean, epsilon = 1e-14);
        assert_relative_eq!(p.covariance_scale, 1.0 / precision, epsilon = 1e-14);
    }

    #[test]
    fn exact_guidance_limits() {
        let world = ToyWorld::default_2d();
        // abar -> 1: guidance converges to grad log g* = mu - x.
        let schedule = NoiseSchedule::linear(1, 1e-9, 1e-9).unwrap();
        for xy in [[0.0, 0.0], [2.0, -1.0], [4.0, 3.0], [-3.0, 5.0]] {
            let x = DVector::from_vec(xy.to_vec());
            let guide = exact_safe_guidance(&world, &schedule, &x, 1).unwrap();
            let oracle = &world.safe_center - &x;
            assert!((guide - oracle).norm() < 1e-6);
        }
    }

    #[test]
    fn exact_guidance_at_safe_marginal_mode() {
        let world = ToyWorld::default_2d();
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.2).unwrap();
        let t = 35;
        let abar = schedule.alpha_bar(t).unwrap();
        let x = (&world.cond + &world.safe_center) * (0.5 * abar.sqrt());
        let guide = exact_safe_guidance(&world, &schedule, &x, t).unwrap();
        let expected = (&world.safe_center - &world.cond) * (0.5 * abar.sqrt());
        assert!((guide - expected).norm() < 1e-12);
    }

    #[test]
    fn exact_guidance_matches_mc_log_expectation_gradient() {
        // q_t(o=1 | x_t, c) = E[g*(x0) | x_t, c] with the posterior
        // N(sqrt(abar) x_t + (1-abar) c, (1-abar) I); finite differences of
        // its MC log estimate with common random numbers.
        let world = ToyWorld::default_2d();
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.2).unwrap();
        let g = GaussianSafety {
            center: world.safe_center.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 400_000;
        let noise: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_iterator(2, (0..2).map(|_| rng.sample::<f64, _>(StandardNormal))))
            .collect();
        for (t, xy) in [(30usize, [1.4, 0.8]), (70, [0.2, -0.4])] {
            let x = DVector::from_vec(xy.to_vec());
            let abar = schedule.alpha_bar(t).unwrap();
            let std = (1.0 - abar).sqrt();
            let log_e = |xt: &DVector<f64>| {
                let mean = xt * abar.sqrt() + &world.cond * (1.0 - abar);
                (noise
                    .iter()
                    .map(|z| g.value(&(&mean + z * std)).unwrap())
                    .sum::<f64>()
                    / n as f64)
                    .ln()
            };
            let guide = exact_safe_guidance(&world, &schedule, &x, t).unwrap();
            let h = 1e-3;
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (log_e(&xp) - log_e(&xm)) / (2.0 * h);
                assert!(
                    (fd - guide[i]).abs() <= 0.03 * guide[i].abs().max(1.0),
                    "t={t} i={i}: fd {fd} vs guide {}",
                    guide[i]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn safety_values_stay_in_unit_interval(
            x0 in -10.0f64..10.0, x1 in -10.0f64..10.0,
        ) {
            let m = mu();
            let x = DVector::from_vec(vec![x0, x1]);
            let a = g_star(&x, &m).unwrap();
            let b = g_tilde(&x, &m).unwrap();
            prop_assert!(a > 0.0 && a <= 1.0);
            prop_assert!(b >= 0.0 && b <= 1.0);
        }
    }
}
