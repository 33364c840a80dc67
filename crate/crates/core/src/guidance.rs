//! Guided score functions: exact safe guidance, SDG, STG and a
//! negative-condition CFG baseline.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safety::{exact_safe_guidance, SafetyFn, SafetyKind, SAFETY_FLOOR};
use crate::schedule::NoiseSchedule;
use crate::score::{analytic_score, tweedie_denoise, ScoreModel, ToyWorld};

/// Degenerate-gradient cutoff for the normalized embedding step.
pub const GRAD_NORM_EPS: f64 = 1e-12;

/// STG knobs: update scale, update threshold on the unsafe score `-g`,
/// update-step ratio, and gradient normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StgConfig {
    pub rho: f64,
    pub tau: f64,
    pub gamma: f64,
    pub normalize_grad: bool,
}

impl Default for StgConfig {
    fn default() -> Self {
        Self {
            rho: 0.015,
            tau: f64::NEG_INFINITY,
            gamma: 1.0,
            normalize_grad: true,
        }
    }
}

impl StgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho < 0.0 {
            return Err(Error::InvalidArgument("rho must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument("gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Guidance-method selection for one sampler run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuidanceMethod {
    None,
    ExactSg,
    Sdg {
        safety: SafetyKind,
        #[serde(default)]
        stop_gradient_through_score: bool,
    },
    Stg {
        safety: SafetyKind,
        #[serde(flatten)]
        config: StgConfig,
    },
    CfgNegative {
        scale: f64,
        unsafe_cond: Vec<f64>,
    },
}

impl GuidanceMethod {
    pub fn label(&self) -> String {
        match self {
            GuidanceMethod::None => "none".into(),
            GuidanceMethod::ExactSg => "exact_sg".into(),
            GuidanceMethod::Sdg { safety, .. } => format!("sdg_{}", safety.label()),
            GuidanceMethod::Stg { safety, .. } => format!("stg_{}", safety.label()),
            GuidanceMethod::CfgNegative { .. } => "cfg_negative".into(),
        }
    }
}

/// Exact score of the safe conditional marginal for the toy world:
/// base analytic score plus the exact safe-guidance term.
pub fn sg_score(
    world: &ToyWorld,
    schedule: &NoiseSchedule,
    x_t: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    let base = analytic_score(schedule, x_t, &world.cond, t)?;
    let guide = exact_safe_guidance(world, schedule, x_t, t)?;
    Ok(base + guide)
}

/// Safe data guidance: base score plus the chain-rule gradient of
/// `log g` through the Tweedie map.
///
/// With `stop_gradient_through_score` the score inside the Tweedie map is
/// treated as constant in `x_t`, so the Jacobian collapses to
/// `I / sqrt(abar)`; otherwise the full Jacobian (including `ds/dx_t`) is
/// accumulated through the model's vector-Jacobian product.
pub fn sdg_score(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    g: &dyn SafetyFn,
    x_t: &DVector<f64>,
    c: &DVector<f64>,
    t: usize,
    stop_gradient_through_score: bool,
) -> Result<DVector<f64>> {
    let abar = schedule.alpha_bar(t)?;
    let base = model.score(x_t, c, t)?;
    let x0_hat = (x_t + &base * (1.0 - abar)) / abar.sqrt();
    let grad_log_g = {
        let val = g.value(&x0_hat)?.max(SAFETY_FLOOR);
        g.grad(&x0_hat)? / val
    };
    let guidance = if stop_gradient_through_score {
        &grad_log_g / abar.sqrt()
    } else {
        let (vjp_x, _) = model.vjp(x_t, c, t, &grad_log_g)?;
        (&grad_log_g + vjp_x * (1.0 - abar)) / abar.sqrt()
    };
    Ok(base + guidance)
}

/// Gradient of the time-dependent safety value with respect to the
/// embedding, plus the safety value itself at the shared Tweedie estimate.
pub fn stg_embedding_gradient(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    g: &dyn SafetyFn,
    x_t: &DVector<f64>,
    c: &DVector<f64>,
    t: usize,
) -> Result<(DVector<f64>, f64)> {
    let abar = schedule.alpha_bar(t)?;
    let x0_hat = tweedie_denoise(model, schedule, x_t, c, t)?;
    let g_value = g.value(&x0_hat)?;
    let cotangent = g.grad(&x0_hat)?;
    // d/dc g(Tweedie) = ((1-abar)/sqrt(abar)) * (ds/dc)^T grad_g
    let (_, vjp_c) = model.vjp(x_t, c, t, &cotangent)?;
    Ok((vjp_c * ((1.0 - abar) / abar.sqrt()), g_value))
}

/// Applies the scale and optional normalization to a raw embedding
/// gradient, returning the additive step.
pub fn stg_step(direction: &DVector<f64>, config: &StgConfig) -> DVector<f64> {
    if config.normalize_grad {
        let norm = direction.norm();
        if norm > GRAD_NORM_EPS {
            direction * (config.rho / norm)
        } else {
            DVector::zeros(direction.len())
        }
    } else {
        direction * config.rho
    }
}

/// One embedding update `c + rho * d`; the input embedding is not mutated,
/// the caller owns embedding state.
pub fn stg_update_embedding(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    g: &dyn SafetyFn,
    x_t: &DVector<f64>,
    c: &DVector<f64>,
    t: usize,
    config: &StgConfig,
) -> Result<DVector<f64>> {
    config.validate()?;
    let (direction, _) = stg_embedding_gradient(model, schedule, g, x_t, c, t)?;
    Ok(c + stg_step(&direction, config))
}

/// Update gate: true iff `t` lies in the middle window
/// `[(1 - gamma) T, gamma T]` and the unsafe score `-g` meets the
/// threshold `tau`.
pub fn stg_gate(t: usize, num_steps: usize, config: &StgConfig, g_value: f64) -> bool {
    let t = t as f64;
    let total = num_steps as f64;
    let lo = (1.0 - config.gamma) * total;
    let hi = config.gamma * total;
    t >= lo && t <= hi && -g_value >= config.tau
}

/// Classifier-free-guidance-style combination against an unsafe condition:
/// `s(x, c) + scale * (s(x, c) - s(x, c_unsafe))`.
pub fn cfg_negative_score(
    model: &dyn ScoreModel,
    x_t: &DVector<f64>,
    c: &DVector<f64>,
    c_unsafe: &DVector<f64>,
    t: usize,
    scale: f64,
) -> Result<DVector<f64>> {
    if c_unsafe.len() != c.len() {
        return Err(Error::DimensionMismatch {
            expected: c.len(),
            got: c_unsafe.len(),
        });
    }
    let cond = model.score(x_t, c, t)?;
    let uncond = model.score(x_t, c_unsafe, t)?;
    Ok(&cond + (cond.clone() - uncond) * scale)
}

/// Exponent of STG's implied safe probability for the toy world:
/// `rho * grad_c g_t(x_t, c)^T grad_c log q_t(x_t | c)` with the analytic
/// `grad_c log q_t = sqrt(abar) (x_t - sqrt(abar) c)`.
pub fn stg_alignment_diagnostic(
    world: &ToyWorld,
    schedule: &NoiseSchedule,
    g: &dyn SafetyFn,
    x_t: &DVector<f64>,
    t: usize,
    rho: f64,
) -> Result<f64> {
    let abar = schedule.alpha_bar(t)?;
    let model = crate::score::AnalyticScore::new(schedule, world.dim);
    let (grad_c_gt, _) = stg_embedding_gradient(&model, schedule, g, x_t, &world.cond, t)?;
    let grad_c_logq = (x_t - &world.cond * abar.sqrt()) * abar.sqrt();
    Ok(rho * grad_c_gt.dot(&grad_c_logq))
}
