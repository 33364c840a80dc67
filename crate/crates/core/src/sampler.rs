//! Reverse-diffusion sampling with pluggable guidance.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::guidance::{
    cfg_negative_score, sdg_score, sg_score, stg_embedding_gradient, stg_gate, stg_step,
    GuidanceMethod,
};
use crate::safety::SafetyFn;
use crate::schedule::NoiseSchedule;
use crate::score::{ScoreModel, ToyWorld};

/// Reverse-chain flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic reverse chain with posterior mean from the score and
    /// reverse variance `sigma_t^2 = beta_t`.
    AncestralDdpm,
    /// The deterministic update `x + beta/2 * (x + s)`.
    Algorithm1Deterministic,
    /// Deterministic DDIM over an evenly spaced timestep subsequence.
    Ddim { num_inference_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    #[serde(flatten)]
    pub kind: SamplerKind,
    pub seed: u64,
}

/// One recorded step of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub x: Vec<f64>,
    pub c: Vec<f64>,
}

/// Final samples plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub dim: usize,
    pub samples: Vec<DVector<f64>>,
    pub method: GuidanceMethod,
    pub seed: u64,
    pub trajectories: Option<Vec<Vec<TrajectoryPoint>>>,
}

/// Per-chain RNG stream: every chain owns stream `chain_index` of a
/// ChaCha generator keyed by the master seed, so streams are reproducible
/// from `(seed, chain)` alone. Draw order within a chain is the prior
/// (`dim` normals) followed by `dim` normals per stochastic step.
pub fn chain_rng(master_seed: u64, chain_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(chain_index);
    rng
}

fn draw_standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn check_dims(expected: usize, v: &DVector<f64>) -> Result<()> {
    if v.len() != expected {
        Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        })
    } else {
        Ok(())
    }
}

/// One stochastic reverse step:
/// `x_{t-1} = (x_t + beta_t s) / sqrt(1 - beta_t) + sqrt(beta_t) noise`.
pub fn reverse_step_ancestral(
    score: &DVector<f64>,
    x_t: &DVector<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dims(x_t.len(), score)?;
    check_dims(x_t.len(), noise)?;
    let beta = schedule.beta(t)?;
    let mean = (x_t + score * beta) / (1.0 - beta).sqrt();
    Ok(mean + noise * beta.sqrt())
}

/// One deterministic update `x_{t-1} = x_t + beta_t/2 * (x_t + s)`.
pub fn reverse_step_alg1(
    score: &DVector<f64>,
    x_t: &DVector<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    check_dims(x_t.len(), score)?;
    let beta = schedule.beta(t)?;
    Ok(x_t + (x_t + score) * (0.5 * beta))
}

/// One deterministic DDIM transition from `t` to `t_prev < t`.
pub fn reverse_step_ddim(
    score: &DVector<f64>,
    x_t: &DVector<f64>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    check_dims(x_t.len(), score)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "DDIM requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let abar = schedule.alpha_bar(t)?;
    let abar_prev = schedule.alpha_bar_or_one(t_prev)?;
    let x0_hat = (x_t + score * (1.0 - abar)) / abar.sqrt();
    let eps_hat = -score * (1.0 - abar).sqrt();
    Ok(x0_hat * abar_prev.sqrt() + eps_hat * (1.0 - abar_prev).sqrt())
}

/// Guided score evaluation; for STG this may advance the chain-owned
/// embedding before the score call.
fn guided_score(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    world: &ToyWorld,
    method: &GuidanceMethod,
    safety: Option<&dyn SafetyFn>,
    x: &DVector<f64>,
    c: &mut DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    match method {
        GuidanceMethod::None => model.score(x, c, t),
        GuidanceMethod::ExactSg => {
            if !model.is_exact() {
                return Err(Error::ExactGuidanceUnavailable);
            }
            sg_score(world, schedule, x, t)
        }
        GuidanceMethod::Sdg {
            stop_gradient_through_score,
            ..
        } => sdg_score(
            model,
            schedule,
            safety.expect("safety function present for SDG"),
            x,
            c,
            t,
            *stop_gradient_through_score,
        ),
        GuidanceMethod::Stg { config, .. } => {
            let g = safety.expect("safety function present for STG");
            let total = schedule.num_steps() as f64;
            let tf = t as f64;
            // Window check first; the safety value is only needed for the
            // threshold, and both reuse one Tweedie estimate.
            if tf >= (1.0 - config.gamma) * total && tf <= config.gamma * total {
                let (direction, g_value) = stg_embedding_gradient(model, schedule, g, x, c, t)?;
                if stg_gate(t, schedule.num_steps(), config, g_value) {
                    *c += stg_step(&direction, config);
                }
            }
            model.score(x, c, t)
        }
        GuidanceMethod::CfgNegative { scale, unsafe_cond } => {
            let c_unsafe = DVector::from_vec(unsafe_cond.clone());
            cfg_negative_score(model, x, c, &c_unsafe, t, *scale)
        }
    }
}

fn run_chain(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    world: &ToyWorld,
    method: &GuidanceMethod,
    safety: Option<&dyn SafetyFn>,
    spec: &SamplerSpec,
    chain: usize,
    record: bool,
) -> Result<(DVector<f64>, Option<Vec<TrajectoryPoint>>)> {
    let wrap = |t: usize| move |e: Error| Error::Chain {
        chain,
        t,
        source: Box::new(e),
    };
    let dim = world.dim;
    let num_steps = schedule.num_steps();
    let mut rng = chain_rng(spec.seed, chain as u64);
    let mut x = draw_standard_normal(&mut rng, dim);
    let mut c = world.cond.clone();
    let mut trajectory = record.then(Vec::new);
    let mut record_point = |t: usize, x: &DVector<f64>, c: &DVector<f64>| {
        if let Some(traj) = trajectory.as_mut() {
            traj.push(TrajectoryPoint {
                t,
                x: x.iter().cloned().collect(),
                c: c.iter().cloned().collect(),
            });
        }
    };

    match spec.kind {
        SamplerKind::AncestralDdpm => {
            for t in (1..=num_steps).rev() {
                record_point(t, &x, &c);
                let s = guided_score(model, schedule, world, method, safety, &x, &mut c, t)
                    .map_err(wrap(t))?;
                let noise = if t > 1 {
                    draw_standard_normal(&mut rng, dim)
                } else {
                    DVector::zeros(dim)
                };
                x = reverse_step_ancestral(&s, &x, t, schedule, &noise).map_err(wrap(t))?;
            }
        }
        SamplerKind::Algorithm1Deterministic => {
            for t in (1..=num_steps).rev() {
                record_point(t, &x, &c);
                let s = guided_score(model, schedule, world, method, safety, &x, &mut c, t)
                    .map_err(wrap(t))?;
                x = reverse_step_alg1(&s, &x, t, schedule).map_err(wrap(t))?;
            }
        }
        SamplerKind::Ddim {
            num_inference_steps,
        } => {
            if num_inference_steps == 0 || num_steps % num_inference_steps != 0 {
                return Err(Error::InvalidArgument(format!(
                    "DDIM steps {num_inference_steps} must evenly divide {num_steps}"
                )));
            }
            let stride = num_steps / num_inference_steps;
            let mut t = num_steps;
            while t > 0 {
                record_point(t, &x, &c);
                let t_prev = t - stride;
                let s = guided_score(model, schedule, world, method, safety, &x, &mut c, t)
                    .map_err(wrap(t))?;
                x = reverse_step_ddim(&s, &x, t, t_prev, schedule).map_err(wrap(t))?;
                t = t_prev;
            }
        }
    }
    record_point(0, &x, &c);
    Ok((x, trajectory))
}

/// Runs `n_samples` independent chains and gathers them ordered by chain
/// index.
pub fn sample_chain(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    world: &ToyWorld,
    method: &GuidanceMethod,
    spec: &SamplerSpec,
    n_samples: usize,
    record_trajectories: bool,
) -> Result<SampleBatch> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    if model.dim() != world.dim {
        return Err(Error::DimensionMismatch {
            expected: world.dim,
            got: model.dim(),
        });
    }
    if let GuidanceMethod::Stg { config, .. } = method {
        config.validate()?;
    }
    let safety: Option<Box<dyn SafetyFn>> = match method {
        GuidanceMethod::Sdg { safety, .. } | GuidanceMethod::Stg { safety, .. } => {
            Some(safety.build(&world.safe_center))
        }
        _ => None,
    };
    let safety_ref = safety.as_deref();

    let results: Vec<_> = (0..n_samples)
        .into_par_iter()
        .map(|chain| {
            run_chain(
                model,
                schedule,
                world,
                method,
                safety_ref,
                spec,
                chain,
                record_trajectories,
            )
        })
        .collect();

    let mut samples = Vec::with_capacity(n_samples);
    let mut trajectories = record_trajectories.then(|| Vec::with_capacity(n_samples));
    for r in results {
        let (x, traj) = r?;
        for v in x.iter() {
            if !v.is_finite() {
                return Err(Error::Estimation("non-finite sample produced".into()));
            }
        }
        samples.push(x);
        if let (Some(ts), Some(t)) = (trajectories.as_mut(), traj) {
            ts.push(t);
        }
    }
    Ok(SampleBatch {
        dim: world.dim,
        samples,
        method: method.clone(),
        seed: spec.seed,
        trajectories,
    })
}

impl SampleBatch {
    /// CSV export: header `chain,x0,..`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "chain")?;
        for i in 0..self.dim {
            write!(out, ",x{i}")?;
        }
        writeln!(out)?;
        for (chain, x) in self.samples.iter().enumerate() {
            write!(out, "{chain}")?;
            for v in x.iter() {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// Trajectory export as JSON lines, one record per `(chain, t)`.
    pub fn write_trajectories_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let Some(trajs) = &self.trajectories else {
            return Err(Error::Estimation("no trajectories recorded".into()));
        };
        #[derive(Serialize)]
        struct Record<'a> {
            chain: usize,
            t: usize,
            x: &'a [f64],
            c: &'a [f64],
        }
        for (chain, traj) in trajs.iter().enumerate() {
            for p in traj {
                let rec = Record {
                    chain,
                    t: p.t,
                    x: &p.x,
                    c: &p.c,
                };
                serde_json::to_writer(&mut out, &rec)
                    .map_err(|e| Error::Estimation(e.to_string()))?;
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for x in &self.samples {
            m += x;
        }
        m / self.samples.len() as f64
    }

    pub fn covariance(&self) -> nalgebra::DMatrix<f64> {
        let mean = self.mean();
        let mut cov = nalgebra::DMatrix::zeros(self.dim, self.dim);
        for x in &self.samples {
            let d = x - &mean;
            cov += &d * d.transpose();
        }
        cov / self.samples.len() as f64
    }
}
