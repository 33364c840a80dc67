//! Experiment orchestration: config-driven runs, the five-panel toy
//! reproduction preset, and the self-check suites.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ScoreSource};
use crate::error::{Error, Result};
use crate::eval::{self, kl_gaussian_fit, taylor_bound_check, theorem1_residual};
use crate::guidance::{sdg_score, GuidanceMethod, StgConfig};
use crate::mlp::MlpScoreNet;
use crate::plot::scatter_svg;
use crate::safety::{safe_posterior, GaussianSafety, QuarticSafety, SafetyFn, SafetyKind};
use crate::sampler::{sample_chain, SamplerKind, SamplerSpec};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::score::{analytic_score, AnalyticScore, ScoreModel, ToyWorld, WorldSpec};

/// Samples scoring at least this under the ideal safety function count as
/// safe (distance <= 2 from the safe center).
pub const SAFETY_RATE_LEVEL: f64 = 0.1353352832366127; // exp(-2)

const REFERENCE_DRAWS: usize = 1000;
const REFERENCE_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub method: String,
    pub seed: u64,
    pub csv: PathBuf,
    pub kl_json: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svg: Option<PathBuf>,
    pub kl_nats: f64,
    pub safety_rate: f64,
}

/// Embedding-update window `[t_min, t_max]` actually applied for an STG
/// method, surfaced so the gating behavior is auditable per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StgWindow {
    pub method: String,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub tool_version: String,
    pub safety_rate_level: f64,
    pub stg_update_windows: Vec<StgWindow>,
    pub entries: Vec<ArtifactEntry>,
}

fn build_model<'a>(
    source: &ScoreSource,
    schedule: &'a NoiseSchedule,
    dim: usize,
) -> Result<Box<dyn ScoreModel + 'a>> {
    match source {
        ScoreSource::Analytic => Ok(Box::new(AnalyticScore::new(schedule, dim))),
        ScoreSource::Mlp { weights } => {
            let net = MlpScoreNet::load(weights)?;
            if net.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: net.dim(),
                });
            }
            if net.num_steps() != schedule.num_steps() {
                return Err(Error::config(
                    "score.weights",
                    format!(
                        "weight file trained for {} steps, schedule has {}",
                        net.num_steps(),
                        schedule.num_steps()
                    ),
                ));
            }
            Ok(Box::new(net))
        }
    }
}

/// Seeded draws from the closed-form safe conditional, used as the blue
/// reference overlay.
pub fn reference_draws(world: &ToyWorld, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let posterior = safe_posterior(world);
    let std = posterior.covariance_scale.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            DVector::from_iterator(
                world.dim,
                (0..world.dim)
                    .map(|i| posterior.mean[i] + std * rng.sample::<f64, _>(StandardNormal)),
            )
        })
        .collect()
}

fn method_safety(method: &GuidanceMethod, world: &ToyWorld) -> Box<dyn SafetyFn> {
    match method {
        GuidanceMethod::Sdg { safety, .. } | GuidanceMethod::Stg { safety, .. } => {
            safety.build(&world.safe_center)
        }
        _ => Box::new(GaussianSafety {
            center: world.safe_center.clone(),
        }),
    }
}

/// Runs every (method, seed) cell, writing per-cell CSV and KL JSON, one
/// scatter SVG per method (first seed), and a closing manifest.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Manifest> {
    config.validate()?;
    let world = config.world.build()?;
    let schedule = config.schedule.build()?;
    let model = build_model(&config.score, &schedule, world.dim)?;
    let posterior = safe_posterior(&world);
    let rate_fn = GaussianSafety {
        center: world.safe_center.clone(),
    };
    fs::create_dir_all(&config.out_dir)?;
    let reference = reference_draws(&world, REFERENCE_DRAWS, REFERENCE_SEED);

    let mut entries = Vec::new();
    let mut windows = Vec::new();
    for method in &config.methods {
        if let GuidanceMethod::Stg { config: stg, .. } = method {
            let total = schedule.num_steps() as f64;
            windows.push(StgWindow {
                method: method.label(),
                t_min: (1.0 - stg.gamma) * total,
                t_max: stg.gamma * total,
            });
        }
        for (i, &seed) in config.seeds.iter().enumerate() {
            let spec = SamplerSpec {
                kind: config.sampler,
                seed,
            };
            let batch = sample_chain(
                model.as_ref(),
                &schedule,
                &world,
                method,
                &spec,
                config.n_samples,
                false,
            )?;
            let stem = format!("{}_seed{}", method.label(), seed);
            let csv_path = config.out_dir.join(format!("{stem}.csv"));
            batch.write_csv(fs::File::create(&csv_path)?)?;

            let report = kl_gaussian_fit(&batch, &posterior)?;
            let kl_path = config.out_dir.join(format!("{stem}_kl.json"));
            fs::write(&kl_path, serde_json::to_string_pretty(&report)?)?;

            let rate = eval::safety_rate(&batch, &rate_fn, SAFETY_RATE_LEVEL)?;

            let svg = if i == 0 {
                let contour = method_safety(method, &world);
                let svg_path = config.out_dir.join(format!("{}.svg", method.label()));
                let image = scatter_svg(
                    &batch.samples,
                    &reference,
                    contour.as_ref(),
                    &method.label(),
                )?;
                fs::write(&svg_path, image)?;
                Some(svg_path)
            } else {
                None
            };

            entries.push(ArtifactEntry {
                method: method.label(),
                seed,
                csv: csv_path,
                kl_json: kl_path,
                svg,
                kl_nats: report.value,
                safety_rate: rate,
            });
        }
    }

    let manifest = Manifest {
        config_hash: config.hash(),
        tool_version: eval::TOOL_VERSION.into(),
        safety_rate_level: SAFETY_RATE_LEVEL,
        stg_update_windows: windows,
        entries,
    };
    fs::write(
        config.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// The five-panel preset: no guidance, SDG and STG under both safety
/// functions, ancestral sampling with the closed-form score.
pub fn fig3_config(out_dir: &Path, seed: u64, n_samples: usize) -> ExperimentConfig {
    let world = ToyWorld::default_2d();
    ExperimentConfig {
        world: WorldSpec {
            cond: world.cond.iter().cloned().collect(),
            safe_center: world.safe_center.iter().cloned().collect(),
        },
        schedule: ScheduleSpec {
            num_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.2,
        },
        score: ScoreSource::Analytic,
        sampler: SamplerKind::AncestralDdpm,
        n_samples,
        seeds: vec![seed],
        out_dir: out_dir.to_path_buf(),
        methods: vec![
            GuidanceMethod::None,
            GuidanceMethod::Sdg {
                safety: SafetyKind::GStar,
                stop_gradient_through_score: false,
            },
            GuidanceMethod::Sdg {
                safety: SafetyKind::GTilde,
                stop_gradient_through_score: false,
            },
            GuidanceMethod::Stg {
                safety: SafetyKind::GStar,
                config: StgConfig::default(),
            },
            GuidanceMethod::Stg {
                safety: SafetyKind::GTilde,
                config: StgConfig::default(),
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub safety_fn: String,
    pub kl_nats: f64,
    pub safety_rate: f64,
}

fn method_safety_label(label: &str) -> String {
    if let Some(s) = label.strip_prefix("sdg_").or_else(|| label.strip_prefix("stg_")) {
        s.to_string()
    } else {
        "-".into()
    }
}

/// Runs the five-panel preset and condenses the manifest into summary
/// rows of (method, safety function, KL, safety rate).
pub fn reproduce_fig3(out_dir: &Path, seed: u64, n_samples: usize) -> Result<Vec<SummaryRow>> {
    let config = fig3_config(out_dir, seed, n_samples);
    let manifest = run_experiment(&config)?;
    let rows = manifest
        .entries
        .iter()
        .map(|e| SummaryRow {
            method: e
                .method
                .split('_')
                .next()
                .unwrap_or(&e.method)
                .to_string(),
            safety_fn: method_safety_label(&e.method),
            kl_nats: e.kl_nats,
            safety_rate: e.safety_rate,
        })
        .collect();
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    fn collect(suite: &str, checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self {
            suite: suite.into(),
            passed,
            checks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckSuite {
    Gradients,
    Theorem1,
    TaylorBound,
    Distribution,
}

impl std::str::FromStr for CheckSuite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Self::Gradients),
            "theorem1" => Ok(Self::Theorem1),
            "taylor_bound" => Ok(Self::TaylorBound),
            "distribution" => Ok(Self::Distribution),
            other => Err(Error::InvalidArgument(format!(
                "unknown check suite '{other}' \
                 (expected gradients | theorem1 | taylor_bound | distribution)"
            ))),
        }
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-8)
}

fn random_probe(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        dim,
        (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)),
    )
}

fn gradients_suite() -> Result<CheckReport> {
    let world = ToyWorld::default_2d();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = eval::FD_STEP;
    let mut checks = Vec::new();

    // Safety-function gradients against central differences.
    let safeties: Vec<(&str, Box<dyn SafetyFn>)> = vec![
        (
            "safety_ideal_grad_fd",
            Box::new(GaussianSafety {
                center: world.safe_center.clone(),
            }),
        ),
        (
            "safety_surrogate_grad_fd",
            Box::new(QuarticSafety {
                center: world.safe_center.clone(),
            }),
        ),
    ];
    for (name, g) in &safeties {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let x = random_probe(&mut rng, 2, 2.0);
            let grad = g.grad(&x)?;
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (g.value(&xp)? - g.value(&xm)?) / (2.0 * h);
                worst = worst.max(rel_err(grad[i], fd).min((grad[i] - fd).abs() * 1e4));
            }
        }
        checks.push(CheckResult {
            name: (*name).into(),
            passed: worst <= 1e-4,
            detail: format!("worst relative error {worst:.3e}"),
        });
    }

    // Freshly initialized net: VJP against directional finite differences.
    let net = MlpScoreNet::new(2, &[16, 16], 8, 100)?.init_seeded(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_probe(&mut rng, 2, 1.5);
        let c = random_probe(&mut rng, 2, 1.5);
        let cot = random_probe(&mut rng, 2, 1.0);
        let t = 1 + (rng.gen::<u64>() % 100) as usize;
        let (gx, gc) = net.vjp_inputs(&x, &c, t, &cot)?;
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (cot.dot(&net.forward(&xp, &c, t)?) - cot.dot(&net.forward(&xm, &c, t)?))
                / (2.0 * h);
            worst = worst.max(rel_err(gx[i], fd).min((gx[i] - fd).abs() * 1e4));
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp[i] += h;
            cm[i] -= h;
            let fd = (cot.dot(&net.forward(&x, &cp, t)?) - cot.dot(&net.forward(&x, &cm, t)?))
                / (2.0 * h);
            worst = worst.max(rel_err(gc[i], fd).min((gc[i] - fd).abs() * 1e4));
        }
    }
    checks.push(CheckResult {
        name: "mlp_input_vjp_fd".into(),
        passed: worst <= 1e-4,
        detail: format!("worst relative error {worst:.3e}"),
    });

    // SDG guidance term against the finite difference of the scalar map
    // y -> log g(tweedie(y)).
    let model = AnalyticScore::new(&schedule, 2);
    let g = GaussianSafety {
        center: world.safe_center.clone(),
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_probe(&mut rng, 2, 2.0);
        let t = 1 + (rng.gen::<u64>() % 100) as usize;
        let base = analytic_score(&schedule, &x, &world.cond, t)?;
        let guided = sdg_score(&model, &schedule, &g, &x, &world.cond, t, false)?;
        let term = guided - base;
        let abar = schedule.alpha_bar(t)?;
        let scalar = |y: &DVector<f64>| -> Result<f64> {
            let x0 = y * abar.sqrt() + &world.cond * (1.0 - abar);
            Ok(g.value(&x0)?.max(crate::safety::SAFETY_FLOOR).ln())
        };
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (scalar(&xp)? - scalar(&xm)?) / (2.0 * h);
            worst = worst.max(rel_err(term[i], fd).min((term[i] - fd).abs() * 1e4));
        }
    }
    checks.push(CheckResult {
        name: "sdg_guidance_term_fd".into(),
        passed: worst <= 1e-4,
        detail: format!("worst relative error {worst:.3e}"),
    });

    Ok(CheckReport::collect("gradients", checks))
}

fn theorem1_suite() -> Result<CheckReport> {
    let world = ToyWorld::default_2d();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.2)?;
    let g = GaussianSafety {
        center: world.safe_center.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut checks = Vec::new();
    for probe in 0..5 {
        let x = random_probe(&mut rng, 2, 2.0);
        let t = 10 + (rng.gen::<u64>() % 80) as usize;
        let report =
            theorem1_residual(&world, &schedule, &g, &x, t, &[0.0, 0.2, 0.1, 0.05])?;
        let zero_exact = report.residual_norms[0] == 0.0;
        let ratios_ok = report.residual_norms[1..]
            .windows(2)
            .all(|w| (3.3..=4.7).contains(&(w[0] / w[1])));
        checks.push(CheckResult {
            name: format!("order_probe_{probe}"),
            passed: zero_exact && ratios_ok,
            detail: format!(
                "residuals {:?}, zero-at-zero {zero_exact}",
                report.residual_norms
            ),
        });
    }
    Ok(CheckReport::collect("theorem1", checks))
}

fn taylor_bound_suite() -> Result<CheckReport> {
    let world = ToyWorld::default_2d();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.2)?;
    let g = GaussianSafety {
        center: world.safe_center.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut checks = Vec::new();
    for probe in 0..5 {
        let x = random_probe(&mut rng, 2, 2.0);
        let t = 10 + (rng.gen::<u64>() % 80) as usize;
        let report = taylor_bound_check(&world, &schedule, &g, &x, t, 50_000, probe)?;
        checks.push(CheckResult {
            name: format!("bound_probe_{probe}"),
            passed: report.bound_satisfied,
            detail: format!(
                "lhs {:.4e} vs L*m1 {:.4e}",
                report.lhs,
                report.lipschitz * report.mean_deviation
            ),
        });
    }
    Ok(CheckReport::collect("taylor_bound", checks))
}

fn distribution_suite() -> Result<CheckReport> {
    let world = ToyWorld::default_2d();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.2)?;
    let model = AnalyticScore::new(&schedule, 2);
    let spec = SamplerSpec {
        kind: SamplerKind::AncestralDdpm,
        seed: 11,
    };
    let n = 20_000;
    let batch = sample_chain(
        &model,
        &schedule,
        &world,
        &GuidanceMethod::ExactSg,
        &spec,
        n,
        false,
    )?;
    let posterior = safe_posterior(&world);
    let mean = batch.mean();
    let cov = batch.covariance();
    let se = (posterior.covariance_scale / n as f64).sqrt();
    let mut checks = Vec::new();
    checks.push(CheckResult {
        name: "exact_sg_mean".into(),
        passed: (0..2).all(|i| (mean[i] - posterior.mean[i]).abs() <= 4.0 * se),
        detail: format!("mean ({:.4}, {:.4}), 4*SE {:.4}", mean[0], mean[1], 4.0 * se),
    });
    checks.push(CheckResult {
        name: "exact_sg_cov_diag".into(),
        passed: (0..2).all(|i| (0.45..=0.55).contains(&cov[(i, i)])),
        detail: format!("diag ({:.4}, {:.4})", cov[(0, 0)], cov[(1, 1)]),
    });
    let corr = cov[(0, 1)] / (cov[(0, 0)] * cov[(1, 1)]).sqrt();
    checks.push(CheckResult {
        name: "exact_sg_cov_offdiag".into(),
        passed: corr.abs() <= 0.03,
        detail: format!("correlation {corr:.4}"),
    });
    let kl = kl_gaussian_fit(&batch, &posterior)?;
    checks.push(CheckResult {
        name: "exact_sg_kl_floor".into(),
        passed: kl.value <= 0.01,
        detail: format!("KL {:.4e} nats", kl.value),
    });
    Ok(CheckReport::collect("distribution", checks))
}

/// Runs one verification suite; failures are report contents, not errors.
pub fn run_checks(suite: CheckSuite) -> Result<CheckReport> {
    match suite {
        CheckSuite::Gradients => gradients_suite(),
        CheckSuite::Theorem1 => theorem1_suite(),
        CheckSuite::TaylorBound => taylor_bound_suite(),
        CheckSuite::Distribution => distribution_suite(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut config = fig3_config(dir, 1, 1);
        config.methods = vec![GuidanceMethod::None];
        config
    }

    #[test]
    fn counting_contract_single_cell() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_experiment(&tiny_config(dir.path())).unwrap();
        assert_eq!(manifest.entries.len(), 1);
        let e = &manifest.entries[0];
        assert!(e.csv.is_file());
        assert!(e.kl_json.is_file());
        assert!(e.svg.as_ref().unwrap().is_file());
        assert!(dir.path().join("manifest.json").is_file());
        // every named output is non-empty
        for p in [e.csv.clone(), e.kl_json.clone(), e.svg.clone().unwrap()] {
            assert!(fs::metadata(&p).unwrap().len() > 0, "{p:?} empty");
        }
    }

    #[test]
    fn rerun_reproduces_csv_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config_a = tiny_config(dir_a.path());
        let mut config_b = tiny_config(dir_b.path());
        config_a.n_samples = 50;
        config_b.n_samples = 50;
        let a = run_experiment(&config_a).unwrap();
        let b = run_experiment(&config_b).unwrap();
        let bytes_a = fs::read(&a.entries[0].csv).unwrap();
        let bytes_b = fs::read(&b.entries[0].csv).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn fig3_preset_expands_to_five_panels() {
        let config = fig3_config(Path::new("unused"), 1, 10);
        assert_eq!(config.methods.len(), 5);
        let labels: Vec<_> = config.methods.iter().map(|m| m.label()).collect();
        assert_eq!(
            labels,
            vec!["none", "sdg_g_star", "sdg_g_tilde", "stg_g_star", "stg_g_tilde"]
        );
    }

    #[test]
    fn fig3_summary_has_five_rows() {
        let dir = tempfile::tempdir().unwrap();
        let rows = reproduce_fig3(dir.path(), 1, 200).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].safety_fn, "-");
        assert_eq!(rows[1].safety_fn, "g_star");
        assert_eq!(rows[4].safety_fn, "g_tilde");
        // five SVG panels on disk
        let svgs = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .map(|x| x == "svg")
                    .unwrap_or(false)
            })
            .count();
        assert_eq!(svgs, 5);
    }

    #[test]
    fn stg_window_surfaced_in_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.methods = vec![GuidanceMethod::Stg {
            safety: SafetyKind::GStar,
            config: StgConfig {
                gamma: 0.8,
                ..StgConfig::default()
            },
        }];
        let manifest = run_experiment(&config).unwrap();
        assert_eq!(manifest.stg_update_windows.len(), 1);
        let w = &manifest.stg_update_windows[0];
        assert!((w.t_min - 20.0).abs() < 1e-9);
        assert!((w.t_max - 80.0).abs() < 1e-9);
    }

    #[test]
    fn suite_names_parse() {
        for name in ["gradients", "theorem1", "taylor_bound", "distribution"] {
            name.parse::<CheckSuite>().unwrap();
        }
        assert!("bogus".parse::<CheckSuite>().is_err());
    }

    #[test]
    fn gradients_suite_passes_on_fresh_net() {
        let report = run_checks(CheckSuite::Gradients).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn theorem1_suite_reports_order_two() {
        let report = run_checks(CheckSuite::Theorem1).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
