//! Experiment configuration: a flat TOML document, validated on load and
//! hashed canonically for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::GuidanceMethod;
use crate::sampler::SamplerKind;
use crate::schedule::ScheduleSpec;
use crate::score::WorldSpec;

/// Where the score comes from: the closed form for the toy world, or a
/// trained net loaded from a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ScoreSource {
    Analytic,
    Mlp { weights: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub schedule: ScheduleSpec,
    pub score: ScoreSource,
    pub sampler: SamplerKind,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// One `[[method]]` table per guidance method to run.
    #[serde(rename = "method", default)]
    pub methods: Vec<GuidanceMethod>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config("<root>", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<config>", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world
            .build()
            .map_err(|e| Error::config("world", e.to_string()))?;
        self.schedule
            .build()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("method", "must list at least one method"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if let GuidanceMethod::Stg { config, .. } = m {
                config
                    .validate()
                    .map_err(|e| Error::config(format!("method[{i}]"), e.to_string()))?;
            }
        }
        if let ScoreSource::Mlp { weights } = &self.score {
            if !weights.is_file() {
                return Err(Error::config(
                    "score.weights",
                    format!("file not found: {}", weights.display()),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON rendering of the parsed config.
    ///
    /// The hash is taken after parsing, so two documents with permuted
    /// keys but identical content hash identically (JSON object keys are
    /// emitted in sorted order).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical json");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::StgConfig;
    use crate::safety::SafetyKind;

    const BASE: &str = r#"
        n_samples = 100
        seeds = [1, 2]
        out_dir = "out"

        [world]
        cond = [1.0, 0.0]
        safe_center = [1.0, 2.0]

        [schedule]
        num_steps = 100
        beta_min = 1e-4
        beta_max = 0.2

        [score]
        source = "analytic"

        [sampler]
        kind = "ancestral_ddpm"

        [[method]]
        kind = "none"

        [[method]]
        kind = "sdg"
        safety = "g_star"

        [[method]]
        kind = "stg"
        safety = "g_tilde"
        rho = 0.015
        tau = -inf
        gamma = 1.0
        normalize_grad = true
    "#;

    #[test]
    fn parses_full_document() {
        let config = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(config.n_samples, 100);
        assert_eq!(config.seeds, vec![1, 2]);
        assert_eq!(config.methods.len(), 3);
        assert_eq!(config.methods[0], GuidanceMethod::None);
        assert_eq!(
            config.methods[1],
            GuidanceMethod::Sdg {
                safety: SafetyKind::GStar,
                stop_gradient_through_score: false,
            }
        );
        assert_eq!(
            config.methods[2],
            GuidanceMethod::Stg {
                safety: SafetyKind::GTilde,
                config: StgConfig::default(),
            }
        );
        assert_eq!(config.sampler, SamplerKind::AncestralDdpm);
        assert_eq!(config.score, ScoreSource::Analytic);
    }

    #[test]
    fn hash_stable_under_key_reorder() {
        let reordered = r#"
            out_dir = "out"
            seeds = [1, 2]
            n_samples = 100

            [schedule]
            beta_max = 0.2
            num_steps = 100
            beta_min = 1e-4

            [sampler]
            kind = "ancestral_ddpm"

            [score]
            source = "analytic"

            [world]
            safe_center = [1.0, 2.0]
            cond = [1.0, 0.0]

            [[method]]
            kind = "none"

            [[method]]
            safety = "g_star"
            kind = "sdg"

            [[method]]
            normalize_grad = true
            gamma = 1.0
            tau = -inf
            rho = 0.015
            safety = "g_tilde"
            kind = "stg"
        "#;
        let a = ExperimentConfig::from_toml_str(BASE).unwrap();
        let b = ExperimentConfig::from_toml_str(reordered).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::from_toml_str(BASE).unwrap();
        let mut b = a.clone();
        b.n_samples = 101;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_empty_method_list() {
        let text = BASE
            .split("[[method]]")
            .next()
            .unwrap()
            .to_string();
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "method"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_weight_file() {
        let text = BASE.replace(
            "source = \"analytic\"",
            "source = \"mlp\"\nweights = \"/nonexistent/weights.bin\"",
        );
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "score.weights"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid_schedule_values() {
        let text = BASE.replace("beta_max = 0.2", "beta_max = 1.5");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "schedule"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_stg_knobs() {
        let text = BASE.replace("gamma = 1.0", "gamma = 1.5");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn mlp_source_round_trips_when_file_exists() {
        let dir = tempfile::tempdir().unwrap();
        let weights = dir.path().join("w.bin");
        std::fs::write(&weights, b"placeholder").unwrap();
        let text = BASE.replace(
            "source = \"analytic\"",
            &format!("source = \"mlp\"\nweights = \"{}\"", weights.display()),
        );
        let config = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(config.score, ScoreSource::Mlp { weights });
    }
}
