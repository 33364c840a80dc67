//! Guided diffusion on an analytically tractable 2D Gaussian world.
//!
//! The crate implements a small family of safe-guidance methods for
//! diffusion sampling — exact safe guidance, safe data guidance (SDG) and
//! safe text-embedding guidance (STG) — together with the machinery needed
//! to cross-validate them: closed-form and learned score models, Tweedie
//! denoising, a pluggable safety-function abstraction, ancestral/DDIM
//! samplers, KL-divergence evaluators and a config-driven experiment
//! runner.

pub mod config;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod mlp;
pub mod plot;
pub mod runner;
pub mod safety;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
pub use score::{AnalyticScore, ScoreModel, ToyWorld};
