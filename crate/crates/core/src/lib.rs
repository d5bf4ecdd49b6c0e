//! Multi-agent pedestrian trajectory generation.
//!
//! The crate trains a generator that encodes observed multi-agent
//! motion with node/edge history LSTMs, models each agent's travel
//! destination with a Gaussian mixture, and decodes futures with a
//! residual-action GRU. It ships the full training objective
//! (destination likelihood, anti-mode-collapse hinges, Huber
//! reconstruction) plus an evaluation suite for diversity and realism:
//! self-distance, displacement errors, and chi-square distances over
//! motion-primitive distributions.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decoder;
pub mod destination;
pub mod encoder;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod training;
pub mod exec;
pub mod rng;

pub use autodiff::{GradError, ParamSet, Tape, Var};
pub use config::{AsdMode, Config, ConfigError};
