//! Adversarial unsupervised domain adaptation on small dense networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: matrices, parameter sets, a feed-forward network with
//!   exact backprop, SGD with momentum, learning-rate/penalty schedules and
//!   a finite-difference gradient checker.
//! * [`model`]: the joint `2K`-way domain-category classifier stacked on a
//!   feature extractor, with its three probability views.
//! * [`catda`]: classification, domain-level and category-level adversarial
//!   losses with cross-domain weighting, and the alternating training step.
//! * [`vicda`]: vicinal instances (Beta-mixed source/target pairs) and the
//!   vicinal variants of both adversarial losses.
//! * [`baselines`]: DANN, MADA, RCA, SymNet and their vicinal composites.
//! * [`tdsr`]: semantically anchored spherical k-means and the target
//!   fine-tuning stage built on it.
//! * [`data`]: synthetic two-domain tasks, CSV ingestion and batching.
//! * [`harness`]: experiment configuration, training, evaluation,
//!   ablation grids, checkpoints and the analytic verification suite.

pub mod baselines;
pub mod catda;
pub mod data;
mod error;
pub mod harness;
pub mod model;
pub mod numcore;
pub mod tdsr;
pub mod vicda;

pub use error::{Error, Result};
pub use model::{Head, JointModel, ModelConfig, Prediction, ProbView};
pub use numcore::{Activation, GradSet, Group, Matrix, OptimizerState, ParamSet, Schedule};
