//! Numerical core: dense matrices, parameters, a small feed-forward network,
//! the optimizer and the training schedules.

mod gradcheck;
mod matrix;
mod mlp;
mod optim;
mod params;
mod schedule;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use matrix::Matrix;
pub use mlp::{backward, forward_mlp, Activation, DenseLayer, MlpCache, MlpSpec};
pub use optim::{sgd_step, GroupRates, OptimizerState, UpdateSlice};
pub use params::{GradSet, Group, Param, ParamId, ParamSet};
pub use schedule::Schedule;
