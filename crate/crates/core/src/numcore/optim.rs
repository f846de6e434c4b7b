use std::ops::Range;

use super::{GradSet, Group, Matrix, ParamId, ParamSet};
use crate::{Error, Result};

/// SGD momentum buffers plus the two coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Matrix>,
}

impl OptimizerState {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Result<Self> {
        for (what, v) in [("momentum", momentum), ("weight_decay", weight_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Domain {
                    what,
                    value: v,
                    domain: "[0, 1)",
                });
            }
        }
        Ok(OptimizerState {
            momentum,
            weight_decay,
            buffers: params
                .iter()
                .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        })
    }

    pub fn with_defaults(params: &ParamSet) -> Self {
        Self::new(params, Self::DEFAULT_MOMENTUM, Self::DEFAULT_WEIGHT_DECAY)
            .expect("default coefficients are valid")
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn buffer(&self, id: ParamId) -> &Matrix {
        &self.buffers[id.0]
    }
}

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub extractor: f64,
    pub classifier: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        GroupRates {
            extractor: lr,
            classifier: lr,
        }
    }

    pub fn for_group(&self, group: Group) -> f64 {
        match group {
            Group::Extractor => self.extractor,
            Group::Classifier => self.classifier,
        }
    }
}

/// A parameter (optionally restricted to a column range) that a step may modify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateSlice {
    pub id: ParamId,
    pub cols: Option<Range<usize>>,
}

impl UpdateSlice {
    pub fn whole(id: ParamId) -> Self {
        UpdateSlice { id, cols: None }
    }

    pub fn columns(id: ParamId, cols: Range<usize>) -> Self {
        UpdateSlice { id, cols: Some(cols) }
    }
}

impl From<ParamId> for UpdateSlice {
    fn from(id: ParamId) -> Self {
        UpdateSlice::whole(id)
    }
}

/// One SGD-with-momentum step over the listed slices.
///
/// `v ← m·v + g + wd·θ`, then `θ ← θ − lr·v`, where `lr` comes from the
/// parameter's group. Entries outside `update` (buffers included) are untouched.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &GradSet,
    state: &mut OptimizerState,
    rates: GroupRates,
    update: &[UpdateSlice],
) -> Result<()> {
    if !grads.is_congruent(params) || state.buffers.len() != params.len() {
        return Err(Error::Contract("optimizer state, gradients and parameters are not congruent".into()));
    }
    for slice in update {
        let g = grads.get(slice.id);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter '{}' contains NaN or Inf",
                params.get(slice.id).name
            )));
        }
    }
    let (m, wd) = (state.momentum, state.weight_decay);
    for slice in update {
        let lr = rates.for_group(params.get(slice.id).group);
        let g = grads.get(slice.id);
        let v = &mut state.buffers[slice.id.0];
        let theta = params.value_mut(slice.id);
        let cols = slice.cols.clone().unwrap_or(0..theta.cols());
        for r in 0..theta.rows() {
            for c in cols.clone() {
                let vel = m * v[(r, c)] + g[(r, c)] + wd * theta[(r, c)];
                v[(r, c)] = vel;
                theta[(r, c)] -= lr * vel;
            }
        }
    }
    Ok(())
}
