use super::Matrix;
use crate::{Error, Result};

/// Parameter group; decides the learning rate a parameter trains at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Feature extractor `G`.
    Extractor,
    /// Classifier heads on top of the features (joint head, task and domain heads).
    Classifier,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Extractor => "extractor",
            Group::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        match s {
            "extractor" => Some(Group::Extractor),
            "classifier" => Some(Group::Classifier),
            _ => None,
        }
    }
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Matrix,
}

/// Ordered, named collection of trainable matrices.
///
/// Shapes are fixed once a parameter is added; only values change.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    /// Mutable access to a value. Callers must not change its shape.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_group(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }

    /// Overwrites all values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(
                "ParamSet::copy_values_from",
                self.params.len(),
                other.params.len(),
            ));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::shape(
                    "ParamSet::copy_values_from",
                    format!("{} {:?}", a.name, a.value.shape()),
                    format!("{} {:?}", b.name, b.value.shape()),
                ));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// One gradient matrix per parameter, shape-congruent with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    grads: Vec<Matrix>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet {
            grads: params
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &GradSet) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::shape("GradSet::axpy", self.grads.len(), other.grads.len()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.axpy(s, b)?;
        }
        Ok(())
    }

    /// Zeroes every gradient whose parameter is not in `group`.
    pub fn retain_group(&mut self, params: &ParamSet, group: Group) {
        for (g, p) in self.grads.iter_mut().zip(&params.params) {
            if p.group != group {
                g.fill(0.0);
            }
        }
    }

    /// Zeroes every gradient not listed in `keep`.
    pub fn retain_ids(&mut self, keep: &[ParamId]) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep.contains(&ParamId(i)) {
                g.fill(0.0);
            }
        }
    }

    pub fn is_congruent(&self, params: &ParamSet) -> bool {
        self.grads.len() == params.params.len()
            && self
                .grads
                .iter()
                .zip(&params.params)
                .all(|(g, p)| g.shape() == p.value.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().map(Matrix::max_abs).fold(0.0, f64::max)
    }

    pub fn max_abs_in_group(&self, params: &ParamSet, group: Group) -> f64 {
        self.grads
            .iter()
            .zip(&params.params)
            .filter(|(_, p)| p.group == group)
            .map(|(g, _)| g.max_abs())
            .fold(0.0, f64::max)
    }
}
