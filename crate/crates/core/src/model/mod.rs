//! The joint domain-category classifier.
//!
//! A feature extractor `G` (dense network) feeds one affine layer `F` with
//! `2K` outputs. The first `K` outputs form the source task classifier `F^s`,
//! the last `K` the target task classifier `F^t`; both are column slices of
//! the same weight matrix, never copies. Baselines attach optional auxiliary
//! heads (task classifier `C`, domain classifier `D`, per-category domain
//! classifiers `F_k`) to the same features.

pub mod softmax;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{
    backward, forward_mlp, Activation, DenseLayer, GradSet, Group, Matrix, MlpCache, MlpSpec, ParamId,
    ParamSet,
};
use crate::{Error, Result};
pub use softmax::{Block, RowStats};

/// Which auxiliary heads a model carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxHeadsConfig {
    /// Task classifier `C`: features → K logits.
    pub task: bool,
    /// Binary domain classifier `D`: features → 1 logit.
    pub domain: bool,
    /// K per-category binary domain classifiers `F_k`: features → 1 logit each.
    pub category_domain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the extractor layers; the last entry is the feature dimension.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub k: usize,
    #[serde(default)]
    pub aux: AuxHeadsConfig,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, k: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden,
            activation: Activation::Relu,
            k,
            aux: AuxHeadsConfig::default(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("extractor needs at least one layer of positive width".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("category count must be positive".into()));
        }
        Ok(())
    }
}

/// Auxiliary heads used by the baselines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuxHeads {
    pub task: Option<DenseLayer>,
    pub domain: Option<DenseLayer>,
    pub category_domain: Vec<DenseLayer>,
}

/// Extractor `G`, joint head `F` (2K outputs) and optional auxiliary heads.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub params: ParamSet,
    pub extractor: MlpSpec,
    pub joint: DenseLayer,
    pub aux: AuxHeads,
    config: ModelConfig,
}

/// Result of running `G` and `F` on a batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Matrix,
    pub logits: Matrix,
    cache: MlpCache,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows() == 0
    }

    /// Per-row softmax statistics of the joint logits.
    pub fn row_stats(&self, k: usize) -> Vec<RowStats> {
        self.logits.row_iter().map(|z| RowStats::new(z, k)).collect()
    }

    pub fn views(&self, k: usize) -> ProbViews {
        ProbViews::from_logits(&self.logits, k)
    }
}

fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

fn add_dense(
    params: &mut ParamSet,
    name: &str,
    group: Group,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> DenseLayer {
    let bound = 1.0 / (fan_in as f64).sqrt();
    DenseLayer {
        weight: params.add(format!("{name}.weight"), group, uniform_init(fan_in, fan_out, bound, rng)),
        bias: params.add(format!("{name}.bias"), group, uniform_init(1, fan_out, bound, rng)),
    }
}

impl JointModel {
    /// Builds a model with `U(−1/√fan_in, 1/√fan_in)` initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(config.hidden.len());
        let mut fan_in = config.input_dim;
        for (i, &width) in config.hidden.iter().enumerate() {
            layers.push(add_dense(&mut params, &format!("g{i}"), Group::Extractor, fan_in, width, &mut rng));
            fan_in = width;
        }
        let feat = config.feature_dim();
        let joint = add_dense(&mut params, "f", Group::Classifier, feat, 2 * config.k, &mut rng);
        let mut aux = AuxHeads::default();
        if config.aux.task {
            aux.task = Some(add_dense(&mut params, "c", Group::Classifier, feat, config.k, &mut rng));
        }
        if config.aux.domain {
            aux.domain = Some(add_dense(&mut params, "d", Group::Classifier, feat, 1, &mut rng));
        }
        if config.aux.category_domain {
            for k in 0..config.k {
                aux.category_domain
                    .push(add_dense(&mut params, &format!("fk{k}"), Group::Classifier, feat, 1, &mut rng));
            }
        }
        let extractor = MlpSpec {
            layers,
            activation: config.activation,
            activate_output: true,
        };
        Ok(JointModel {
            params,
            extractor,
            joint,
            aux,
            config,
        })
    }

    /// Rebuilds a model from an existing parameter set (checkpoint loading).
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = JointModel::new(config, 0)?;
        model.params.copy_values_from(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn extractor_ids(&self) -> Vec<ParamId> {
        self.extractor.param_ids()
    }

    pub fn joint_ids(&self) -> Vec<ParamId> {
        vec![self.joint.weight, self.joint.bias]
    }

    pub fn task_head(&self) -> Result<DenseLayer> {
        self.aux
            .task
            .ok_or_else(|| Error::Contract("model has no auxiliary task classifier".into()))
    }

    pub fn domain_head(&self) -> Result<DenseLayer> {
        self.aux
            .domain
            .ok_or_else(|| Error::Contract("model has no domain classifier".into()))
    }

    pub fn features(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        forward_mlp(&self.params, &self.extractor, x)
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        let (features, cache) = self.features(x)?;
        let logits = self.joint.forward(&self.params, &features)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite(format!(
                "joint head produced non-finite logits (feature max |v| = {:.3e}, head weight max |v| = {:.3e})",
                features.max_abs(),
                self.params.value(self.joint.weight).max_abs()
            )));
        }
        Ok(ForwardPass {
            features,
            logits,
            cache,
        })
    }

    /// Back-propagates a joint-logit gradient (and optionally an extra
    /// feature gradient from auxiliary heads) into `grads`.
    ///
    /// With `through_extractor == false` only the head parameters receive
    /// gradient and `G` is skipped entirely.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_logits: Option<&Matrix>,
        d_features_extra: Option<&Matrix>,
        through_extractor: bool,
        grads: &mut GradSet,
    ) -> Result<()> {
        let mut d_features = match d_logits {
            Some(d) => {
                if d.shape() != pass.logits.shape() {
                    return Err(Error::Contract("logit gradient does not match the forward pass".into()));
                }
                self.joint.backward(&self.params, &pass.features, d, grads)?
            }
            None => Matrix::zeros(pass.features.rows(), pass.features.cols()),
        };
        if let Some(extra) = d_features_extra {
            d_features.axpy(1.0, extra)?;
        }
        if through_extractor {
            backward(&self.params, &self.extractor, &pass.cache, &d_features, grads)?;
        }
        Ok(())
    }

    /// Probability views of a batch.
    pub fn prob_views(&self, x: &Matrix) -> Result<ProbViews> {
        Ok(self.forward(x)?.views(self.k()))
    }

    /// Softmax of the auxiliary task classifier `C`.
    pub fn task_probs(&self, x: &Matrix) -> Result<Matrix> {
        let head = self.task_head()?;
        let (features, _) = self.features(x)?;
        let logits = head.forward(&self.params, &features)?;
        Ok(Matrix::from_fn(logits.rows(), logits.cols(), |r, c| {
            let lse = softmax::log_sum_exp(logits.row(r));
            (logits[(r, c)] - lse).exp()
        }))
    }

    /// Hard predictions from the requested head.
    pub fn predict(&self, x: &Matrix, head: Head) -> Result<Vec<Prediction>> {
        match head {
            Head::Task => Ok(predict_rows(&self.task_probs(x)?, head)),
            _ => Ok(self.prob_views(x)?.predict(head)),
        }
    }

    /// `G(x)` rows.
    pub fn export_features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.features(x)?.0)
    }
}

/// Probability triple of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbView {
    /// Softmax over all `2K` outputs.
    pub p: Vec<f64>,
    /// Softmax over the first `K` outputs.
    pub ps: Vec<f64>,
    /// Softmax over the last `K` outputs.
    pub pt: Vec<f64>,
}

impl ProbView {
    pub fn from_logits(z: &[f64], k: usize) -> Self {
        let st = RowStats::new(z, k);
        ProbView {
            p: st.p(),
            ps: st.ps(),
            pt: st.pt(),
        }
    }

    /// Largest deviation between `ps`/`pt` and the block-renormalized `p`.
    pub fn linkage_error(&self) -> f64 {
        let k = self.ps.len();
        let mut worst: f64 = 0.0;
        for (view, block) in [(&self.ps, &self.p[..k]), (&self.pt, &self.p[k..])] {
            let mass: f64 = block.iter().sum();
            if mass > 0.0 {
                for (v, b) in view.iter().zip(block) {
                    worst = worst.max((v - b / mass).abs());
                }
            }
        }
        worst
    }
}

/// Probability views of a batch, one row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbViews {
    pub p: Matrix,
    pub ps: Matrix,
    pub pt: Matrix,
}

impl ProbViews {
    pub fn from_logits(logits: &Matrix, k: usize) -> Self {
        let n = logits.rows();
        let mut p = Matrix::zeros(n, 2 * k);
        let mut ps = Matrix::zeros(n, k);
        let mut pt = Matrix::zeros(n, k);
        for r in 0..n {
            let v = ProbView::from_logits(logits.row(r), k);
            p.row_mut(r).copy_from_slice(&v.p);
            ps.row_mut(r).copy_from_slice(&v.ps);
            pt.row_mut(r).copy_from_slice(&v.pt);
        }
        ProbViews { p, ps, pt }
    }

    pub fn len(&self) -> usize {
        self.p.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.rows() == 0
    }

    pub fn view(&self, i: usize) -> ProbView {
        ProbView {
            p: self.p.row(i).to_vec(),
            ps: self.ps.row(i).to_vec(),
            pt: self.pt.row(i).to_vec(),
        }
    }

    pub fn max_linkage_error(&self) -> f64 {
        (0..self.len()).map(|i| self.view(i).linkage_error()).fold(0.0, f64::max)
    }

    pub fn predict(&self, head: Head) -> Vec<Prediction> {
        match head {
            Head::Source => predict_rows(&self.ps, head),
            Head::Target | Head::Task => predict_rows(&self.pt, head),
            Head::Joint => {
                let k = self.ps.cols();
                self.p
                    .row_iter()
                    .map(|row| {
                        let (idx, conf) = argmax(row);
                        Prediction {
                            label: idx % k,
                            confidence: conf,
                            head,
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Which classifier a prediction is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `F^s`, the first K outputs of the joint head.
    Source,
    /// `F^t`, the last K outputs of the joint head.
    Target,
    /// Argmax over all 2K outputs, folded back to a category.
    Joint,
    /// Auxiliary task classifier `C`.
    Task,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Source => "source_head",
            Head::Target => "target_head",
            Head::Joint => "joint",
            Head::Task => "task_head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
    pub head: Head,
}

/// First index of the maximum (ties resolve to the lowest index).
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn predict_rows(probs: &Matrix, head: Head) -> Vec<Prediction> {
    probs
        .row_iter()
        .map(|row| {
            let (label, confidence) = argmax(row);
            Prediction {
                label,
                confidence,
                head,
            }
        })
        .collect()
}

/// Writes one CSV row per instance: features, then label and confidence
/// for the source and target heads.
pub fn write_features_csv<W: Write>(model: &JointModel, x: &Matrix, out: W) -> Result<()> {
    write_tagged_features(model, &[(None, x)], out)
}

/// Like [`write_features_csv`] for both domains, with a leading `domain`
/// column holding `source` or `target`.
pub fn write_domain_features_csv<W: Write>(model: &JointModel, source: &Matrix, target: &Matrix, out: W) -> Result<()> {
    write_tagged_features(model, &[(Some("source"), source), (Some("target"), target)], out)
}

fn write_tagged_features<W: Write>(model: &JointModel, parts: &[(Option<&str>, &Matrix)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let tagged = parts.iter().any(|(t, _)| t.is_some());
    let mut header: Vec<String> = Vec::new();
    if tagged {
        header.push("domain".into());
    }
    header.extend((0..model.feature_dim()).map(|i| format!("g{}", i + 1)));
    header.extend(
        ["pred_source_head", "conf_source_head", "pred_target_head", "conf_target_head"].map(String::from),
    );
    w.write_record(&header)?;
    for (tag, x) in parts {
        let pass = model.forward(x)?;
        let views = pass.views(model.k());
        let src = views.predict(Head::Source);
        let tgt = views.predict(Head::Target);
        for r in 0..pass.features.rows() {
            let mut rec: Vec<String> = tag.iter().map(|t| t.to_string()).collect();
            rec.extend(pass.features.row(r).iter().map(|v| format!("{v}")));
            rec.push(src[r].label.to_string());
            rec.push(format!("{}", src[r].confidence));
            rec.push(tgt[r].label.to_string());
            rec.push(format!("{}", tgt[r].confidence));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("features csv", e))?;
    Ok(())
}
