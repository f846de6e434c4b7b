//! Categorical domain adaptation losses on the joint classifier.
//!
//! Every loss is evaluated on joint logits and back-propagated through the
//! joint head and (optionally) the extractor. Category-level target terms
//! weight the log-probabilities of one block by a head distribution of the
//! same instance; those weights stay differentiable.

use serde::{Deserialize, Serialize};

use crate::model::softmax::chain_head_softmax;
use crate::model::{Block, ForwardPass, JointModel, RowStats};
use crate::numcore::{sgd_step, GradSet, GroupRates, Matrix, OptimizerState, ParamId, UpdateSlice};
use crate::{Error, Result};

/// Labeled source instances plus unlabeled target instances.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub xs: Matrix,
    pub ys: Vec<usize>,
    pub xt: Matrix,
}

impl LabeledBatch {
    pub fn new(xs: Matrix, ys: Vec<usize>, xt: Matrix) -> Result<Self> {
        if xs.rows() != ys.len() {
            return Err(Error::shape("LabeledBatch", format!("{} labels", xs.rows()), ys.len()));
        }
        if xs.rows() > 0 && xt.rows() > 0 && xs.cols() != xt.cols() {
            return Err(Error::shape("LabeledBatch", format!("{} target columns", xs.cols()), xt.cols()));
        }
        Ok(LabeledBatch { xs, ys, xt })
    }

    pub(crate) fn check_labels(&self, k: usize) -> Result<()> {
        if let Some(&y) = self.ys.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("source label {y} outside 0..{k}")));
        }
        Ok(())
    }

    pub(crate) fn require_source(&self) -> Result<()> {
        if self.xs.rows() == 0 {
            return Err(Error::Contract("source batch is empty".into()));
        }
        Ok(())
    }

    pub(crate) fn require_both(&self) -> Result<()> {
        self.require_source()?;
        if self.xt.rows() == 0 {
            return Err(Error::Contract("target batch is empty".into()));
        }
        Ok(())
    }
}

/// Values of the named loss components from one training step.
///
/// Baselines reuse the same slots: `cls` is their task loss, `f_adv_*`
/// the discriminator-side losses and `g_adv_*` the extractor-side ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub f_adv_d: f64,
    pub g_adv_d: f64,
    pub f_adv_c: f64,
    pub g_adv_c: f64,
    pub ent: f64,
    pub lambda: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 7] = ["cls", "f_adv_d", "g_adv_d", "f_adv_c", "g_adv_c", "ent", "lambda"];

    pub fn values(&self) -> [f64; 7] {
        [self.cls, self.f_adv_d, self.g_adv_d, self.f_adv_c, self.g_adv_c, self.ent, self.lambda]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Running mean update: `self ← self + (other − self)/n`, where `n`
    /// counts the reports seen so far including `other`.
    pub fn accumulate_mean(&mut self, other: &LossReport, n: usize) {
        let inv = 1.0 / n as f64;
        let fields: [(&mut f64, f64); 7] = [
            (&mut self.cls, other.cls),
            (&mut self.f_adv_d, other.f_adv_d),
            (&mut self.g_adv_d, other.g_adv_d),
            (&mut self.f_adv_c, other.f_adv_c),
            (&mut self.g_adv_c, other.g_adv_c),
            (&mut self.ent, other.ent),
            (&mut self.lambda, other.lambda),
        ];
        for (a, b) in fields {
            *a += (b - *a) * inv;
        }
    }
}

/// Which head supplies the weights of the category-level target terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Classifier side weights target-block logs by `p^s`, extractor side
    /// weights source-block logs by `p^t`.
    #[default]
    CrossDomain,
    /// Weights come from the head of the block being scored.
    SameDomain,
}

impl Weighting {
    /// Block whose head distribution weights logs of `log_block`.
    pub fn weight_block(self, log_block: Block) -> Block {
        match self {
            Weighting::CrossDomain => log_block.other(),
            Weighting::SameDomain => log_block,
        }
    }
}

/// Whether gradients flow through the weighting distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightGrad {
    Live,
    Detached,
}

/// Switches of the CatDA objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatdaOptions {
    pub domain_adv: bool,
    pub category_adv: bool,
    pub weighting: Weighting,
    pub entropy: bool,
}

impl Default for CatdaOptions {
    fn default() -> Self {
        CatdaOptions {
            domain_adv: true,
            category_adv: true,
            weighting: Weighting::CrossDomain,
            entropy: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Logit-level terms. Each adds `w ·` its gradient into the supplied matrices
// and returns `w ·` its value.
// ---------------------------------------------------------------------------

fn mean_weight(w: f64, n: usize) -> f64 {
    w / n as f64
}

/// `−mean log p^s_y − mean log p^t_y`.
pub fn cls_term(src: &[RowStats], ys: &[usize], w: f64, gs: &mut Matrix) -> f64 {
    let wi = mean_weight(w, src.len());
    let mut value = 0.0;
    for (i, (st, &y)) in src.iter().zip(ys).enumerate() {
        value += st.head_ce(Block::Source, y, wi, gs.row_mut(i));
        value += st.head_ce(Block::Target, y, wi, gs.row_mut(i));
    }
    value
}

/// `−mean_s log mass(src_block) − mean_t log mass(src_block.other())`.
///
/// `Block::Source` gives the classifier-side domain loss, `Block::Target`
/// the inverted-label extractor-side one.
pub fn domain_term(
    src: &[RowStats],
    tgt: &[RowStats],
    src_block: Block,
    w: f64,
    gs: &mut Matrix,
    gt: &mut Matrix,
) -> f64 {
    let mut value = 0.0;
    let ws = mean_weight(w, src.len());
    for (i, st) in src.iter().enumerate() {
        value += st.neg_log_mass(src_block, ws, gs.row_mut(i));
    }
    let wt = mean_weight(w, tgt.len());
    for (j, st) in tgt.iter().enumerate() {
        value += st.neg_log_mass(src_block.other(), wt, gt.row_mut(j));
    }
    value
}

/// `−mean_s log p_{y + off(block)}`.
pub fn category_source_term(src: &[RowStats], ys: &[usize], block: Block, w: f64, gs: &mut Matrix) -> f64 {
    let wi = mean_weight(w, src.len());
    src.iter()
        .zip(ys)
        .enumerate()
        .map(|(i, (st, &y))| st.joint_ce(block.offset(st.k) + y, wi, gs.row_mut(i)))
        .sum()
}

/// `−mean_t Σ_k q_k log p_{k + off(log_block)}` with `q` the head view of
/// `weight_block` on the same instance.
pub fn category_target_term(
    tgt: &[RowStats],
    log_block: Block,
    weight_block: Block,
    mode: WeightGrad,
    w: f64,
    gt: &mut Matrix,
) -> f64 {
    let wi = mean_weight(w, tgt.len());
    let mut value = 0.0;
    for (j, st) in tgt.iter().enumerate() {
        let q = st.head(weight_block);
        let row = gt.row_mut(j);
        let (v, dq) = st.weighted_ce(&q, log_block, wi, row);
        if mode == WeightGrad::Live {
            chain_head_softmax(st, weight_block, &dq, row);
        }
        value += v;
    }
    value
}

/// Mean entropy of the target head `p^t`.
pub fn entropy_term(tgt: &[RowStats], w: f64, gt: &mut Matrix) -> f64 {
    let wi = mean_weight(w, tgt.len());
    tgt.iter()
        .enumerate()
        .map(|(j, st)| st.head_entropy(Block::Target, wi, gt.row_mut(j)))
        .sum()
}

// ---------------------------------------------------------------------------
// Model-level losses: value plus gradient over every parameter.
// ---------------------------------------------------------------------------

/// One named CatDA loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Cls,
    DomainAdvF,
    DomainAdvG,
    CategoryAdvF(Weighting),
    CategoryAdvG(Weighting),
    Entropy,
}

impl Component {
    fn needs_source(self) -> bool {
        !matches!(self, Component::Entropy)
    }

    fn needs_target(self) -> bool {
        !matches!(self, Component::Cls)
    }

    /// Adds `w ·` this component's gradient into the logit gradients.
    pub(crate) fn accumulate(
        self,
        src: &[RowStats],
        ys: &[usize],
        tgt: &[RowStats],
        w: f64,
        gs: &mut Matrix,
        gt: &mut Matrix,
    ) -> f64 {
        match self {
            Component::Cls => cls_term(src, ys, w, gs),
            Component::DomainAdvF => domain_term(src, tgt, Block::Source, w, gs, gt),
            Component::DomainAdvG => domain_term(src, tgt, Block::Target, w, gs, gt),
            Component::CategoryAdvF(weighting) => {
                category_source_term(src, ys, Block::Source, w, gs)
                    + category_target_term(
                        tgt,
                        Block::Target,
                        weighting.weight_block(Block::Target),
                        WeightGrad::Live,
                        w,
                        gt,
                    )
            }
            Component::CategoryAdvG(weighting) => {
                category_source_term(src, ys, Block::Target, w, gs)
                    + category_target_term(
                        tgt,
                        Block::Source,
                        weighting.weight_block(Block::Source),
                        WeightGrad::Live,
                        w,
                        gt,
                    )
            }
            Component::Entropy => entropy_term(tgt, w, gt),
        }
    }
}

fn validate(m: &JointModel, batch: &LabeledBatch, component: Component) -> Result<()> {
    if component.needs_source() {
        batch.require_source()?;
    }
    if component.needs_target() && batch.xt.rows() == 0 {
        return Err(Error::Contract("target batch is empty".into()));
    }
    batch.check_labels(m.k())
}

/// Weighted sum of components with its full gradient.
pub fn weighted_loss(m: &JointModel, batch: &LabeledBatch, terms: &[(Component, f64)]) -> Result<(f64, GradSet)> {
    for &(c, _) in terms {
        validate(m, batch, c)?;
    }
    let k = m.k();
    let ps = m.forward(&batch.xs)?;
    let pt = m.forward(&batch.xt)?;
    let (ss, st) = (ps.row_stats(k), pt.row_stats(k));
    let mut gs = Matrix::zeros(ps.logits.rows(), 2 * k);
    let mut gt = Matrix::zeros(pt.logits.rows(), 2 * k);
    let mut value = 0.0;
    for &(c, w) in terms {
        value += c.accumulate(&ss, &batch.ys, &st, w, &mut gs, &mut gt);
    }
    let mut grads = GradSet::zeros_like(&m.params);
    m.backward(&ps, Some(&gs), None, true, &mut grads)?;
    m.backward(&pt, Some(&gt), None, true, &mut grads)?;
    Ok((value, grads))
}

pub fn loss(m: &JointModel, batch: &LabeledBatch, component: Component) -> Result<(f64, GradSet)> {
    weighted_loss(m, batch, &[(component, 1.0)])
}

/// Classification loss on both heads, supervised by source labels.
pub fn loss_cls(m: &JointModel, batch: &LabeledBatch) -> Result<(f64, GradSet)> {
    loss(m, batch, Component::Cls)
}

pub fn loss_domain_adv_f(m: &JointModel, batch: &LabeledBatch) -> Result<(f64, GradSet)> {
    loss(m, batch, Component::DomainAdvF)
}

pub fn loss_domain_adv_g(m: &JointModel, batch: &LabeledBatch) -> Result<(f64, GradSet)> {
    loss(m, batch, Component::DomainAdvG)
}

pub fn loss_cat_adv_f(m: &JointModel, batch: &LabeledBatch) -> Result<(f64, GradSet)> {
    loss(m, batch, Component::CategoryAdvF(Weighting::CrossDomain))
}

pub fn loss_cat_adv_g(m: &JointModel, batch: &LabeledBatch) -> Result<(f64, GradSet)> {
    loss(m, batch, Component::CategoryAdvG(Weighting::CrossDomain))
}

pub fn loss_entropy_min(m: &JointModel, batch: &LabeledBatch) -> Result<(f64, GradSet)> {
    loss(m, batch, Component::Entropy)
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// The two alternating sub-steps of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Updates the joint head; extractor frozen.
    Classifier,
    /// Updates the extractor; joint head frozen.
    Extractor,
}

impl Phase {
    pub(crate) fn update_ids(self, m: &JointModel) -> Vec<ParamId> {
        match self {
            Phase::Classifier => m.joint_ids(),
            Phase::Extractor => m.extractor_ids(),
        }
    }
}

/// Component weights of each phase.
pub fn phase_terms(phase: Phase, lambda: f64, opts: &CatdaOptions) -> Vec<(Component, f64)> {
    let mut terms = Vec::with_capacity(4);
    match phase {
        Phase::Classifier => {
            terms.push((Component::Cls, 1.0));
            if opts.domain_adv {
                terms.push((Component::DomainAdvF, 1.0));
            }
            if opts.category_adv {
                terms.push((Component::CategoryAdvF(opts.weighting), lambda));
            }
        }
        Phase::Extractor => {
            terms.push((Component::Cls, 0.5));
            if opts.domain_adv {
                terms.push((Component::DomainAdvG, lambda));
            }
            if opts.category_adv {
                terms.push((Component::CategoryAdvG(opts.weighting), lambda));
            }
            if opts.entropy {
                terms.push((Component::Entropy, lambda));
            }
        }
    }
    terms
}

/// Gradient of one phase, routed to that phase's parameters only, along
/// with the unweighted value of every component in it.
pub fn phase_gradients(
    m: &JointModel,
    batch: &LabeledBatch,
    phase: Phase,
    lambda: f64,
    opts: &CatdaOptions,
) -> Result<(Vec<(Component, f64)>, GradSet)> {
    let terms = phase_terms(phase, lambda, opts);
    for &(c, _) in &terms {
        validate(m, batch, c)?;
    }
    let k = m.k();
    let ps = m.forward(&batch.xs)?;
    let pt = m.forward(&batch.xt)?;
    let (ss, st) = (ps.row_stats(k), pt.row_stats(k));
    let mut gs = Matrix::zeros(ps.logits.rows(), 2 * k);
    let mut gt = Matrix::zeros(pt.logits.rows(), 2 * k);
    let mut values = Vec::with_capacity(terms.len());
    for &(c, w) in &terms {
        // value at unit weight, gradient at w
        let v = c.accumulate(&ss, &batch.ys, &st, w, &mut gs, &mut gt);
        values.push((c, if w != 0.0 { v / w } else { unit_value(c, &ss, &batch.ys, &st) }));
    }
    let grads = route(m, phase, &[(&ps, &gs), (&pt, &gt)])?;
    Ok((values, grads))
}

pub(crate) fn unit_value(c: Component, ss: &[RowStats], ys: &[usize], st: &[RowStats]) -> f64 {
    let k = ss.first().or(st.first()).map_or(1, |s| s.k);
    let mut gs = Matrix::zeros(ss.len(), 2 * k);
    let mut gt = Matrix::zeros(st.len(), 2 * k);
    c.accumulate(ss, ys, st, 1.0, &mut gs, &mut gt)
}

/// Back-propagates logit gradients of several passes and zeroes everything
/// outside the phase's parameters.
pub(crate) fn route(m: &JointModel, phase: Phase, passes: &[(&ForwardPass, &Matrix)]) -> Result<GradSet> {
    let mut grads = GradSet::zeros_like(&m.params);
    let through = phase == Phase::Extractor;
    for (pass, d) in passes {
        m.backward(pass, Some(d), None, through, &mut grads)?;
    }
    grads.retain_ids(&phase.update_ids(m));
    Ok(grads)
}

pub(crate) fn apply(
    m: &mut JointModel,
    grads: &GradSet,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
    ids: &[ParamId],
) -> Result<()> {
    let slices: Vec<UpdateSlice> = ids.iter().copied().map(UpdateSlice::whole).collect();
    sgd_step(&mut m.params, grads, optimizer, rates, &slices)
}

pub(crate) fn record(report: &mut LossReport, values: &[(Component, f64)]) {
    for &(c, v) in values {
        match c {
            Component::Cls => report.cls = v,
            Component::DomainAdvF => report.f_adv_d = v,
            Component::DomainAdvG => report.g_adv_d = v,
            Component::CategoryAdvF(_) => report.f_adv_c = v,
            Component::CategoryAdvG(_) => report.g_adv_c = v,
            Component::Entropy => report.ent = v,
        }
    }
}

/// One CatDA iteration: a classifier step on `L_cls + F_adv_D + λ·F_adv_C`
/// followed by an extractor step on `½·L_cls + λ·G_adv_D + λ·G_adv_C`
/// (plus `λ·ENT` when enabled), both on the same batch.
///
/// Classifier-side values are measured before the first sub-step,
/// extractor-side values between the two.
pub fn catda_objective_step(
    m: &mut JointModel,
    batch: &LabeledBatch,
    lambda: f64,
    opts: &CatdaOptions,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
) -> Result<LossReport> {
    let mut report = LossReport {
        lambda,
        ..LossReport::default()
    };
    for phase in [Phase::Classifier, Phase::Extractor] {
        let (values, grads) = phase_gradients(m, batch, phase, lambda, opts)?;
        let cls_before = report.cls;
        record(&mut report, &values);
        if phase == Phase::Extractor {
            report.cls = cls_before;
        }
        apply(m, &grads, optimizer, rates, &phase.update_ids(m))?;
    }
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("loss report {report:?}")));
    }
    Ok(report)
}

/// Source-only training: both heads on `L_cls`, extractor on `½·L_cls`.
pub fn no_adapt_step(
    m: &mut JointModel,
    batch: &LabeledBatch,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
) -> Result<LossReport> {
    let opts = CatdaOptions {
        domain_adv: false,
        category_adv: false,
        weighting: Weighting::CrossDomain,
        entropy: false,
    };
    catda_objective_step(m, batch, 0.0, &opts, optimizer, rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numcore::{grad_check, Activation, Group};
    use std::f64::consts::LN_2;

    fn stats(rows: &[&[f64]], k: usize) -> Vec<RowStats> {
        rows.iter().map(|z| RowStats::new(z, k)).collect()
    }

    fn log_of(p: &[f64]) -> Vec<f64> {
        // logits whose softmax is p (p > 0)
        p.iter().map(|v| v.ln()).collect()
    }

    fn g(n: usize, k: usize) -> Matrix {
        Matrix::zeros(n, 2 * k)
    }

    #[test]
    fn running_mean_matches_arithmetic_mean() {
        let values = [3.0, -1.0, 4.0, 1.5, 9.0];
        let mut mean = LossReport::default();
        for (i, &v) in values.iter().enumerate() {
            let r = LossReport {
                cls: v,
                g_adv_c: 2.0 * v,
                ..LossReport::default()
            };
            mean.accumulate_mean(&r, i + 1);
        }
        let expect = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean.cls - expect).abs() < 1e-12);
        assert!((mean.g_adv_c - 2.0 * expect).abs() < 1e-12);
        assert_eq!(mean.f_adv_d, 0.0);
    }

    #[test]
    fn cls_reference_values() {
        let uniform = stats(&[&[0.0; 4], &[0.0; 4]], 2);
        let v = cls_term(&uniform, &[0, 1], 1.0, &mut g(2, 2));
        assert!((v - 2.0 * LN_2).abs() < 1e-12);
        let peaked = stats(&[&[60.0, -60.0, 60.0, -60.0]], 2);
        assert!(cls_term(&peaked, &[0], 1.0, &mut g(1, 2)).abs() < 1e-12);
    }

    #[test]
    fn domain_reference_values() {
        let uniform = stats(&[&[0.0; 4]], 2);
        let f = domain_term(&uniform, &uniform, Block::Source, 1.0, &mut g(1, 2), &mut g(1, 2));
        let gv = domain_term(&uniform, &uniform, Block::Target, 1.0, &mut g(1, 2), &mut g(1, 2));
        assert!((f - 2.0 * LN_2).abs() < 1e-12);
        assert!((gv - 2.0 * LN_2).abs() < 1e-12);
        assert!((f + gv - 4.0 * LN_2).abs() < 1e-12);

        let src_in_first = stats(&[&[50.0, 50.0, -50.0, -50.0]], 2);
        let tgt_in_last = stats(&[&[-50.0, -50.0, 50.0, 50.0]], 2);
        let f = domain_term(&src_in_first, &tgt_in_last, Block::Source, 1.0, &mut g(1, 2), &mut g(1, 2));
        assert!(f.abs() < 1e-12);
        let gv = domain_term(&tgt_in_last, &src_in_first, Block::Target, 1.0, &mut g(1, 2), &mut g(1, 2));
        assert!(gv.abs() < 1e-12);
    }

    #[test]
    fn domain_term_is_bce_on_block_masses() {
        let zs = [0.3, -1.0, 2.0, 0.4, 0.0, -0.7];
        let zt = [1.3, 0.1, -0.2, 0.9, -2.0, 0.5];
        let f = domain_term(&stats(&[&zs], 3), &stats(&[&zt], 3), Block::Source, 1.0, &mut g(1, 3), &mut g(1, 3));
        let mass_first = |z: &[f64]| {
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            e[..3].iter().sum::<f64>() / e.iter().sum::<f64>()
        };
        let expected = -mass_first(&zs).ln() - (1.0 - mass_first(&zt)).ln();
        assert!((f - expected).abs() < 1e-12);
    }

    #[test]
    fn category_target_reference_values() {
        // p^s = [1, 0], p last block [0, 0, 1, 0] → 0
        let z = [-40.0, -120.0, 40.0, -40.0];
        let st = stats(&[&z], 2);
        let v = category_target_term(&st, Block::Target, Block::Source, WeightGrad::Live, 1.0, &mut g(1, 2));
        assert!(v < 1e-12);
        // p^s = [½, ½], last block [¼, ¼] → ln 4
        let st = stats(&[&[0.0; 4]], 2);
        let v = category_target_term(&st, Block::Target, Block::Source, WeightGrad::Live, 1.0, &mut g(1, 2));
        assert!((v - 4f64.ln()).abs() < 1e-12);
        // G-side: p^t = [1, 0], p = [1, 0, 0, 0] (up to saturation)
        let z = [40.0, -40.0, 0.0, -80.0];
        let st = stats(&[&z], 2);
        let v = category_target_term(&st, Block::Source, Block::Target, WeightGrad::Live, 1.0, &mut g(1, 2));
        assert!(v < 1e-12);
        // source instance one-hot at y + K → G-side source term 0
        let st = stats(&[&[-40.0, -40.0, -40.0, 40.0]], 2);
        assert!(category_source_term(&st, &[1], Block::Target, 1.0, &mut g(1, 2)) < 1e-12);
    }

    #[test]
    fn entropy_reference_values() {
        let one_hot = stats(&[&[0.0, 0.0, 50.0, -50.0]], 2);
        assert!(entropy_term(&one_hot, 1.0, &mut g(1, 2)).abs() < 1e-12);
        let uniform = stats(&[&[0.0; 4]], 2);
        assert!((entropy_term(&uniform, 1.0, &mut g(1, 2)) - LN_2).abs() < 1e-12);
        let mut z = vec![0.0, 0.0];
        z.extend(log_of(&[0.9, 0.1]));
        let v = entropy_term(&stats(&[&z], 2), 1.0, &mut g(1, 2));
        assert!((v - 0.325_083).abs() < 1e-6);
    }

    #[test]
    fn symmetric_blocks_give_equal_target_terms() {
        let z = [0.2, -1.1, 0.7, 0.2, -1.1, 0.7];
        let st = stats(&[&z], 3);
        let f = category_target_term(&st, Block::Target, Block::Source, WeightGrad::Live, 1.0, &mut g(1, 3));
        let gv = category_target_term(&st, Block::Source, Block::Target, WeightGrad::Live, 1.0, &mut g(1, 3));
        assert_eq!(f, gv);
    }

    fn random_setup(k: usize, seed: u64) -> (JointModel, LabeledBatch) {
        let mut cfg = ModelConfig::new(5, vec![8], k);
        cfg.activation = Activation::Tanh;
        let m = JointModel::new(cfg, seed).unwrap();
        let xs = Matrix::from_fn(4, 5, |r, c| ((r * 7 + c * 3) as f64 * 0.37).sin());
        let xt = Matrix::from_fn(3, 5, |r, c| ((r * 5 + c * 11) as f64 * 0.23).cos());
        let batch = LabeledBatch::new(xs, vec![0, 2 % k, 1, 0], xt).unwrap();
        (m, batch)
    }

    #[test]
    fn every_component_passes_gradient_check() {
        let (m, batch) = random_setup(3, 21);
        let comps = [
            Component::Cls,
            Component::DomainAdvF,
            Component::DomainAdvG,
            Component::CategoryAdvF(Weighting::CrossDomain),
            Component::CategoryAdvG(Weighting::CrossDomain),
            Component::CategoryAdvF(Weighting::SameDomain),
            Component::CategoryAdvG(Weighting::SameDomain),
            Component::Entropy,
        ];
        for c in comps {
            let report = grad_check(
                |p| {
                    let mut mm = m.clone();
                    mm.params = p.clone();
                    loss(&mm, &batch, c)
                },
                &m.params,
                1e-5,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{c:?}: {report:?}");
        }
    }

    #[test]
    fn cls_matches_exported_probabilities() {
        let (m, batch) = random_setup(3, 4);
        let (v, _) = loss_cls(&m, &batch).unwrap();
        let views = m.prob_views(&batch.xs).unwrap();
        let mut expected = 0.0;
        for (i, &y) in batch.ys.iter().enumerate() {
            expected -= views.ps[(i, y)].ln() + views.pt[(i, y)].ln();
        }
        expected /= batch.ys.len() as f64;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn phase_gradients_are_routed() {
        let (m, batch) = random_setup(3, 8);
        let opts = CatdaOptions {
            entropy: true,
            ..CatdaOptions::default()
        };
        let (_, gf) = phase_gradients(&m, &batch, Phase::Classifier, 0.7, &opts).unwrap();
        assert_eq!(gf.max_abs_in_group(&m.params, Group::Extractor), 0.0);
        assert!(gf.max_abs_in_group(&m.params, Group::Classifier) > 0.0);
        let (_, gg) = phase_gradients(&m, &batch, Phase::Extractor, 0.7, &opts).unwrap();
        assert_eq!(gg.max_abs_in_group(&m.params, Group::Classifier), 0.0);
        assert!(gg.max_abs_in_group(&m.params, Group::Extractor) > 0.0);
    }

    #[test]
    fn lambda_zero_reduces_to_cls_and_domain_f() {
        let (m, batch) = random_setup(3, 9);
        let opts = CatdaOptions::default();
        let (_, gf) = phase_gradients(&m, &batch, Phase::Classifier, 0.0, &opts).unwrap();
        let (_, mut expected) =
            weighted_loss(&m, &batch, &[(Component::Cls, 1.0), (Component::DomainAdvF, 1.0)]).unwrap();
        expected.retain_ids(&m.joint_ids());
        let mut diff = gf.clone();
        diff.axpy(-1.0, &expected).unwrap();
        assert!(diff.max_abs() < 1e-14);

        let (_, gg) = phase_gradients(&m, &batch, Phase::Extractor, 0.0, &opts).unwrap();
        let (_, mut expected) = weighted_loss(&m, &batch, &[(Component::Cls, 0.5)]).unwrap();
        expected.retain_ids(&m.extractor_ids());
        let mut diff = gg.clone();
        diff.axpy(-1.0, &expected).unwrap();
        assert!(diff.max_abs() < 1e-14);
    }

    #[test]
    fn zero_rates_leave_parameters_and_fill_report() {
        let (mut m, batch) = random_setup(3, 10);
        let before = m.params.clone();
        let mut opt = OptimizerState::with_defaults(&m.params);
        let r = catda_objective_step(&mut m, &batch, 0.5, &CatdaOptions::default(), &mut opt, GroupRates::uniform(0.0))
            .unwrap();
        assert_eq!(m.params, before);
        let (cls, _) = loss_cls(&m, &batch).unwrap();
        let (fd, _) = loss_domain_adv_f(&m, &batch).unwrap();
        let (gd, _) = loss_domain_adv_g(&m, &batch).unwrap();
        let (fc, _) = loss_cat_adv_f(&m, &batch).unwrap();
        let (gc, _) = loss_cat_adv_g(&m, &batch).unwrap();
        for (a, b) in [(r.cls, cls), (r.f_adv_d, fd), (r.g_adv_d, gd), (r.f_adv_c, fc), (r.g_adv_c, gc)] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(r.lambda, 0.5);
    }

    #[test]
    fn empty_domains_are_rejected() {
        let (m, batch) = random_setup(3, 1);
        let no_target = LabeledBatch::new(batch.xs.clone(), batch.ys.clone(), Matrix::zeros(0, 5)).unwrap();
        assert!(loss_domain_adv_f(&m, &no_target).is_err());
        assert!(loss_cls(&m, &no_target).is_ok());
        let no_source = LabeledBatch::new(Matrix::zeros(0, 5), vec![], batch.xt.clone()).unwrap();
        assert!(matches!(loss_cls(&m, &no_source), Err(Error::Contract(_))));
        let bad = LabeledBatch::new(batch.xs.clone(), vec![0, 1, 7, 0], batch.xt.clone()).unwrap();
        assert!(loss_cls(&m, &bad).is_err());
    }
}
