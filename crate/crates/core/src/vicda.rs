//! Vicinal domain adaptation.
//!
//! A vicinal instance is `α·x^s + (1−α)·x^t` for a source/target pair with
//! `α ~ Beta(β, β)`. The vicinal adversarial losses score the mixed instance
//! against both domain blocks in proportion to `α`; the category-level
//! variant weights its target part by the head view of the *original* target
//! constituent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::catda::{
    apply, phase_terms, record, route, unit_value, CatdaOptions, Component, LabeledBatch, LossReport, Phase,
    Weighting,
};
use crate::model::softmax::chain_head_softmax;
use crate::model::{Block, JointModel, RowStats};
use crate::numcore::{GradSet, GroupRates, Matrix, OptimizerState};
use crate::{Error, Result};

/// Source of mixing coefficients.
pub trait MixingSampler {
    fn draw(&mut self) -> f64;
}

/// `Beta(β, β)` sampler built from two Gamma(β, 1) draws.
#[derive(Debug, Clone)]
pub struct BetaSampler {
    beta: f64,
    gamma: Gamma<f64>,
    rng: ChaCha8Rng,
}

impl BetaSampler {
    pub const DEFAULT_BETA: f64 = 0.2;

    pub fn new(beta: f64, seed: u64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain {
                what: "beta_param",
                value: beta,
                domain: "(0, inf)",
            });
        }
        let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(format!("gamma({beta}): {e}")))?;
        Ok(BetaSampler {
            beta,
            gamma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// One draw strictly inside `(0, 1)`.
    pub fn sample(&mut self) -> f64 {
        loop {
            let a = self.gamma.sample(&mut self.rng);
            let b = self.gamma.sample(&mut self.rng);
            let total = a + b;
            if total > 0.0 {
                let alpha = a / total;
                // tiny-shape gammas underflow often enough to hit the endpoints
                if alpha > 0.0 && alpha < 1.0 {
                    return alpha;
                }
            }
        }
    }
}

impl MixingSampler for BetaSampler {
    fn draw(&mut self) -> f64 {
        self.sample()
    }
}

/// Always returns the same coefficient.
#[derive(Debug, Clone, Copy)]
pub struct FixedAlpha(pub f64);

impl MixingSampler for FixedAlpha {
    fn draw(&mut self) -> f64 {
        self.0
    }
}

/// Mixed instances with their coefficients and constituents.
#[derive(Debug, Clone, PartialEq)]
pub struct VicinalBatch {
    pub xv: Matrix,
    pub alpha: Vec<f64>,
    /// Label of the source constituent.
    pub ys: Vec<usize>,
    pub xs_origin: Matrix,
    pub xt_origin: Matrix,
}

impl VicinalBatch {
    /// Mixes positionally paired rows with the given coefficients.
    pub fn with_alphas(xs: &Matrix, ys: &[usize], xt: &Matrix, alpha: Vec<f64>) -> Result<Self> {
        if xs.shape() != xt.shape() {
            return Err(Error::shape(
                "make_vicinal",
                format!("{:?}", xs.shape()),
                format!("{:?}", xt.shape()),
            ));
        }
        if ys.len() != xs.rows() || alpha.len() != xs.rows() {
            return Err(Error::shape("make_vicinal", format!("{} labels/alphas", xs.rows()), ys.len()));
        }
        if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Domain {
                what: "alpha",
                value: *a,
                domain: "[0, 1]",
            });
        }
        let xv = Matrix::from_fn(xs.rows(), xs.cols(), |r, c| {
            alpha[r] * xs[(r, c)] + (1.0 - alpha[r]) * xt[(r, c)]
        });
        Ok(VicinalBatch {
            xv,
            alpha,
            ys: ys.to_vec(),
            xs_origin: xs.clone(),
            xt_origin: xt.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn mean_alpha(&self) -> f64 {
        if self.alpha.is_empty() {
            return 0.0;
        }
        self.alpha.iter().sum::<f64>() / self.alpha.len() as f64
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("vicinal batch is empty".into()));
        }
        Ok(())
    }
}

/// Draws one coefficient per pair and mixes `xs` with `xt`.
pub fn make_vicinal(xs: &Matrix, ys: &[usize], xt: &Matrix, sampler: &mut dyn MixingSampler) -> Result<VicinalBatch> {
    let alpha: Vec<f64> = (0..xs.rows()).map(|_| sampler.draw()).collect();
    VicinalBatch::with_alphas(xs, ys, xt, alpha)
}

// ---------------------------------------------------------------------------
// Logit-level vicinal terms
// ---------------------------------------------------------------------------

/// `−mean_l [α log mass(src_block) + (1−α) log mass(src_block.other())]` on the mixed rows.
///
/// `Block::Source` is the classifier side, `Block::Target` the extractor side.
pub fn vic_domain_term(sv: &[RowStats], alpha: &[f64], src_block: Block, w: f64, gv: &mut Matrix) -> f64 {
    let wi = w / sv.len() as f64;
    let mut value = 0.0;
    for (l, (st, &a)) in sv.iter().zip(alpha).enumerate() {
        let row = gv.row_mut(l);
        value += st.neg_log_mass(src_block, wi * a, row);
        value += st.neg_log_mass(src_block.other(), wi * (1.0 - a), row);
    }
    value
}

/// `−mean_l [α log p_{y+off(src_block)}(xv) + (1−α) Σ_k q_k(xt) log p_{k+off(other)}(xv)]`
/// where `q` is the head view chosen by `weighting` on the target constituent.
#[allow(clippy::too_many_arguments)]
pub fn vic_category_term(
    sv: &[RowStats],
    st_origin: &[RowStats],
    ys: &[usize],
    alpha: &[f64],
    src_block: Block,
    weighting: Weighting,
    w: f64,
    gv: &mut Matrix,
    gt: &mut Matrix,
) -> f64 {
    let log_block = src_block.other();
    let weight_block = weighting.weight_block(log_block);
    let wi = w / sv.len() as f64;
    let mut value = 0.0;
    for l in 0..sv.len() {
        let (sv_l, st_l, a) = (&sv[l], &st_origin[l], alpha[l]);
        value += sv_l.joint_ce(src_block.offset(sv_l.k) + ys[l], wi * a, gv.row_mut(l));
        let q = st_l.head(weight_block);
        let (v, dq) = sv_l.weighted_ce(&q, log_block, wi * (1.0 - a), gv.row_mut(l));
        chain_head_softmax(st_l, weight_block, &dq, gt.row_mut(l));
        value += v;
    }
    value
}

/// One vicinal loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VicComponent {
    DomainAdvF,
    DomainAdvG,
    CategoryAdvF(Weighting),
    CategoryAdvG(Weighting),
}

impl VicComponent {
    fn accumulate(
        self,
        sv: &[RowStats],
        st: &[RowStats],
        vb: &VicinalBatch,
        w: f64,
        gv: &mut Matrix,
        gt: &mut Matrix,
    ) -> f64 {
        match self {
            VicComponent::DomainAdvF => vic_domain_term(sv, &vb.alpha, Block::Source, w, gv),
            VicComponent::DomainAdvG => vic_domain_term(sv, &vb.alpha, Block::Target, w, gv),
            VicComponent::CategoryAdvF(wt) => {
                vic_category_term(sv, st, &vb.ys, &vb.alpha, Block::Source, wt, w, gv, gt)
            }
            VicComponent::CategoryAdvG(wt) => {
                vic_category_term(sv, st, &vb.ys, &vb.alpha, Block::Target, wt, w, gv, gt)
            }
        }
    }

    fn as_component(self) -> Component {
        match self {
            VicComponent::DomainAdvF => Component::DomainAdvF,
            VicComponent::DomainAdvG => Component::DomainAdvG,
            VicComponent::CategoryAdvF(w) => Component::CategoryAdvF(w),
            VicComponent::CategoryAdvG(w) => Component::CategoryAdvG(w),
        }
    }

    fn from_component(c: Component) -> Option<Self> {
        match c {
            Component::DomainAdvF => Some(VicComponent::DomainAdvF),
            Component::DomainAdvG => Some(VicComponent::DomainAdvG),
            Component::CategoryAdvF(w) => Some(VicComponent::CategoryAdvF(w)),
            Component::CategoryAdvG(w) => Some(VicComponent::CategoryAdvG(w)),
            _ => None,
        }
    }
}

/// A vicinal loss with its gradient over all parameters.
pub fn vic_loss(m: &JointModel, vb: &VicinalBatch, component: VicComponent) -> Result<(f64, GradSet)> {
    vb.require_nonempty()?;
    if let Some(&y) = vb.ys.iter().find(|&&y| y >= m.k()) {
        return Err(Error::Contract(format!("source label {y} outside 0..{}", m.k())));
    }
    let k = m.k();
    let pv = m.forward(&vb.xv)?;
    let pt = m.forward(&vb.xt_origin)?;
    let (sv, st) = (pv.row_stats(k), pt.row_stats(k));
    let mut gv = Matrix::zeros(vb.len(), 2 * k);
    let mut gt = Matrix::zeros(vb.len(), 2 * k);
    let value = component.accumulate(&sv, &st, vb, 1.0, &mut gv, &mut gt);
    let mut grads = GradSet::zeros_like(&m.params);
    m.backward(&pv, Some(&gv), None, true, &mut grads)?;
    m.backward(&pt, Some(&gt), None, true, &mut grads)?;
    Ok((value, grads))
}

pub fn loss_vic_domain_adv_f(m: &JointModel, vb: &VicinalBatch) -> Result<(f64, GradSet)> {
    vic_loss(m, vb, VicComponent::DomainAdvF)
}

pub fn loss_vic_domain_adv_g(m: &JointModel, vb: &VicinalBatch) -> Result<(f64, GradSet)> {
    vic_loss(m, vb, VicComponent::DomainAdvG)
}

pub fn loss_vic_cat_adv_f(m: &JointModel, vb: &VicinalBatch) -> Result<(f64, GradSet)> {
    vic_loss(m, vb, VicComponent::CategoryAdvF(Weighting::CrossDomain))
}

pub fn loss_vic_cat_adv_g(m: &JointModel, vb: &VicinalBatch) -> Result<(f64, GradSet)> {
    vic_loss(m, vb, VicComponent::CategoryAdvG(Weighting::CrossDomain))
}

// ---------------------------------------------------------------------------
// Training steps
// ---------------------------------------------------------------------------

/// Report of a step that mixed instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicinalStep {
    pub report: LossReport,
    pub mean_alpha: f64,
}

/// How the classification loss is formed in a phase.
enum ClsInput<'a> {
    /// On the raw source batch.
    Raw,
    /// On source/source mixtures with mixed labels: `x_mix`, partner labels, coefficients.
    Mixed(&'a Matrix, &'a [usize], &'a [f64]),
}

/// Shared phase engine: raw-source cls, raw-domain components, vicinal components.
fn vicinal_phase(
    m: &JointModel,
    batch: &LabeledBatch,
    vb: Option<&VicinalBatch>,
    cls: &ClsInput<'_>,
    phase: Phase,
    lambda: f64,
    opts: &CatdaOptions,
) -> Result<(Vec<(Component, f64)>, GradSet)> {
    batch.require_both()?;
    batch.check_labels(m.k())?;
    let k = m.k();
    let terms = phase_terms(phase, lambda, opts);

    let ps = match cls {
        ClsInput::Raw => m.forward(&batch.xs)?,
        ClsInput::Mixed(xm, _, _) => m.forward(xm)?,
    };
    let pt_raw = m.forward(&batch.xt)?;
    let ss = ps.row_stats(k);
    let st_raw = pt_raw.row_stats(k);
    let mut gs = Matrix::zeros(ps.len(), 2 * k);
    let mut gt_raw = Matrix::zeros(pt_raw.len(), 2 * k);

    let vic = match vb {
        Some(vb) => {
            let pv = m.forward(&vb.xv)?;
            let po = m.forward(&vb.xt_origin)?;
            let (sv, so) = (pv.row_stats(k), po.row_stats(k));
            Some((vb, pv, po, sv, so))
        }
        None => None,
    };
    let mut gv = vic.as_ref().map(|v| Matrix::zeros(v.1.len(), 2 * k));
    let mut go = vic.as_ref().map(|v| Matrix::zeros(v.2.len(), 2 * k));

    let mut values = Vec::with_capacity(terms.len());
    for &(c, w) in &terms {
        let vic_c = VicComponent::from_component(c);
        let v = match (&vic, vic_c) {
            (Some((vb, _, _, sv, so)), Some(vc)) => {
                let unit = if w == 0.0 {
                    let mut a = Matrix::zeros(vb.len(), 2 * k);
                    let mut b = Matrix::zeros(vb.len(), 2 * k);
                    vc.accumulate(sv, so, vb, 1.0, &mut a, &mut b)
                } else {
                    f64::NAN
                };
                let v = vc.accumulate(sv, so, vb, w, gv.as_mut().unwrap(), go.as_mut().unwrap());
                if w == 0.0 {
                    unit
                } else {
                    v / w
                }
            }
            _ => match (c, cls) {
                (Component::Cls, ClsInput::Mixed(_, partner, alpha)) => {
                    let v = mixed_cls_term(&ss, &batch.ys, partner, alpha, w, &mut gs);
                    v / w
                }
                _ => {
                    let v = c.accumulate(&ss, &batch.ys, &st_raw, w, &mut gs, &mut gt_raw);
                    if w == 0.0 {
                        unit_value(c, &ss, &batch.ys, &st_raw)
                    } else {
                        v / w
                    }
                }
            },
        };
        values.push((c, v));
    }

    let mut passes = vec![(&ps, &gs), (&pt_raw, &gt_raw)];
    if let (Some((_, pv, po, _, _)), Some(gv), Some(go)) = (&vic, &gv, &go) {
        passes.push((pv, gv));
        passes.push((po, go));
    }
    let grads = route(m, phase, &passes)?;
    Ok((values, grads))
}

/// `mean_i [α_i·CE(y_i) + (1−α_i)·CE(y'_i)]` on both heads of mixed source rows.
fn mixed_cls_term(ss: &[RowStats], ya: &[usize], yb: &[usize], alpha: &[f64], w: f64, gs: &mut Matrix) -> f64 {
    let wi = w / ss.len() as f64;
    let mut value = 0.0;
    for (i, st) in ss.iter().enumerate() {
        let row = gs.row_mut(i);
        for block in [Block::Source, Block::Target] {
            value += st.head_ce(block, ya[i], wi * alpha[i], row);
            value += st.head_ce(block, yb[i], wi * (1.0 - alpha[i]), row);
        }
    }
    value
}

/// Phase gradients of the vicinal objective for a given vicinal batch.
pub fn vicatda_phase_gradients(
    m: &JointModel,
    batch: &LabeledBatch,
    vb: &VicinalBatch,
    phase: Phase,
    lambda: f64,
    opts: &CatdaOptions,
) -> Result<(Vec<(Component, f64)>, GradSet)> {
    vb.require_nonempty()?;
    vicinal_phase(m, batch, Some(vb), &ClsInput::Raw, phase, lambda, opts)
}

/// One ViCatDA iteration with an explicit vicinal batch.
pub fn vicatda_step_with(
    m: &mut JointModel,
    batch: &LabeledBatch,
    vb: &VicinalBatch,
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
        let (values, grads) = vicatda_phase_gradients(m, batch, vb, phase, lambda, opts)?;
        let cls = report.cls;
        record(&mut report, &values);
        if phase == Phase::Extractor {
            report.cls = cls;
        }
        apply(m, &grads, optimizer, rates, &phase.update_ids(m))?;
    }
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("loss report {report:?}")));
    }
    Ok(report)
}

/// One ViCatDA iteration: the CatDA step with all four adversarial losses
/// replaced by their vicinal versions; the classification loss stays on the
/// raw source batch. One vicinal instance is drawn per source/target pair.
pub fn vicatda_objective_step(
    m: &mut JointModel,
    batch: &LabeledBatch,
    lambda: f64,
    opts: &CatdaOptions,
    sampler: &mut dyn MixingSampler,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
) -> Result<VicinalStep> {
    let vb = make_vicinal(&batch.xs, &batch.ys, &batch.xt, sampler)?;
    let report = vicatda_step_with(m, batch, &vb, lambda, opts, optimizer, rates)?;
    Ok(VicinalStep {
        report,
        mean_alpha: vb.mean_alpha(),
    })
}

/// CatDA with input-and-label mixup on the classification loss.
///
/// Source rows are paired with the batch reversed (`i ↔ n−1−i`); the
/// adversarial terms stay on raw instances.
pub fn catda_mixup_step(
    m: &mut JointModel,
    batch: &LabeledBatch,
    lambda: f64,
    opts: &CatdaOptions,
    sampler: &mut dyn MixingSampler,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
) -> Result<VicinalStep> {
    batch.require_both()?;
    let n = batch.xs.rows();
    let partner_idx: Vec<usize> = (0..n).rev().collect();
    let partner_x = batch.xs.select_rows(&partner_idx);
    let partner_y: Vec<usize> = partner_idx.iter().map(|&i| batch.ys[i]).collect();
    let mixed = VicinalBatch::with_alphas(
        &batch.xs,
        &batch.ys,
        &partner_x,
        (0..n).map(|_| sampler.draw()).collect(),
    )?;
    let cls = ClsInput::Mixed(&mixed.xv, &partner_y, &mixed.alpha);
    let mut report = LossReport {
        lambda,
        ..LossReport::default()
    };
    for phase in [Phase::Classifier, Phase::Extractor] {
        let (values, grads) = vicinal_phase(m, batch, None, &cls, phase, lambda, opts)?;
        let c = report.cls;
        record(&mut report, &values);
        if phase == Phase::Extractor {
            report.cls = c;
        }
        apply(m, &grads, optimizer, rates, &phase.update_ids(m))?;
    }
    Ok(VicinalStep {
        report,
        mean_alpha: mixed.mean_alpha(),
    })
}

impl From<VicComponent> for Component {
    fn from(v: VicComponent) -> Self {
        v.as_component()
    }
}
