//! Comparison methods: DANN, MADA, RCA and SymNet, plus vicinal versions of
//! DANN and RCA.
//!
//! Every baseline is split into a discriminator side and a generator side.
//! A training step first updates the discriminator parameters on the
//! discriminator objective, then the generator parameters on the generator
//! objective evaluated at the updated discriminator.

use std::fmt;
use std::str::FromStr;

use crate::catda::{apply, LabeledBatch, LossReport};
use crate::model::{argmax, AuxHeadsConfig, Block, ForwardPass, Head, JointModel, RowStats};
use crate::numcore::{DenseLayer, GradSet, GroupRates, Matrix, OptimizerState, ParamId};
use crate::vicda::{make_vicinal, MixingSampler, VicinalBatch, VicinalStep};
use crate::{Error, Result};

/// Objective value and its gradient over every parameter.
#[derive(Debug, Clone)]
pub struct SideLoss {
    pub value: f64,
    pub grads: GradSet,
}

/// Both sides of a baseline objective plus its named parts.
#[derive(Debug, Clone)]
pub struct BaselineLoss {
    /// Minimized by the discriminator (`D`, `{F_k}` or `F`).
    pub disc: SideLoss,
    /// Minimized by the extractor (and task classifier when present).
    pub gen: SideLoss,
    /// Source supervision.
    pub task: f64,
    /// Adversarial part of the discriminator objective.
    pub disc_adv: f64,
    /// Adversarial part of the generator objective, before `λ`.
    pub gen_adv: f64,
}

impl BaselineLoss {
    fn report(&self, lambda: f64) -> LossReport {
        LossReport {
            cls: self.task,
            f_adv_d: self.disc_adv,
            g_adv_d: self.gen_adv,
            lambda,
            ..LossReport::default()
        }
    }
}

/// Non-vicinal baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Baseline {
    Dann,
    Mada,
    Rca,
    Symnet,
}

/// Vicinal baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VicinalBaseline {
    ViDann,
    ViRca,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Dann, Baseline::Mada, Baseline::Rca, Baseline::Symnet];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Dann => "dann",
            Baseline::Mada => "mada",
            Baseline::Rca => "rca",
            Baseline::Symnet => "symnet",
        }
    }

    /// Auxiliary heads the model must carry.
    pub fn aux_heads(self) -> AuxHeadsConfig {
        match self {
            Baseline::Dann => AuxHeadsConfig {
                task: true,
                domain: true,
                category_domain: false,
            },
            Baseline::Mada => AuxHeadsConfig {
                task: true,
                domain: false,
                category_domain: true,
            },
            Baseline::Rca => AuxHeadsConfig {
                task: true,
                ..AuxHeadsConfig::default()
            },
            Baseline::Symnet => AuxHeadsConfig::default(),
        }
    }

    /// Classifier used for target predictions.
    pub fn eval_head(self) -> Head {
        match self {
            Baseline::Symnet => Head::Target,
            _ => Head::Task,
        }
    }

    pub fn loss(self, m: &JointModel, batch: &LabeledBatch, lambda: f64) -> Result<BaselineLoss> {
        match self {
            Baseline::Dann => loss_dann(m, batch, lambda),
            Baseline::Mada => loss_mada(m, batch, lambda),
            Baseline::Rca => loss_rca(m, batch, lambda),
            Baseline::Symnet => loss_symnet(m, batch, lambda),
        }
    }

    pub fn discriminator_ids(self, m: &JointModel) -> Result<Vec<ParamId>> {
        match self {
            Baseline::Dann => Ok(layer_ids(&[m.domain_head()?])),
            Baseline::Mada => {
                if m.aux.category_domain.is_empty() {
                    return Err(Error::Contract("model has no per-category domain classifiers".into()));
                }
                Ok(layer_ids(&m.aux.category_domain))
            }
            Baseline::Rca | Baseline::Symnet => Ok(m.joint_ids()),
        }
    }

    pub fn generator_ids(self, m: &JointModel) -> Result<Vec<ParamId>> {
        let mut ids = m.extractor_ids();
        if self != Baseline::Symnet {
            ids.extend(layer_ids(&[m.task_head()?]));
        }
        Ok(ids)
    }
}

impl VicinalBaseline {
    pub fn name(self) -> &'static str {
        match self {
            VicinalBaseline::ViDann => "vidann",
            VicinalBaseline::ViRca => "virca",
        }
    }

    /// The plain baseline this one is built on.
    pub fn base(self) -> Baseline {
        match self {
            VicinalBaseline::ViDann => Baseline::Dann,
            VicinalBaseline::ViRca => Baseline::Rca,
        }
    }

    pub fn loss(self, m: &JointModel, vb: &VicinalBatch, lambda: f64) -> Result<BaselineLoss> {
        match self {
            VicinalBaseline::ViDann => loss_vidann(m, vb, lambda),
            VicinalBaseline::ViRca => loss_virca(m, vb, lambda),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for VicinalBaseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

impl FromStr for VicinalBaseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        compose_vicinal_baseline(s)
    }
}

/// Resolves a vicinal baseline by name (`vidann` or `virca`).
pub fn compose_vicinal_baseline(name: &str) -> Result<VicinalBaseline> {
    match name.to_ascii_lowercase().as_str() {
        "vidann" => Ok(VicinalBaseline::ViDann),
        "virca" => Ok(VicinalBaseline::ViRca),
        _ => Err(Error::Config(format!("unknown vicinal baseline {name:?}"))),
    }
}

fn layer_ids(layers: &[DenseLayer]) -> Vec<ParamId> {
    layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

/// Binary cross-entropy on a logit: value and `∂/∂u`.
pub fn bce_with_logit(u: f64, label: f64) -> (f64, f64) {
    let value = (u.max(0.0) - label * u) + (-u.abs()).exp().ln_1p();
    let sigmoid = if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    };
    (value, sigmoid - label)
}

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let lse = crate::model::softmax::log_sum_exp(z);
    z.iter().map(|v| v - lse).collect()
}

/// Task classifier `C` on a feature batch: logits and row probabilities.
struct TaskPass {
    features: Matrix,
    probs: Matrix,
    log_probs: Matrix,
}

impl TaskPass {
    fn new(m: &JointModel, c: DenseLayer, features: &Matrix) -> Result<Self> {
        let logits = c.forward(&m.params, features)?;
        let mut log_probs = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            log_probs.row_mut(r).copy_from_slice(&log_softmax_row(logits.row(r)));
        }
        let probs = log_probs.map(f64::exp);
        Ok(TaskPass {
            features: features.clone(),
            probs,
            log_probs,
        })
    }

    fn pseudo_labels(&self) -> Vec<usize> {
        self.probs.row_iter().map(|r| argmax(r).0).collect()
    }

    /// `mean −log C(x)_y` and its logit gradient.
    fn ce(&self, ys: &[usize]) -> (f64, Matrix) {
        let n = ys.len() as f64;
        let mut d = self.probs.scaled(1.0 / n);
        let mut value = 0.0;
        for (i, &y) in ys.iter().enumerate() {
            value -= self.log_probs[(i, y)] / n;
            d.row_mut(i)[y] -= 1.0 / n;
        }
        (value, d)
    }
}

/// Gradient holder for several passes through `G`.
struct Backprop<'a> {
    m: &'a JointModel,
    grads: GradSet,
}

impl<'a> Backprop<'a> {
    fn new(m: &'a JointModel) -> Self {
        Backprop {
            m,
            grads: GradSet::zeros_like(&m.params),
        }
    }

    fn pass(&mut self, pass: &ForwardPass, d_logits: Option<&Matrix>, d_features: Option<&Matrix>) -> Result<()> {
        self.m.backward(pass, d_logits, d_features, true, &mut self.grads)
    }

    /// Pushes a task-classifier logit gradient into `C` and returns the feature gradient.
    fn task(&mut self, c: DenseLayer, tp: &TaskPass, d_logits: &Matrix) -> Result<Matrix> {
        c.backward(&self.m.params, &tp.features, d_logits, &mut self.grads)
    }

    fn finish(self) -> GradSet {
        self.grads
    }
}

fn combine(parts: &[(&GradSet, f64)], like: &JointModel) -> Result<GradSet> {
    let mut out = GradSet::zeros_like(&like.params);
    for (g, w) in parts {
        out.axpy(*w, g)?;
    }
    Ok(out)
}

/// Task loss on `C` for a source pass: value and full gradient.
fn task_loss(m: &JointModel, c: DenseLayer, ps: &ForwardPass, ys: &[usize]) -> Result<(f64, GradSet)> {
    let tp = TaskPass::new(m, c, &ps.features)?;
    let (value, d) = tp.ce(ys);
    let mut bp = Backprop::new(m);
    let df = bp.task(c, &tp, &d)?;
    bp.pass(ps, None, Some(&df))?;
    Ok((value, bp.finish()))
}

// ---------------------------------------------------------------------------
// DANN
// ---------------------------------------------------------------------------

/// Domain BCE of `D` over a batch of features with per-row `(label, weight)`
/// pairs: value and feature gradient, with `D`'s own gradient in `grads`.
fn domain_bce(
    m: &JointModel,
    d: DenseLayer,
    features: &Matrix,
    targets: &[&[(f64, f64)]],
    grads: &mut GradSet,
) -> Result<(f64, Matrix)> {
    let u = d.forward(&m.params, features)?;
    let mut du = Matrix::zeros(u.rows(), 1);
    let mut value = 0.0;
    for r in 0..u.rows() {
        for &(label, w) in targets[r] {
            let (v, g) = bce_with_logit(u[(r, 0)], label);
            value += w * v;
            du.row_mut(r)[0] += w * g;
        }
    }
    let df = d.backward(&m.params, features, &du, grads)?;
    Ok((value, df))
}

fn domain_side(
    m: &JointModel,
    d: DenseLayer,
    ps: &ForwardPass,
    pt: &ForwardPass,
    src_label: f64,
) -> Result<(f64, GradSet)> {
    let n = (ps.len() + pt.len()) as f64;
    let src = [(src_label, 1.0 / n)];
    let tgt = [(1.0 - src_label, 1.0 / n)];
    let mut bp = Backprop::new(m);
    let (vs, dfs) = domain_bce(m, d, &ps.features, &vec![&src[..]; ps.len()], &mut bp.grads)?;
    let (vt, dft) = domain_bce(m, d, &pt.features, &vec![&tgt[..]; pt.len()], &mut bp.grads)?;
    bp.pass(ps, None, Some(&dfs))?;
    bp.pass(pt, None, Some(&dft))?;
    Ok((vs + vt, bp.finish()))
}

/// DANN: task cross-entropy on `C`; `D` separates source (label 0) from
/// target (label 1) with `(1/(n_s+n_t)) Σ BCE`; the generator minimizes the
/// same BCE with inverted labels.
pub fn loss_dann(m: &JointModel, batch: &LabeledBatch, lambda: f64) -> Result<BaselineLoss> {
    batch.require_both()?;
    batch.check_labels(m.k())?;
    let (c, d) = (m.task_head()?, m.domain_head()?);
    let ps = m.forward(&batch.xs)?;
    let pt = m.forward(&batch.xt)?;
    let (task, g_task) = task_loss(m, c, &ps, &batch.ys)?;
    let (disc_adv, g_disc) = domain_side(m, d, &ps, &pt, 0.0)?;
    let (gen_adv, g_flip) = domain_side(m, d, &ps, &pt, 1.0)?;
    Ok(BaselineLoss {
        disc: SideLoss {
            value: disc_adv,
            grads: g_disc,
        },
        gen: SideLoss {
            value: task + lambda * gen_adv,
            grads: combine(&[(&g_task, 1.0), (&g_flip, lambda)], m)?,
        },
        task,
        disc_adv,
        gen_adv,
    })
}

// ---------------------------------------------------------------------------
// MADA
// ---------------------------------------------------------------------------

/// Inputs of the per-category domain classifiers: `ŷ_{i,k} · f_i` for each `k`.
pub fn mada_head_inputs(yhat: &Matrix, features: &Matrix) -> Vec<Matrix> {
    (0..yhat.cols())
        .map(|k| Matrix::from_fn(features.rows(), features.cols(), |r, c| yhat[(r, k)] * features[(r, c)]))
        .collect()
}

/// `Σ_k BCE(F_k(ŷ_k·f), d)` scaled by `w` for one pass, with gradients
/// into `{F_k}`, `C` and `G`.
fn mada_pass(m: &JointModel, c: DenseLayer, pass: &ForwardPass, label: f64, w: f64, bp: &mut Backprop<'_>) -> Result<f64> {
    let heads = &m.aux.category_domain;
    let tp = TaskPass::new(m, c, &pass.features)?;
    let inputs = mada_head_inputs(&tp.probs, &pass.features);
    let n = pass.len();
    let mut d_features = Matrix::zeros(n, pass.features.cols());
    let mut d_yhat = Matrix::zeros(n, heads.len());
    let mut value = 0.0;
    for (k, (head, h)) in heads.iter().zip(&inputs).enumerate() {
        let u = head.forward(&m.params, h)?;
        let mut du = Matrix::zeros(n, 1);
        for r in 0..n {
            let (v, g) = bce_with_logit(u[(r, 0)], label);
            value += w * v;
            du.row_mut(r)[0] = w * g;
        }
        let dh = head.backward(&m.params, h, &du, &mut bp.grads)?;
        for r in 0..n {
            let yk = tp.probs[(r, k)];
            let f = pass.features.row(r);
            let dh_r = dh.row(r);
            d_yhat.row_mut(r)[k] = dh_r.iter().zip(f).map(|(a, b)| a * b).sum();
            for (df, g) in d_features.row_mut(r).iter_mut().zip(dh_r) {
                *df += yk * g;
            }
        }
    }
    // through ŷ = softmax(C logits)
    let mut d_logits = Matrix::zeros(n, heads.len());
    for r in 0..n {
        let q = tp.probs.row(r);
        let g = d_yhat.row(r);
        let inner: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
        for (k, dl) in d_logits.row_mut(r).iter_mut().enumerate() {
            *dl = q[k] * (g[k] - inner);
        }
    }
    let df_c = bp.task(c, &tp, &d_logits)?;
    d_features.axpy(1.0, &df_c)?;
    bp.pass(pass, None, Some(&d_features))?;
    Ok(value)
}

/// MADA: `K` category-wise domain classifiers, each fed the features scaled
/// by the matching task probability. The discriminators minimize
/// `(1/(n_s+n_t)) Σ_i Σ_k BCE(F_k(ŷ_{i,k}·G(x_i)), d_i)`; `G` and `C`
/// minimize the task loss minus `λ` times that term.
pub fn loss_mada(m: &JointModel, batch: &LabeledBatch, lambda: f64) -> Result<BaselineLoss> {
    batch.require_both()?;
    batch.check_labels(m.k())?;
    let c = m.task_head()?;
    if m.aux.category_domain.len() != m.k() {
        return Err(Error::Contract(format!(
            "expected {} per-category domain classifiers, found {}",
            m.k(),
            m.aux.category_domain.len()
        )));
    }
    let ps = m.forward(&batch.xs)?;
    let pt = m.forward(&batch.xt)?;
    let (task, g_task) = task_loss(m, c, &ps, &batch.ys)?;
    let w = 1.0 / (ps.len() + pt.len()) as f64;
    let mut bp = Backprop::new(m);
    let disc_adv = mada_pass(m, c, &ps, 0.0, w, &mut bp)? + mada_pass(m, c, &pt, 1.0, w, &mut bp)?;
    let g_disc = bp.finish();
    Ok(BaselineLoss {
        gen: SideLoss {
            value: task - lambda * disc_adv,
            grads: combine(&[(&g_task, 1.0), (&g_disc, -lambda)], m)?,
        },
        disc: SideLoss {
            value: disc_adv,
            grads: g_disc,
        },
        task,
        disc_adv,
        gen_adv: -disc_adv,
    })
}

// ---------------------------------------------------------------------------
// RCA
// ---------------------------------------------------------------------------

/// `Σ_i w_i·(−log p_{idx_i})` over a pass; returns value and logit gradient.
fn joint_ce_rows(stats: &[RowStats], targets: &[&[(usize, f64)]]) -> (f64, Matrix) {
    let k2 = stats.first().map_or(0, |s| 2 * s.k);
    let mut g = Matrix::zeros(stats.len(), k2);
    let mut value = 0.0;
    for (r, st) in stats.iter().enumerate() {
        for &(idx, w) in targets[r] {
            value += st.joint_ce(idx, w, g.row_mut(r));
        }
    }
    (value, g)
}

fn joint_side(m: &JointModel, passes: &[(&ForwardPass, Vec<Vec<(usize, f64)>>)]) -> Result<(f64, GradSet)> {
    let mut bp = Backprop::new(m);
    let mut value = 0.0;
    for (pass, targets) in passes {
        let refs: Vec<&[(usize, f64)]> = targets.iter().map(Vec::as_slice).collect();
        let (v, g) = joint_ce_rows(&pass.row_stats(m.k()), &refs);
        value += v;
        bp.pass(pass, Some(&g), None)?;
    }
    Ok((value, bp.finish()))
}

/// RCA: the joint head classifies source at `y` and target at `ŷ^t + K`
/// with `ŷ^t = argmax C(G(x^t))`; `G` and `C` minimize the task loss plus
/// `λ` times the domain-flipped joint cross-entropies.
pub fn loss_rca(m: &JointModel, batch: &LabeledBatch, lambda: f64) -> Result<BaselineLoss> {
    batch.require_both()?;
    batch.check_labels(m.k())?;
    let (c, k) = (m.task_head()?, m.k());
    let ps = m.forward(&batch.xs)?;
    let pt = m.forward(&batch.xt)?;
    let (task, g_task) = task_loss(m, c, &ps, &batch.ys)?;
    let pseudo = TaskPass::new(m, c, &pt.features)?.pseudo_labels();
    let (ws, wt) = (1.0 / ps.len() as f64, 1.0 / pt.len() as f64);
    let targets = |labels: &[usize], shift: usize, w: f64| -> Vec<Vec<(usize, f64)>> {
        labels.iter().map(|&y| vec![(y + shift, w)]).collect()
    };
    let (disc_adv, g_disc) = joint_side(m, &[(&ps, targets(&batch.ys, 0, ws)), (&pt, targets(&pseudo, k, wt))])?;
    let (gen_adv, g_flip) = joint_side(m, &[(&ps, targets(&batch.ys, k, ws)), (&pt, targets(&pseudo, 0, wt))])?;
    Ok(BaselineLoss {
        disc: SideLoss {
            value: disc_adv,
            grads: g_disc,
        },
        gen: SideLoss {
            value: task + lambda * gen_adv,
            grads: combine(&[(&g_task, 1.0), (&g_flip, lambda)], m)?,
        },
        task,
        disc_adv,
        gen_adv,
    })
}

// ---------------------------------------------------------------------------
// SymNet
// ---------------------------------------------------------------------------

/// SymNet on the joint head alone.
///
/// Discriminator side: source cross-entropy on both heads plus the binary
/// cross-entropy of the block masses against the domain label, averaged
/// over `n_s + n_t`. Generator side: half of the source joint cross-entropies
/// at `y` and `y + K`, plus `λ` times the target domain confusion
/// `−(½ log mass_src + ½ log mass_tgt)`.
pub fn loss_symnet(m: &JointModel, batch: &LabeledBatch, lambda: f64) -> Result<BaselineLoss> {
    batch.require_both()?;
    batch.check_labels(m.k())?;
    let k = m.k();
    let ps = m.forward(&batch.xs)?;
    let pt = m.forward(&batch.xt)?;
    let (ss, st) = (ps.row_stats(k), pt.row_stats(k));
    let (ns, nt) = (ss.len() as f64, st.len() as f64);
    let n = ns + nt;

    // discriminator side
    let mut gs = Matrix::zeros(ss.len(), 2 * k);
    let mut gt = Matrix::zeros(st.len(), 2 * k);
    let mut task = 0.0;
    let mut disc_adv = 0.0;
    for (i, s) in ss.iter().enumerate() {
        let row = gs.row_mut(i);
        task += s.head_ce(Block::Source, batch.ys[i], 1.0 / ns, row);
        task += s.head_ce(Block::Target, batch.ys[i], 1.0 / ns, row);
        disc_adv += s.neg_log_mass(Block::Source, 1.0 / n, row);
    }
    for (j, s) in st.iter().enumerate() {
        disc_adv += s.neg_log_mass(Block::Target, 1.0 / n, gt.row_mut(j));
    }
    let mut bp = Backprop::new(m);
    bp.pass(&ps, Some(&gs), None)?;
    bp.pass(&pt, Some(&gt), None)?;
    let g_disc = bp.finish();

    // generator side
    let mut gs = Matrix::zeros(ss.len(), 2 * k);
    let mut gt = Matrix::zeros(st.len(), 2 * k);
    let mut gen_cls = 0.0;
    for (i, s) in ss.iter().enumerate() {
        let row = gs.row_mut(i);
        gen_cls += s.joint_ce(batch.ys[i], 0.5 / ns, row);
        gen_cls += s.joint_ce(batch.ys[i] + k, 0.5 / ns, row);
    }
    let mut gen_adv = 0.0;
    for (j, s) in st.iter().enumerate() {
        let row = gt.row_mut(j);
        gen_adv += s.neg_log_mass(Block::Source, 0.5 * lambda / nt, row);
        gen_adv += s.neg_log_mass(Block::Target, 0.5 * lambda / nt, row);
    }
    let mut bp = Backprop::new(m);
    bp.pass(&ps, Some(&gs), None)?;
    bp.pass(&pt, Some(&gt), None)?;
    let gen_unit = if lambda != 0.0 {
        gen_adv / lambda
    } else {
        st.iter()
            .map(|s| -0.5 * (s.log_mass(Block::Source) + s.log_mass(Block::Target)) / nt)
            .sum()
    };
    Ok(BaselineLoss {
        disc: SideLoss {
            value: task + disc_adv,
            grads: g_disc,
        },
        gen: SideLoss {
            value: gen_cls + gen_adv,
            grads: bp.finish(),
        },
        task,
        disc_adv,
        gen_adv: gen_unit,
    })
}

// ---------------------------------------------------------------------------
// Vicinal baselines
// ---------------------------------------------------------------------------

fn vicinal_source_batch(vb: &VicinalBatch) -> Result<()> {
    if vb.is_empty() {
        return Err(Error::Contract("vicinal batch is empty".into()));
    }
    Ok(())
}

/// ViDANN: `D` scores mixed instances with target `α` toward source and
/// `1−α` toward target: `mean_l [α·BCE(u_l, 0) + (1−α)·BCE(u_l, 1)]`; the
/// generator uses the swapped labels. The task loss stays on raw source.
pub fn loss_vidann(m: &JointModel, vb: &VicinalBatch, lambda: f64) -> Result<BaselineLoss> {
    vicinal_source_batch(vb)?;
    let (c, d) = (m.task_head()?, m.domain_head()?);
    let ps = m.forward(&vb.xs_origin)?;
    let pv = m.forward(&vb.xv)?;
    let (task, g_task) = task_loss(m, c, &ps, &vb.ys)?;
    let n = vb.len() as f64;
    let side = |flip: bool| -> Result<(f64, GradSet)> {
        let targets: Vec<[(f64, f64); 2]> = vb
            .alpha
            .iter()
            .map(|&a| {
                let (ls, lt) = if flip { (1.0, 0.0) } else { (0.0, 1.0) };
                [(ls, a / n), (lt, (1.0 - a) / n)]
            })
            .collect();
        let refs: Vec<&[(f64, f64)]> = targets.iter().map(|t| &t[..]).collect();
        let mut bp = Backprop::new(m);
        let (v, df) = domain_bce(m, d, &pv.features, &refs, &mut bp.grads)?;
        bp.pass(&pv, None, Some(&df))?;
        Ok((v, bp.finish()))
    };
    let (disc_adv, g_disc) = side(false)?;
    let (gen_adv, g_flip) = side(true)?;
    Ok(BaselineLoss {
        disc: SideLoss {
            value: disc_adv,
            grads: g_disc,
        },
        gen: SideLoss {
            value: task + lambda * gen_adv,
            grads: combine(&[(&g_task, 1.0), (&g_flip, lambda)], m)?,
        },
        task,
        disc_adv,
        gen_adv,
    })
}

/// ViRCA: the joint head classifies a mixed instance at `y^s` with weight
/// `α` and at `ŷ^t + K` with weight `1−α`, where `ŷ^t` is the task
/// classifier's pseudo label of the target constituent; the generator uses
/// the domain-flipped indices. The task loss stays on raw source.
pub fn loss_virca(m: &JointModel, vb: &VicinalBatch, lambda: f64) -> Result<BaselineLoss> {
    vicinal_source_batch(vb)?;
    let (c, k) = (m.task_head()?, m.k());
    if let Some(&y) = vb.ys.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("source label {y} outside 0..{k}")));
    }
    let ps = m.forward(&vb.xs_origin)?;
    let pv = m.forward(&vb.xv)?;
    let (task, g_task) = task_loss(m, c, &ps, &vb.ys)?;
    let (features_t, _) = m.features(&vb.xt_origin)?;
    let pseudo = TaskPass::new(m, c, &features_t)?.pseudo_labels();
    let n = vb.len() as f64;
    let targets = |flip: bool| -> Vec<Vec<(usize, f64)>> {
        (0..vb.len())
            .map(|l| {
                let a = vb.alpha[l];
                let (src_shift, tgt_shift) = if flip { (k, 0) } else { (0, k) };
                vec![(vb.ys[l] + src_shift, a / n), (pseudo[l] + tgt_shift, (1.0 - a) / n)]
            })
            .collect()
    };
    let (disc_adv, g_disc) = joint_side(m, &[(&pv, targets(false))])?;
    let (gen_adv, g_flip) = joint_side(m, &[(&pv, targets(true))])?;
    Ok(BaselineLoss {
        disc: SideLoss {
            value: disc_adv,
            grads: g_disc,
        },
        gen: SideLoss {
            value: task + lambda * gen_adv,
            grads: combine(&[(&g_task, 1.0), (&g_flip, lambda)], m)?,
        },
        task,
        disc_adv,
        gen_adv,
    })
}

// ---------------------------------------------------------------------------
// Training steps
// ---------------------------------------------------------------------------

fn two_sided_step(
    m: &mut JointModel,
    base: Baseline,
    mut eval: impl FnMut(&JointModel) -> Result<BaselineLoss>,
    lambda: f64,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
) -> Result<LossReport> {
    let disc_ids = base.discriminator_ids(m)?;
    let gen_ids = base.generator_ids(m)?;
    let first = eval(m)?;
    let mut report = first.report(lambda);
    let mut g = first.disc.grads;
    g.retain_ids(&disc_ids);
    apply(m, &g, optimizer, rates, &disc_ids)?;

    let second = eval(m)?;
    report.g_adv_d = second.gen_adv;
    let mut g = second.gen.grads;
    g.retain_ids(&gen_ids);
    apply(m, &g, optimizer, rates, &gen_ids)?;
    if !report.is_finite() {
        return Err(Error::NonFinite(format!("loss report {report:?}")));
    }
    Ok(report)
}

/// One alternating iteration of a plain baseline.
pub fn baseline_step(
    m: &mut JointModel,
    batch: &LabeledBatch,
    baseline: Baseline,
    lambda: f64,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
) -> Result<LossReport> {
    two_sided_step(m, baseline, |m| baseline.loss(m, batch, lambda), lambda, optimizer, rates)
}

/// One alternating iteration of a vicinal baseline on a fixed vicinal batch.
pub fn vicinal_baseline_step_with(
    m: &mut JointModel,
    vb: &VicinalBatch,
    which: VicinalBaseline,
    lambda: f64,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
) -> Result<LossReport> {
    two_sided_step(m, which.base(), |m| which.loss(m, vb, lambda), lambda, optimizer, rates)
}

/// One alternating iteration of a vicinal baseline; one mixed instance is
/// drawn per source/target pair.
pub fn vicinal_baseline_step(
    m: &mut JointModel,
    batch: &LabeledBatch,
    which: VicinalBaseline,
    lambda: f64,
    sampler: &mut dyn MixingSampler,
    optimizer: &mut OptimizerState,
    rates: GroupRates,
) -> Result<VicinalStep> {
    batch.require_both()?;
    let vb = make_vicinal(&batch.xs, &batch.ys, &batch.xt, sampler)?;
    let report = vicinal_baseline_step_with(m, &vb, which, lambda, optimizer, rates)?;
    Ok(VicinalStep {
        report,
        mean_alpha: vb.mean_alpha(),
    })
}
