//! Self-verification: gradient checks, objective identities, sampler
//! statistics and clustering oracles, each reported as a named check.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{loss_dann, loss_mada, Baseline, BaselineLoss, VicinalBaseline};
use crate::catda::{
    category_source_term, category_target_term, domain_term, loss, Component, LabeledBatch, WeightGrad, Weighting,
};
use crate::model::{AuxHeadsConfig, Block, JointModel, ModelConfig, ProbViews, RowStats};
use crate::numcore::{grad_check, Activation, GradSet, Matrix, ParamSet};
use crate::tdsr::{assign_features, cosine_dissimilarity, loss_tdsr, refine_features, ClusterState};
use crate::vicda::{vic_category_term, vic_domain_term, vic_loss, BetaSampler, VicComponent, VicinalBatch};
use crate::Result;

/// Relative tolerance of the gradient checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Step of the central differences.
pub const GRAD_EPS: f64 = 1e-5;
/// Absolute tolerance of the objective identities.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Absolute tolerance between an analytic logit gradient and differences of
/// the divergence-plus-entropy form.
pub const IDENTITY_GRAD_TOL: f64 = 1e-6;
/// Largest allowed gap between `p^s`/`p^t` and the renormalized joint blocks.
pub const LINKAGE_TOL: f64 = 1e-12;
/// Tolerance of the sampler mean and interval masses.
pub const BETA_TOL: f64 = 0.01;
/// Input and hidden width of the probe networks.
pub const PROBE_DIM: usize = 5;
pub const PROBE_HIDDEN: usize = 8;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// All checks of one verification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}

/// Knobs of [`verify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random configurations of the identity checks.
    pub configs: usize,
    pub beta_draws: usize,
    /// How the category weights enter the gradient of the identity check.
    pub weight_grad: WeightGrad,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            configs: 1000,
            beta_draws: 100_000,
            weight_grad: WeightGrad::Live,
        }
    }
}

/// Runs every check. With detached weights the identity check is expected
/// to fail, which makes the run a negative control.
pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = vec![
        check_gradients(opts.seed)?,
        check_decomposition(opts.configs, opts.weight_grad, opts.seed),
    ];
    if opts.weight_grad == WeightGrad::Live {
        let control = check_decomposition(opts.configs, WeightGrad::Detached, opts.seed);
        checks.push(CheckResult::new(
            "negative control",
            !control.passed,
            format!("detached weights: {}", control.detail),
        ));
    }
    checks.extend([
        check_optimum(opts.configs, opts.seed),
        check_linkage(opts.seed)?,
        check_vicinal_collapse(opts.seed)?,
        check_beta_sampler(BetaSampler::DEFAULT_BETA, opts.beta_draws, opts.seed)?,
        check_clustering(opts.configs, opts.seed)?,
        check_mada_single_category(opts.seed)?,
    ]);
    Ok(VerifyReport { checks })
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

fn probe_model(k: usize, aux: AuxHeadsConfig, seed: u64) -> Result<JointModel> {
    let mut cfg = ModelConfig::new(PROBE_DIM, vec![PROBE_HIDDEN], k);
    cfg.activation = Activation::Tanh;
    cfg.aux = aux;
    JointModel::new(cfg, seed)
}

fn probe_batch(k: usize, rng: &mut ChaCha8Rng) -> Result<LabeledBatch> {
    let mut cell = || rng.random_range(-1.5..1.5);
    let xs = Matrix::from_fn(4, PROBE_DIM, |_, _| cell());
    let xt = Matrix::from_fn(4, PROBE_DIM, |_, _| cell());
    LabeledBatch::new(xs, (0..4).map(|i| i % k).collect(), xt)
}

fn with_params(m: &JointModel, p: &ParamSet) -> JointModel {
    let mut mm = m.clone();
    mm.params = p.clone();
    mm
}

/// Central-difference checks of every training loss.
pub fn check_gradients(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 3;
    let mut worst = (0.0f64, String::new());
    let mut count = 0usize;
    let mut record = |name: String, rel: f64| {
        count += 1;
        if rel > worst.0 || rel.is_nan() {
            worst = (if rel.is_nan() { f64::INFINITY } else { rel }, name);
        }
    };

    let m = probe_model(k, AuxHeadsConfig::default(), seed)?;
    let batch = probe_batch(k, &mut rng)?;
    let alphas: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    let vb = VicinalBatch::with_alphas(&batch.xs, &batch.ys, &batch.xt, alphas)?;
    for w in [Weighting::CrossDomain, Weighting::SameDomain] {
        for c in [
            Component::Cls,
            Component::DomainAdvF,
            Component::DomainAdvG,
            Component::CategoryAdvF(w),
            Component::CategoryAdvG(w),
            Component::Entropy,
        ] {
            let r = grad_check(|p| loss(&with_params(&m, p), &batch, c), &m.params, GRAD_EPS)?;
            record(format!("{c:?}"), r.max_rel_error);
        }
        for c in [
            VicComponent::DomainAdvF,
            VicComponent::DomainAdvG,
            VicComponent::CategoryAdvF(w),
            VicComponent::CategoryAdvG(w),
        ] {
            let r = grad_check(|p| vic_loss(&with_params(&m, p), &vb, c), &m.params, GRAD_EPS)?;
            record(format!("vicinal {c:?}"), r.max_rel_error);
        }
    }
    let labels: Vec<usize> = (0..4).map(|i| (i + 1) % k).collect();
    let r = grad_check(|p| loss_tdsr(&with_params(&m, p), &batch.xt, &labels), &m.params, GRAD_EPS)?;
    record("tdsr".into(), r.max_rel_error);

    let sides = |l: BaselineLoss, disc: bool| -> (f64, GradSet) {
        if disc {
            (l.disc.value, l.disc.grads)
        } else {
            (l.gen.value, l.gen.grads)
        }
    };
    for b in Baseline::ALL {
        let bm = probe_model(k, b.aux_heads(), seed ^ 0x5a)?;
        for disc in [true, false] {
            let r = grad_check(
                |p| Ok(sides(b.loss(&with_params(&bm, p), &batch, 0.7)?, disc)),
                &bm.params,
                GRAD_EPS,
            )?;
            record(format!("{b} {}", if disc { "disc" } else { "gen" }), r.max_rel_error);
        }
    }
    for v in [VicinalBaseline::ViDann, VicinalBaseline::ViRca] {
        let bm = probe_model(k, v.base().aux_heads(), seed ^ 0xa5)?;
        for disc in [true, false] {
            let r = grad_check(|p| Ok(sides(v.loss(&with_params(&bm, p), &vb, 0.7)?, disc)), &bm.params, GRAD_EPS)?;
            record(format!("{v} {}", if disc { "disc" } else { "gen" }), r.max_rel_error);
        }
    }
    Ok(CheckResult::new(
        "gradient checks",
        worst.0 <= GRAD_TOL,
        format!("{count} losses, worst relative error {:.2e} ({})", worst.0, worst.1),
    ))
}

// ---------------------------------------------------------------------------
// Objective identities
// ---------------------------------------------------------------------------

fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `KL(q ‖ p_block) + H(q)`, with `q` the head of `weight_block` and `p_block`
/// the joint probabilities of `log_block`, from plain probabilities.
pub fn kl_plus_entropy(z: &[f64], k: usize, log_block: Block, weight_block: Block) -> f64 {
    let p = naive_softmax(z);
    let wo = weight_block.offset(k);
    let q = naive_softmax(&z[wo..wo + k]);
    let lo = log_block.offset(k);
    let kl: f64 = (0..k).map(|i| q[i] * (q[i].ln() - p[lo + i].ln())).sum();
    let h: f64 = -q.iter().map(|v| v * v.ln()).sum::<f64>();
    kl + h
}

/// Cross-weighted target term of one row and its logit gradient.
fn target_term(z: &[f64], k: usize, log_block: Block, mode: WeightGrad) -> (f64, Vec<f64>) {
    let st = [RowStats::new(z, k)];
    let mut g = Matrix::zeros(1, 2 * k);
    let v = category_target_term(&st, log_block, log_block.other(), mode, 1.0, &mut g);
    (v, g.into_vec())
}

fn random_logits(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let k = rng.random_range(2..=6);
    let scale = rng.random_range(0.1..6.0);
    ((0..2 * k).map(|_| rng.random_range(-scale..scale)).collect(), k)
}

/// Both category-level target terms against their divergence-plus-entropy
/// form: values, the entropy lower bound and the logit gradients.
pub fn check_decomposition(configs: usize, mode: WeightGrad, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0);
    let (mut value_err, mut bound_violation, mut grad_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..configs {
        let (z, k) = random_logits(&mut rng);
        for log_block in [Block::Target, Block::Source] {
            let (v, g) = target_term(&z, k, log_block, mode);
            let reference = kl_plus_entropy(&z, k, log_block, log_block.other());
            value_err = value_err.max((v - reference).abs());
            let wo = log_block.other().offset(k);
            let q = naive_softmax(&z[wo..wo + k]);
            let entropy = -q.iter().map(|p| p * p.ln()).sum::<f64>();
            bound_violation = bound_violation.max(entropy - v);
            for i in 0..2 * k {
                let mut zp = z.clone();
                zp[i] += GRAD_EPS;
                let plus = kl_plus_entropy(&zp, k, log_block, log_block.other());
                zp[i] -= 2.0 * GRAD_EPS;
                let minus = kl_plus_entropy(&zp, k, log_block, log_block.other());
                grad_err = grad_err.max((g[i] - (plus - minus) / (2.0 * GRAD_EPS)).abs());
            }
        }
    }
    let passed = value_err <= IDENTITY_TOL && bound_violation <= IDENTITY_TOL && grad_err <= IDENTITY_GRAD_TOL;
    CheckResult::new(
        "decomposition identities",
        passed,
        format!(
            "{configs} configs: value error {value_err:.2e}, entropy bound violation {:.2e}, gradient error {grad_err:.2e}",
            bound_violation.max(0.0)
        ),
    )
}

/// With the source head fixed, the classifier-side target term over
/// candidate target-block shapes of equal block mass is smallest when the
/// block reproduces `p^s`.
pub fn check_optimum(samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b7);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let (z, k) = random_logits(&mut rng);
        let block_lse = crate::model::softmax::log_sum_exp(&z[k..]);
        let with_block = |q: &[f64]| -> f64 {
            let mut zz = z[..k].to_vec();
            zz.extend(q.iter().map(|v| v.ln() + block_lse));
            target_term(&zz, k, Block::Target, WeightGrad::Live).0
        };
        let ps = naive_softmax(&z[..k]);
        let best = with_block(&ps);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        worst = worst.min(with_block(&q) - best);
    }
    CheckResult::new(
        "optimum at the weighting distribution",
        worst >= -IDENTITY_TOL,
        format!("{samples} candidates, smallest excess over the optimum {worst:.3e}"),
    )
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

/// `p^s`/`p^t` against the renormalized blocks of `p` on random batches.
pub fn check_linkage(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let mut worst = 0.0f64;
    for k in 1..=5 {
        let m = probe_model(k, AuxHeadsConfig::default(), seed + k as u64)?;
        let x = Matrix::from_fn(16, PROBE_DIM, |_, _| rng.random_range(-3.0..3.0));
        worst = worst.max(m.prob_views(&x)?.max_linkage_error());
        let extreme = Matrix::from_fn(16, 2 * k, |_, _| rng.random_range(-200.0..200.0));
        worst = worst.max(ProbViews::from_logits(&extreme, k).max_linkage_error());
    }
    Ok(CheckResult::new(
        "probability linkage",
        worst <= LINKAGE_TOL,
        format!("max deviation {worst:.2e}"),
    ))
}

/// Vicinal terms at `α = 1` and `α = 0` against the raw source and target
/// terms, compared bit for bit.
pub fn check_vicinal_collapse(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7c);
    let k = 3;
    let m = probe_model(k, AuxHeadsConfig::default(), seed)?;
    let batch = probe_batch(k, &mut rng)?;
    let stats = |x: &Matrix| -> Result<Vec<RowStats>> { Ok(m.forward(x)?.row_stats(k)) };
    let (ss, st) = (stats(&batch.xs)?, stats(&batch.xt)?);
    let n = batch.xs.rows();
    let scratch = || Matrix::zeros(n, 2 * k);
    let mut mismatches = Vec::new();
    let mut compared = 0usize;
    for (alpha, from_source) in [(1.0, true), (0.0, false)] {
        let vb = VicinalBatch::with_alphas(&batch.xs, &batch.ys, &batch.xt, vec![alpha; n])?;
        let sv = stats(&vb.xv)?;
        let so = stats(&vb.xt_origin)?;
        for block in [Block::Source, Block::Target] {
            let vic = vic_domain_term(&sv, &vb.alpha, block, 1.0, &mut scratch());
            let raw = if from_source {
                domain_term(&ss, &[], block, 1.0, &mut scratch(), &mut scratch())
            } else {
                domain_term(&[], &st, block, 1.0, &mut scratch(), &mut scratch())
            };
            compared += 1;
            if vic.to_bits() != raw.to_bits() {
                mismatches.push(format!("domain {block:?} at alpha {alpha}"));
            }
            for weighting in [Weighting::CrossDomain, Weighting::SameDomain] {
                let vic = vic_category_term(
                    &sv,
                    &so,
                    &vb.ys,
                    &vb.alpha,
                    block,
                    weighting,
                    1.0,
                    &mut scratch(),
                    &mut scratch(),
                );
                let raw = if from_source {
                    category_source_term(&ss, &batch.ys, block, 1.0, &mut scratch())
                } else {
                    let log_block = block.other();
                    category_target_term(
                        &st,
                        log_block,
                        weighting.weight_block(log_block),
                        WeightGrad::Live,
                        1.0,
                        &mut scratch(),
                    )
                };
                compared += 1;
                if vic.to_bits() != raw.to_bits() {
                    mismatches.push(format!("category {block:?} {weighting:?} at alpha {alpha}"));
                }
            }
        }
    }
    Ok(CheckResult::new(
        "vicinal collapse",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{compared} terms identical to the bit")
        } else {
            format!("differs: {}", mismatches.join(", "))
        },
    ))
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Unnormalized `∫_0^x t^{β−1}(1−t)^{β−1} dt` for `x ≤ ½`, through the
/// substitution `t = u^{1/β}` that removes the endpoint singularity.
fn beta_left_integral(beta: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let upper = x.powf(beta);
    simpson(|u| (1.0 - u.powf(1.0 / beta)).powf(beta - 1.0), 0.0, upper, 4000) / beta
}

/// `P(X ≤ x)` for `X ~ Beta(β, β)` by quadrature.
pub fn beta_cdf_quadrature(beta: f64, x: f64) -> f64 {
    let half = beta_left_integral(beta, 0.5);
    let x = x.clamp(0.0, 1.0);
    let unnorm = if x <= 0.5 {
        beta_left_integral(beta, x)
    } else {
        2.0 * half - beta_left_integral(beta, 1.0 - x)
    };
    unnorm / (2.0 * half)
}

/// Mean and interval masses of the sampler against the quadrature oracle.
pub fn check_beta_sampler(beta: f64, draws: usize, seed: u64) -> Result<CheckResult> {
    let mut sampler = BetaSampler::new(beta, seed ^ 0xbe7a)?;
    let mut bins = [0usize; 10];
    let mut middle = 0usize;
    let mut sum = 0.0;
    for _ in 0..draws {
        let a = sampler.sample();
        sum += a;
        bins[((a * 10.0) as usize).min(9)] += 1;
        middle += usize::from(a > 0.4 && a < 0.6);
    }
    let n = draws.max(1) as f64;
    let mean_err = (sum / n - 0.5).abs();
    let mut mass_err = ((middle as f64 / n) - (beta_cdf_quadrature(beta, 0.6) - beta_cdf_quadrature(beta, 0.4))).abs();
    for (i, &c) in bins.iter().enumerate() {
        let lo = i as f64 / 10.0;
        let expected = beta_cdf_quadrature(beta, lo + 0.1) - beta_cdf_quadrature(beta, lo);
        mass_err = mass_err.max((c as f64 / n - expected).abs());
    }
    Ok(CheckResult::new(
        "beta sampler statistics",
        mean_err <= BETA_TOL && mass_err <= BETA_TOL,
        format!("{draws} draws at beta {beta}: mean error {mean_err:.4}, worst interval mass error {mass_err:.4}"),
    ))
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

fn brute_assign(centers: &Matrix, features: &Matrix) -> Vec<usize> {
    let live: Vec<usize> = (0..centers.rows())
        .filter(|&c| centers.row(c).iter().any(|v| *v != 0.0))
        .collect();
    features
        .row_iter()
        .map(|f| {
            let d: Vec<f64> = live.iter().map(|&c| cosine_dissimilarity(f, centers.row(c))).collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            live[d.iter().position(|&v| v == min).unwrap_or(0)]
        })
        .collect()
}

/// Assignment against exhaustive search and refinement against its own
/// fixed-point conditions on small random instances.
pub fn check_clustering(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1);
    let mut failures = Vec::new();
    for t in 0..instances {
        let n = rng.random_range(3..=8);
        let d = rng.random_range(2..=3);
        let k = rng.random_range(2..=3);
        let features = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let state = ClusterState::from_labels(&features, &labels, k)?;
        if assign_features(&state, &features)? != brute_assign(&state.centers, &features) {
            failures.push(format!("assignment #{t}"));
            continue;
        }
        let refined = refine_features(state, &features, 100)?;
        let counts: Vec<usize> = (0..k)
            .map(|c| refined.assignments.iter().filter(|&&a| a == c).count())
            .collect();
        let rebuilt = ClusterState::from_labels(&features, &refined.assignments, k)?;
        let centers_ok = (0..k).all(|c| {
            counts[c] == 0
                || rebuilt
                    .centers
                    .row(c)
                    .iter()
                    .zip(refined.centers.row(c))
                    .all(|(a, b)| (a - b).abs() <= 1e-12)
        });
        let fixed = brute_assign(&refined.centers, &features) == refined.assignments;
        if counts != refined.counts || !centers_ok || (refined.iterations < 100 && !fixed) {
            failures.push(format!("refinement #{t}"));
        }
    }
    Ok(CheckResult::new(
        "clustering oracle",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{instances} random instances agree")
        } else {
            format!("{} of {instances} disagree, first {}", failures.len(), failures[0])
        },
    ))
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// With one category and copied discriminator weights, the multi-discriminator
/// baseline reproduces the single-discriminator one.
pub fn check_mada_single_category(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3d);
    let aux = AuxHeadsConfig {
        task: true,
        domain: true,
        category_domain: true,
    };
    let mut m = probe_model(1, aux, seed)?;
    let d = m.domain_head()?;
    let f0 = m.aux.category_domain[0];
    *m.params.value_mut(f0.weight) = m.params.value(d.weight).clone();
    *m.params.value_mut(f0.bias) = m.params.value(d.bias).clone();
    let batch = probe_batch(1, &mut rng)?;
    let dann = loss_dann(&m, &batch, 0.5)?;
    let mada = loss_mada(&m, &batch, 0.5)?;
    let mut gap = (dann.disc_adv - mada.disc_adv).abs();
    gap = gap.max(dann.disc.grads.get(d.weight).sub(mada.disc.grads.get(f0.weight))?.max_abs());
    gap = gap.max(dann.disc.grads.get(d.bias).sub(mada.disc.grads.get(f0.bias))?.max_abs());
    for id in m.extractor_ids() {
        gap = gap.max(dann.disc.grads.get(id).sub(mada.disc.grads.get(id))?.max_abs());
    }
    Ok(CheckResult::new(
        "single-category reduction",
        gap <= 1e-12,
        format!("largest difference {gap:.2e}"),
    ))
}
