use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::baselines::{baseline_step, vicinal_baseline_step};
use crate::catda::{catda_objective_step, no_adapt_step, LabeledBatch, LossReport};
use crate::data::{Batcher, DomainPair, Standardizer};
use crate::model::{argmax, write_domain_features_csv, Head, JointModel};
use crate::numcore::{GroupRates, Matrix, OptimizerState, Schedule};
use crate::tdsr::{tdsr_finetune, TdsrConfig, TdsrTrace};
use crate::vicda::{catda_mixup_step, vicatda_objective_step, BetaSampler};
use crate::{Error, Result};

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::config::{ExperimentConfig, Method};

/// Number of histogram bins of the consistency report.
pub const CONSISTENCY_BINS: usize = 20;

/// Target-side accuracies and head statistics of a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub eval_head: Head,
    /// Source accuracy of the reported classifier (`F^s` for joint-head methods).
    pub source_acc: f64,
    pub target_acc: f64,
    pub target_acc_fs: f64,
    pub target_acc_ft: f64,
    /// Share of target instances on which `F^s` and `F^t` agree.
    pub head_agreement: f64,
    /// Mean `|max p^s − max p^t|` over the target set.
    pub mean_conf_gap: f64,
    /// `confusion[truth][pred]` on the target set.
    pub confusion: Vec<Vec<usize>>,
    /// Largest deviation of `p^s`/`p^t` from the renormalized blocks of `p` on the target set.
    pub linkage_error: f64,
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

fn labels(m: &JointModel, x: &Matrix, head: Head) -> Result<Vec<usize>> {
    Ok(m.predict(x, head)?.into_iter().map(|p| p.label).collect())
}

/// Scores `m` against the source labels and the held-out target labels.
pub fn evaluate(m: &JointModel, pair: &DomainPair, eval_head: Head) -> Result<Evaluation> {
    let truth = pair.target_eval.for_evaluation();
    let k = pair.k();
    let views = m.prob_views(&pair.target_x)?;
    let fs = views.predict(Head::Source);
    let ft = views.predict(Head::Target);
    let fs_labels: Vec<usize> = fs.iter().map(|p| p.label).collect();
    let ft_labels: Vec<usize> = ft.iter().map(|p| p.label).collect();
    let reported = match eval_head {
        Head::Source => fs_labels.clone(),
        Head::Target => ft_labels.clone(),
        head => labels(m, &pair.target_x, head)?,
    };
    let source_head = if eval_head == Head::Target { Head::Source } else { eval_head };
    let source_pred = labels(m, &pair.source_x, source_head)?;
    let mut confusion = vec![vec![0; k]; k];
    for (&t, &p) in truth.iter().zip(&reported) {
        confusion[t][p] += 1;
    }
    let n = fs.len().max(1) as f64;
    Ok(Evaluation {
        eval_head,
        source_acc: accuracy(&source_pred, &pair.source_y),
        target_acc: accuracy(&reported, truth),
        target_acc_fs: accuracy(&fs_labels, truth),
        target_acc_ft: accuracy(&ft_labels, truth),
        head_agreement: fs_labels.iter().zip(&ft_labels).filter(|(a, b)| a == b).count() as f64 / n,
        mean_conf_gap: fs.iter().zip(&ft).map(|(a, b)| (a.confidence - b.confidence).abs()).sum::<f64>() / n,
        confusion,
        linkage_error: views.max_linkage_error(),
    })
}

/// Histograms of `max p^s`, `max p^t` and their absolute gap on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub max_ps: Vec<usize>,
    pub max_pt: Vec<usize>,
    pub abs_gap: Vec<usize>,
    pub head_agreement: f64,
}

fn bin(v: f64) -> usize {
    ((v * CONSISTENCY_BINS as f64).floor().max(0.0) as usize).min(CONSISTENCY_BINS - 1)
}

/// Agreement of the two heads over an unlabeled set.
pub fn consistency_report(m: &JointModel, x: &Matrix) -> Result<ConsistencyReport> {
    let views = m.prob_views(x)?;
    let mut report = ConsistencyReport {
        max_ps: vec![0; CONSISTENCY_BINS],
        max_pt: vec![0; CONSISTENCY_BINS],
        abs_gap: vec![0; CONSISTENCY_BINS],
        head_agreement: 0.0,
    };
    let mut agree = 0usize;
    for (ps, pt) in views.ps.row_iter().zip(views.pt.row_iter()) {
        let (is, cs) = argmax(ps);
        let (it, ct) = argmax(pt);
        report.max_ps[bin(cs)] += 1;
        report.max_pt[bin(ct)] += 1;
        report.abs_gap[bin((cs - ct).abs())] += 1;
        agree += usize::from(is == it);
    }
    report.head_agreement = agree as f64 / views.ps.rows().max(1) as f64;
    Ok(report)
}

impl ConsistencyReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_lo", "bin_hi", "max_ps", "max_pt", "abs_gap"])?;
        for b in 0..CONSISTENCY_BINS {
            let lo = b as f64 / CONSISTENCY_BINS as f64;
            let hi = (b + 1) as f64 / CONSISTENCY_BINS as f64;
            w.write_record([
                format!("{lo}"),
                format!("{hi}"),
                self.max_ps[b].to_string(),
                self.max_pt[b].to_string(),
                self.abs_gap[b].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lambda: f64,
    pub eta: f64,
    pub cls: f64,
    pub f_adv_d: f64,
    pub g_adv_d: f64,
    pub f_adv_c: f64,
    pub g_adv_c: f64,
    pub ent: f64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub target_acc_fs: f64,
    pub target_acc_ft: f64,
    pub head_agreement: f64,
    pub mean_conf_gap: f64,
    pub mean_alpha: Option<f64>,
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: ExperimentConfig,
    pub model: JointModel,
    pub standardizer: Option<Standardizer>,
    /// The data the model was trained on (standardized when requested).
    pub pair: DomainPair,
    pub metrics: Vec<MetricsRow>,
    /// Evaluation of the returned model.
    pub evaluation: Evaluation,
    /// Evaluation before fine-tuning, when fine-tuning ran.
    pub pre_tdsr: Option<Evaluation>,
    pub tdsr: Option<TdsrTrace>,
    /// Reason training stopped early; the model is the last good one.
    pub aborted: Option<String>,
    /// Largest linkage error over every evaluation of the run.
    pub max_linkage_error: f64,
}

impl TrainOutcome {
    pub fn target_acc(&self) -> f64 {
        self.evaluation.target_acc
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            method: Some(self.config.method),
            eval_head: self.evaluation.eval_head,
            standardizer: self.standardizer.clone(),
        }
    }
}

enum Stepper {
    NoAdapt,
    Catda,
    Mixup(BetaSampler),
    Vicatda(BetaSampler),
    Baseline,
    Vicinal(BetaSampler),
}

impl Stepper {
    fn new(cfg: &ExperimentConfig, sampler_seed: u64) -> Result<Self> {
        let sampler = || BetaSampler::new(cfg.beta_param, sampler_seed);
        Ok(match cfg.method {
            Method::NoAdapt => Stepper::NoAdapt,
            Method::Catda if cfg.switches.mixup => Stepper::Mixup(sampler()?),
            Method::Catda => Stepper::Catda,
            Method::Vicatda => Stepper::Vicatda(sampler()?),
            Method::Vidann | Method::Virca => Stepper::Vicinal(sampler()?),
            Method::Dann | Method::Mada | Method::Rca | Method::Symnet => Stepper::Baseline,
        })
    }

    fn step(
        &mut self,
        cfg: &ExperimentConfig,
        m: &mut JointModel,
        batch: &LabeledBatch,
        lambda: f64,
        opt: &mut OptimizerState,
        rates: GroupRates,
    ) -> Result<(LossReport, Option<f64>)> {
        let opts = cfg.switches.catda_options();
        let method = cfg.method;
        match self {
            Stepper::NoAdapt => Ok((no_adapt_step(m, batch, opt, rates)?, None)),
            Stepper::Catda => Ok((catda_objective_step(m, batch, lambda, &opts, opt, rates)?, None)),
            Stepper::Mixup(s) => {
                let r = catda_mixup_step(m, batch, lambda, &opts, s, opt, rates)?;
                Ok((r.report, Some(r.mean_alpha)))
            }
            Stepper::Vicatda(s) => {
                let r = vicatda_objective_step(m, batch, lambda, &opts, s, opt, rates)?;
                Ok((r.report, Some(r.mean_alpha)))
            }
            Stepper::Baseline => {
                let b = method.baseline().ok_or_else(|| Error::Config(format!("{method} is not a baseline")))?;
                Ok((baseline_step(m, batch, b, lambda, opt, rates)?, None))
            }
            Stepper::Vicinal(s) => {
                let v = method
                    .vicinal_baseline()
                    .ok_or_else(|| Error::Config(format!("{method} is not a vicinal baseline")))?;
                let r = vicinal_baseline_step(m, batch, v, lambda, s, opt, rates)?;
                Ok((r.report, Some(r.mean_alpha)))
            }
        }
    }
}

fn tdsr_rates(schedule: &Schedule) -> Result<GroupRates> {
    schedule.rates_at(1.0)
}

/// Loads the configured dataset and trains on it.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let pair = cfg.dataset.load(cfg.data_seed())?;
    train_on(cfg, &pair)
}

/// Trains on an already materialized domain pair.
///
/// Target labels are read only by evaluation.
pub fn train_on(cfg: &ExperimentConfig, raw: &DomainPair) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (pair, standardizer) = if cfg.standardize {
        let (p, s) = raw.standardized();
        (p, Some(s))
    } else {
        (raw.clone(), None)
    };
    let seeds = cfg.seeds();
    let eval_head = cfg.method.eval_head();
    let mut model = JointModel::new(cfg.model_config(pair.dim(), pair.k()), seeds.init)?;
    let mut opt = OptimizerState::new(&model.params, cfg.optimizer.momentum, cfg.optimizer.weight_decay)?;
    let mut batcher = Batcher::new(&pair, cfg.batch_size, seeds.batches)?;
    let mut stepper = Stepper::new(cfg, seeds.sampler)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut aborted = None;
    let mut max_linkage_error = 0.0f64;

    let mut last_good = model.params.clone();

    'epochs: for epoch in 0..cfg.epochs {
        let p = Schedule::progress(epoch, cfg.epochs);
        let lambda = cfg.schedule.lambda_at(p)?;
        let eta = cfg.schedule.eta_at(p)?;
        let rates = cfg.schedule.rates_at(p)?;
        let batches = batcher.epoch();
        let mut mean = LossReport::default();
        let mut alpha_sum = 0.0;
        let mut alpha_seen = false;
        for (i, batch) in batches.iter().enumerate() {
            match stepper.step(cfg, &mut model, batch, lambda, &mut opt, rates) {
                Ok((report, alpha)) => {
                    mean.accumulate_mean(&report, i + 1);
                    if let Some(a) = alpha {
                        alpha_sum += a;
                        alpha_seen = true;
                    }
                }
                Err(Error::NonFinite(msg)) => {
                    log::warn!("epoch {epoch}: non-finite values, keeping the last good model: {msg}");
                    model.params = last_good.clone();
                    aborted = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if !model.params.is_finite() {
            model.params = last_good.clone();
            aborted = Some(format!("epoch {epoch}: non-finite parameters"));
            break;
        }
        last_good = model.params.clone();
        let ev = evaluate(&model, &pair, eval_head)?;
        max_linkage_error = max_linkage_error.max(ev.linkage_error);
        log::debug!("epoch {epoch}: lambda {lambda:.4} target acc {:.4}", ev.target_acc);
        metrics.push(MetricsRow {
            epoch,
            lambda,
            eta,
            cls: mean.cls,
            f_adv_d: mean.f_adv_d,
            g_adv_d: mean.g_adv_d,
            f_adv_c: mean.f_adv_c,
            g_adv_c: mean.g_adv_c,
            ent: mean.ent,
            source_acc: ev.source_acc,
            target_acc: ev.target_acc,
            target_acc_fs: ev.target_acc_fs,
            target_acc_ft: ev.target_acc_ft,
            head_agreement: ev.head_agreement,
            mean_conf_gap: ev.mean_conf_gap,
            mean_alpha: alpha_seen.then(|| alpha_sum / batches.len().max(1) as f64),
        });
    }

    let mut pre_tdsr = None;
    let mut tdsr = None;
    if cfg.switches.tdsr && aborted.is_none() {
        let pre = evaluate(&model, &pair, eval_head)?;
        max_linkage_error = max_linkage_error.max(pre.linkage_error);
        pre_tdsr = Some(pre);
        let tcfg = TdsrConfig {
            seed: seeds.tdsr ^ cfg.tdsr.seed,
            ..cfg.tdsr
        };
        let mut tuned = model.clone();
        let mut topt = OptimizerState::new(&tuned.params, cfg.optimizer.momentum, cfg.optimizer.weight_decay)?;
        let truth = pair.target_eval.for_evaluation();
        match tdsr_finetune(&mut tuned, &pair.target_x, &tcfg, &mut topt, tdsr_rates(&cfg.schedule)?, Some(truth)) {
            Ok(trace) if tuned.params.is_finite() => {
                model = tuned;
                tdsr = Some(trace);
            }
            Ok(_) => aborted = Some("fine-tuning produced non-finite parameters".into()),
            Err(Error::NonFinite(msg)) => aborted = Some(format!("fine-tuning: {msg}")),
            Err(e) => return Err(e),
        }
    }

    let evaluation = evaluate(&model, &pair, eval_head)?;
    max_linkage_error = max_linkage_error.max(evaluation.linkage_error);
    Ok(TrainOutcome {
        config: cfg.clone(),
        model,
        standardizer,
        pair,
        metrics,
        evaluation,
        pre_tdsr,
        tdsr,
        aborted,
        max_linkage_error,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_confusion_csv(confusion: &[Vec<usize>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["truth".to_string()];
    header.extend((0..confusion.len()).map(|c| format!("pred_{c}")));
    w.write_record(&header)?;
    for (t, row) in confusion.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_tdsr_csv(trace: &TdsrTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "iterations",
        "max_cluster",
        "loss_before",
        "loss_after",
        "accuracy",
        "cluster_accuracy",
        "aborted",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for e in &trace.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.iterations.to_string(),
            e.counts.iter().max().copied().unwrap_or(0).to_string(),
            format!("{}", e.loss_before),
            format!("{}", e.loss_after),
            opt(e.accuracy),
            opt(e.cluster_accuracy),
            e.aborted.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes every artifact of a run into `dir` and returns the paths.
pub fn write_artifacts(outcome: &TrainOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let path = dir.join("metrics.csv");
    write_metrics_csv(&outcome.metrics, &path)?;
    written.push(path);
    let path = dir.join("confusion.csv");
    write_confusion_csv(&outcome.evaluation.confusion, &path)?;
    written.push(path);
    let path = dir.join("features.csv");
    write_domain_features_csv(&outcome.model, &outcome.pair.source_x, &outcome.pair.target_x, create(&path)?)?;
    written.push(path);
    let path = dir.join("consistency.csv");
    consistency_report(&outcome.model, &outcome.pair.target_x)?.write_csv(&path)?;
    written.push(path);
    if let Some(trace) = &outcome.tdsr {
        let path = dir.join("tdsr.csv");
        write_tdsr_csv(trace, &path)?;
        written.push(path);
    }
    let path = dir.join("model.ckpt");
    save_checkpoint(&outcome.model, &outcome.meta(), &path)?;
    written.push(path);
    let path = dir.join("config.json");
    std::fs::write(&path, outcome.config.to_json()?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    let path = dir.join("summary.json");
    let summary = serde_json::json!({
        "label": outcome.config.label(),
        "evaluation": outcome.evaluation,
        "pre_tdsr": outcome.pre_tdsr,
        "aborted": outcome.aborted,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_two_moons, EvalLabels, ShiftSpec};
    use crate::harness::config::DatasetSpec;

    fn quick(method: Method, epochs: usize) -> ExperimentConfig {
        ExperimentConfig {
            method,
            epochs,
            dataset: DatasetSpec::TwoMoons {
                n: 128,
                noise: 0.1,
                shift: ShiftSpec::rotation(30.0),
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn every_method_trains_and_logs_each_epoch() {
        for method in Method::ALL {
            let out = train(&quick(method, 2)).unwrap();
            assert_eq!(out.metrics.len(), 2, "{method}");
            assert!(out.aborted.is_none(), "{method}");
            assert_eq!(out.evaluation.eval_head, method.eval_head());
            assert_eq!(out.metrics[0].mean_alpha.is_some(), method.uses_sampler(), "{method}");
            assert_eq!(out.metrics[0].lambda, 0.0);
        }
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let cfg = quick(Method::Catda, 0);
        let out = train(&cfg).unwrap();
        assert!(out.metrics.is_empty());
        let init = JointModel::new(cfg.model_config(2, 2), cfg.seeds().init).unwrap();
        assert_eq!(out.model.params, init.params);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = quick(Method::Vicatda, 3);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn permuted_target_labels_leave_training_untouched() {
        let cfg = quick(Method::Catda, 3);
        let pair = gen_two_moons(128, 0.1, &ShiftSpec::rotation(30.0), 4).unwrap();
        let mut flipped: Vec<usize> = pair.target_eval.for_evaluation().to_vec();
        flipped.reverse();
        let mut tainted = pair.clone();
        tainted.target_eval = EvalLabels::new(flipped.iter().map(|&y| 1 - y).collect());
        let a = train_on(&cfg, &pair).unwrap();
        let b = train_on(&cfg, &tainted).unwrap();
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn uniform_model_fills_single_bins() {
        let mut m = JointModel::new(crate::ModelConfig::new(2, vec![3], 2), 0).unwrap();
        for id in m.joint_ids() {
            m.params.value_mut(id).fill(0.0);
        }
        let x = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5]]).unwrap();
        let r = consistency_report(&m, &x).unwrap();
        assert_eq!(r.max_ps[10], 2);
        assert_eq!(r.max_pt[10], 2);
        assert_eq!(r.abs_gap[0], 2);
        assert_eq!(r.head_agreement, 1.0);
        assert_eq!(bin(1.0), CONSISTENCY_BINS - 1);
    }

    #[test]
    fn tdsr_runs_after_training_and_records_both_evaluations() {
        let mut cfg = quick(Method::Catda, 3);
        cfg.switches.tdsr = true;
        cfg.tdsr.epochs = 2;
        let out = train(&cfg).unwrap();
        assert!(out.pre_tdsr.is_some());
        assert_eq!(out.tdsr.as_ref().unwrap().epochs.len(), 2);
    }

    #[test]
    fn artifacts_are_written() {
        let mut cfg = quick(Method::Vicatda, 1);
        cfg.switches.tdsr = true;
        cfg.tdsr.epochs = 1;
        let out = train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_artifacts(&out, dir.path()).unwrap();
        for name in ["metrics.csv", "confusion.csv", "features.csv", "consistency.csv", "tdsr.csv", "model.ckpt"] {
            assert!(files.iter().any(|p| p.ends_with(name)), "{name}");
        }
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("epoch,lambda,eta,cls"));
        assert_eq!(metrics.lines().count(), 2);
        let features = std::fs::read_to_string(dir.path().join("features.csv")).unwrap();
        assert!(features.starts_with("domain,g1,"));
        assert_eq!(features.lines().count(), 1 + out.pair.n_source() + out.pair.n_target());
    }

    #[test]
    fn confusion_counts_sum_to_target_size() {
        let out = train(&quick(Method::Dann, 1)).unwrap();
        let total: usize = out.evaluation.confusion.iter().flatten().sum();
        assert_eq!(total, out.pair.n_target());
    }
}
