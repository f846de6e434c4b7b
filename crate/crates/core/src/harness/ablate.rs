use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::catda::Weighting;
use crate::{Error, Result};

use super::config::{ExperimentConfig, Method};
use super::train::train;

/// Seeds of the default multi-seed protocol.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Mixing parameters of the default sweep.
pub const DEFAULT_BETAS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// One seed of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub seed: u64,
    /// Final target accuracy in percent.
    pub target_acc: Option<f64>,
    /// Target accuracy in percent before fine-tuning, when it ran.
    pub pre_tdsr_acc: Option<f64>,
    /// Fine-tuning epochs that were not aborted.
    pub tdsr_applied: Option<usize>,
    pub head_agreement: Option<f64>,
    pub failure: Option<String>,
    pub linkage_error: Option<f64>,
    /// Wall-clock training time.
    pub seconds: f64,
}

/// Aggregate over seeds of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub cells: Vec<CellResult>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl AblationRow {
    fn new(label: String, cells: Vec<CellResult>) -> Self {
        let accs: Vec<f64> = cells.iter().filter_map(|c| c.target_acc).collect();
        let (mean, std, median) = summarize(&accs);
        AblationRow {
            label,
            cells,
            mean,
            std,
            median,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.target_acc).collect()
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.failure.is_some()).count()
    }
}

/// Mean, sample standard deviation and median; NaN when empty.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    (mean, std, median)
}

/// Results of a grid of variants over a set of seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned text table of `mean ± std` in percent.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>7}  failed", "variant", "mean ± std", "median");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>6.2} ± {:<5.2}  {:>7.2}  {}/{}",
                r.label,
                r.mean,
                r.std,
                r.median,
                r.failures(),
                r.cells.len()
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = ["variant", "mean", "std", "median", "n_ok", "n_failed"]
            .map(String::from)
            .to_vec();
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.label.clone(),
                format!("{}", r.mean),
                format!("{}", r.std),
                format!("{}", r.median),
                (r.cells.len() - r.failures()).to_string(),
                r.failures().to_string(),
            ];
            rec.extend(
                r.cells
                    .iter()
                    .map(|c| c.target_acc.map_or_else(|| "failed".to_string(), |a| format!("{a}"))),
            );
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn run_cell(base: &ExperimentConfig, seed: u64) -> CellResult {
    let cfg = ExperimentConfig {
        seed,
        ..base.clone()
    };
    let start = std::time::Instant::now();
    let result = train(&cfg);
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(out) => CellResult {
            seed,
            target_acc: Some(100.0 * out.evaluation.target_acc),
            pre_tdsr_acc: out.pre_tdsr.as_ref().map(|e| 100.0 * e.target_acc),
            tdsr_applied: out.tdsr.as_ref().map(|t| t.applied_epochs()),
            head_agreement: Some(out.evaluation.head_agreement),
            failure: out.aborted,
            linkage_error: Some(out.max_linkage_error),
            seconds,
        },
        Err(e) => CellResult {
            seed,
            target_acc: None,
            pre_tdsr_acc: None,
            tdsr_applied: None,
            head_agreement: None,
            failure: Some(e.to_string()),
            linkage_error: None,
            seconds,
        },
    }
}

/// Trains every variant on every seed; cells run in parallel.
///
/// A run that errors is marked failed and excluded from the statistics;
/// a run that stopped early keeps its last-good accuracy and is marked too.
pub fn ablate(variants: &[(String, ExperimentConfig)], seeds: &[u64]) -> Result<AblationTable> {
    for (label, cfg) in variants {
        cfg.validate().map_err(|e| Error::Config(format!("{label}: {e}")))?;
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<CellResult> = jobs.par_iter().map(|&(v, s)| run_cell(&variants[v].1, s)).collect();
    let mut results = results.into_iter();
    let rows = variants
        .iter()
        .map(|(label, _)| AblationRow::new(label.clone(), results.by_ref().take(seeds.len()).collect()))
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

fn variant(base: &ExperimentConfig, method: Method, edit: impl FnOnce(&mut ExperimentConfig)) -> (String, ExperimentConfig) {
    let mut cfg = ExperimentConfig {
        method,
        switches: Default::default(),
        ..base.clone()
    };
    edit(&mut cfg);
    (cfg.label(), cfg)
}

/// Baselines, both joint-head methods and their component ablations.
pub fn standard_grid(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let plain = |m| variant(base, m, |_| {});
    vec![
        plain(Method::NoAdapt),
        plain(Method::Dann),
        plain(Method::Mada),
        plain(Method::Rca),
        plain(Method::Symnet),
        plain(Method::Catda),
        variant(base, Method::Catda, |c| c.switches.domain_adv = false),
        variant(base, Method::Catda, |c| c.switches.category_adv = false),
        variant(base, Method::Catda, |c| c.switches.weighting = Weighting::SameDomain),
        variant(base, Method::Catda, |c| c.switches.mixup = true),
        plain(Method::Vidann),
        plain(Method::Virca),
        plain(Method::Vicatda),
        variant(base, Method::Vicatda, |c| c.switches.domain_adv = false),
        variant(base, Method::Vicatda, |c| c.switches.category_adv = false),
        variant(base, Method::Vicatda, |c| c.switches.tdsr = true),
    ]
}

/// The vicinal method at each mixing parameter.
pub fn beta_grid(base: &ExperimentConfig, betas: &[f64]) -> Vec<(String, ExperimentConfig)> {
    betas
        .iter()
        .map(|&b| {
            let cfg = ExperimentConfig {
                method: Method::Vicatda,
                beta_param: b,
                ..base.clone()
            };
            (format!("beta={b}"), cfg)
        })
        .collect()
}

pub fn beta_sweep(base: &ExperimentConfig, betas: &[f64], seeds: &[u64]) -> Result<AblationTable> {
    ablate(&beta_grid(base, betas), seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShiftSpec;
    use crate::harness::config::DatasetSpec;

    #[test]
    fn summary_statistics() {
        let (mean, std, median) = summarize(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(mean, 4.0);
        assert!((std - 4.082482904638630).abs() < 1e-12);
        assert_eq!(median, 2.5);
        assert_eq!(summarize(&[7.0]), (7.0, 0.0, 7.0));
        assert!(summarize(&[]).0.is_nan());
    }

    #[test]
    fn grid_labels_are_unique_and_valid() {
        let grid = standard_grid(&ExperimentConfig::default());
        let mut labels: Vec<&str> = grid.iter().map(|(l, _)| l.as_str()).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), grid.len());
        assert!(grid.iter().all(|(_, c)| c.validate().is_ok()));
    }

    #[test]
    fn failing_cells_are_marked_not_fatal() {
        let mut base = ExperimentConfig {
            epochs: 1,
            dataset: DatasetSpec::TwoMoons {
                n: 64,
                noise: 0.1,
                shift: ShiftSpec::identity(),
            },
            ..ExperimentConfig::default()
        };
        let good = ("ok".to_string(), base.clone());
        base.batch_size = 1000;
        let bad = ("too_big".to_string(), base);
        let table = ablate(&[good, bad], &[0, 1]).unwrap();
        assert_eq!(table.row("ok").unwrap().failures(), 0);
        assert_eq!(table.row("ok").unwrap().accuracies().len(), 2);
        let row = table.row("too_big").unwrap();
        assert_eq!(row.failures(), 2);
        assert!(row.mean.is_nan());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        table.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.contains("failed"));
        assert!(table.render().contains("too_big"));
    }
}
