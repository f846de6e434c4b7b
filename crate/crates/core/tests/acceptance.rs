//! One PASS/FAIL line per acceptance criterion; exits nonzero on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use vicatda_core::catda::WeightGrad;
use vicatda_core::harness::ablate::{ablate, beta_sweep, AblationTable};
use vicatda_core::harness::train::write_metrics_csv;
use vicatda_core::harness::verify::{
    check_beta_sampler, check_clustering, check_decomposition, check_gradients, check_linkage, check_vicinal_collapse,
    LINKAGE_TOL,
};
use vicatda_core::harness::{train, ExperimentConfig, Method, DEFAULT_BETAS, DEFAULT_SEEDS};
use vicatda_core::catda::Weighting;
use vicatda_core::vicda::BetaSampler;

const DESK: &str = include_str!("../../../configs/desk.json");

const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const CELL_BUDGET: Duration = Duration::from_secs(300);
const IDENTITY_CONFIGS: usize = 1000;
const BETA_DRAWS: usize = 100_000;
const ORDERING_MARGIN_PP: f64 = 10.0;
const TDSR_FLOOR_PP: f64 = -1.0;
const AGREEMENT_FLOOR: f64 = 0.90;
const DETERMINISM_SEED: u64 = 7;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, passed: bool, detail: impl AsRef<str>) {
        println!("{} {name}: {}", if passed { "PASS" } else { "FAIL" }, detail.as_ref());
        self.failed += usize::from(!passed);
    }
}

fn desk(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        ..ExperimentConfig::from_json(DESK).expect("desk config")
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn row_median(t: &AblationTable, label: &str) -> f64 {
    t.row(label).map_or(f64::NAN, |r| r.median)
}

fn all_ok(t: &AblationTable) -> bool {
    t.rows.iter().all(|r| r.failures() == 0)
}

fn slowest(t: &AblationTable) -> f64 {
    t.rows.iter().flat_map(|r| r.cells.iter().map(|c| c.seconds)).fold(0.0, f64::max)
}

fn main() -> ExitCode {
    let mut r = Report { failed: 0 };

    let start = Instant::now();
    match check_gradients(0) {
        Ok(c) => {
            let t = start.elapsed();
            r.line("gradient suite", c.passed && t < GRADIENT_BUDGET, format!("{} in {:.1}s", c.detail, t.as_secs_f64()))
        }
        Err(e) => r.line("gradient suite", false, e.to_string()),
    }

    let live = check_decomposition(IDENTITY_CONFIGS, WeightGrad::Live, 0);
    let detached = check_decomposition(IDENTITY_CONFIGS, WeightGrad::Detached, 0);
    r.line(
        "decomposition identities",
        live.passed && !detached.passed,
        format!("{}; negative control with detached weights fails: {}", live.detail, !detached.passed),
    );

    match check_linkage(0) {
        Ok(c) => r.line("probability linkage (random nets)", c.passed, c.detail),
        Err(e) => r.line("probability linkage (random nets)", false, e.to_string()),
    }

    match check_vicinal_collapse(0) {
        Ok(c) => r.line("vicinal collapse", c.passed, c.detail),
        Err(e) => r.line("vicinal collapse", false, e.to_string()),
    }

    match check_beta_sampler(BetaSampler::DEFAULT_BETA, BETA_DRAWS, 0) {
        Ok(c) => r.line("beta sampler", c.passed, c.detail),
        Err(e) => r.line("beta sampler", false, e.to_string()),
    }

    match check_clustering(IDENTITY_CONFIGS, 0) {
        Ok(c) => r.line("clustering oracle", c.passed, c.detail),
        Err(e) => r.line("clustering oracle", false, e.to_string()),
    }

    let mut variants: Vec<(String, ExperimentConfig)> = Vec::new();
    for method in [Method::NoAdapt, Method::Dann, Method::Catda, Method::Vicatda] {
        let cfg = desk(method);
        variants.push((cfg.label(), cfg));
    }
    let mut same = desk(Method::Catda);
    same.switches.weighting = Weighting::SameDomain;
    variants.push((same.label(), same.clone()));
    let mut refined = desk(Method::Vicatda);
    refined.switches.tdsr = true;
    variants.push((refined.label(), refined.clone()));

    match ablate(&variants, &DEFAULT_SEEDS) {
        Ok(t) => {
            print!("{}", t.render());
            let no_adapt = row_median(&t, "no_adapt");
            let dann = row_median(&t, "dann");
            let catda = row_median(&t, "catda");
            let vicatda = row_median(&t, "vicatda");
            let slow = slowest(&t);
            r.line(
                "ordering",
                all_ok(&t)
                    && no_adapt < dann
                    && no_adapt < catda
                    && catda <= vicatda
                    && vicatda - no_adapt >= ORDERING_MARGIN_PP
                    && slow < CELL_BUDGET.as_secs_f64(),
                format!(
                    "medians no_adapt {no_adapt:.1} dann {dann:.1} catda {catda:.1} vicatda {vicatda:.1}, \
                     margin {:.1}pp (floor {ORDERING_MARGIN_PP}), slowest cell {slow:.1}s",
                    vicatda - no_adapt
                ),
            );

            let same_median = row_median(&t, &same.label());
            r.line(
                "cross-domain weighting",
                catda >= same_median,
                format!("median catda {catda:.1} vs same-domain {same_median:.1}"),
            );

            let cells = t.row(&refined.label()).map(|row| row.cells.clone()).unwrap_or_default();
            let mut deltas: Vec<f64> = cells
                .iter()
                .filter_map(|c| Some(c.target_acc? - c.pre_tdsr_acc?))
                .collect();
            let applied: Vec<usize> = cells.iter().map(|c| c.tdsr_applied.unwrap_or(0)).collect();
            let complete = deltas.len() == DEFAULT_SEEDS.len();
            let per_seed: Vec<String> = deltas.iter().map(|d| format!("{d:+.1}")).collect();
            let delta = median(&mut deltas);
            r.line(
                "tdsr non-degradation",
                complete && delta >= TDSR_FLOOR_PP,
                format!(
                    "median change {delta:+.2}pt (floor {TDSR_FLOOR_PP}); per seed [{}]; epochs applied per seed {applied:?}",
                    per_seed.join(", ")
                ),
            );

            let mut agreement: Vec<f64> = t
                .row("vicatda")
                .map(|row| row.cells.iter().filter_map(|c| c.head_agreement).collect())
                .unwrap_or_default();
            let agree = median(&mut agreement);
            r.line(
                "head consistency",
                agreement.len() == DEFAULT_SEEDS.len() && agree >= AGREEMENT_FLOOR,
                format!("median final-epoch agreement {:.1}% (floor {:.0}%)", 100.0 * agree, 100.0 * AGREEMENT_FLOOR),
            );

            let worst = t
                .rows
                .iter()
                .flat_map(|row| row.cells.iter().filter_map(|c| c.linkage_error))
                .fold(0.0, f64::max);
            r.line(
                "probability linkage (trained runs)",
                worst <= LINKAGE_TOL,
                format!("max deviation {worst:.2e} over every evaluation"),
            );
        }
        Err(e) => {
            for name in [
                "ordering",
                "cross-domain weighting",
                "tdsr non-degradation",
                "head consistency",
                "probability linkage (trained runs)",
            ] {
                r.line(name, false, e.to_string());
            }
        }
    }

    match beta_sweep(&desk(Method::Vicatda), &DEFAULT_BETAS, &DEFAULT_SEEDS) {
        Ok(t) => {
            print!("{}", t.render());
            let dir = tempfile::tempdir().expect("tempdir");
            let path = dir.path().join("beta.csv");
            let written = t.write_csv(&path).is_ok() && std::fs::read_to_string(&path).is_ok_and(|s| s.lines().count() == 6);
            r.line(
                "beta sweep",
                all_ok(&t) && t.rows.len() == DEFAULT_BETAS.len() && written,
                format!("{} rows, mean ± std table written", t.rows.len()),
            );
        }
        Err(e) => r.line("beta sweep", false, e.to_string()),
    }

    let cfg = ExperimentConfig {
        seed: DETERMINISM_SEED,
        ..ExperimentConfig::for_method(Method::Catda)
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let bytes = |name: &str| -> Option<Vec<u8>> {
        let out = train(&cfg).ok()?;
        let path = dir.path().join(name);
        write_metrics_csv(&out.metrics, &path).ok()?;
        std::fs::read(&path).ok()
    };
    match (bytes("a.csv"), bytes("b.csv")) {
        (Some(a), Some(b)) => r.line(
            "determinism",
            a == b && !a.is_empty(),
            format!("catda seed {DETERMINISM_SEED}: {} bytes, identical: {}", a.len(), a == b),
        ),
        _ => r.line("determinism", false, "training or writing failed"),
    }

    println!("{} failed", r.failed);
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
