use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vicatda_core::catda::WeightGrad;
use vicatda_core::data::{gen_gaussian_blobs, gen_two_moons, load_csv, save_csv, DomainPair, ShiftSpec};
use vicatda_core::harness::ablate::{beta_grid, DEFAULT_BETAS, DEFAULT_SEEDS};
use vicatda_core::harness::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use vicatda_core::harness::train::{write_confusion_csv, write_tdsr_csv};
use vicatda_core::harness::{
    ablate, consistency_report, evaluate, standard_grid, train_on, verify, write_artifacts, ExperimentConfig, Method,
    VerifyOptions,
};
use vicatda_core::model::write_domain_features_csv;
use vicatda_core::tdsr::tdsr_finetune;
use vicatda_core::{JointModel, OptimizerState};

#[derive(Parser)]
#[command(name = "vicatda", version, about = "Adversarial domain adaptation with a joint 2K-way classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic two-domain dataset and write it as CSV.
    GenerateData(GenerateArgs),
    /// Train one configuration and write its artifacts.
    Train(TrainArgs),
    /// Run a grid of variants over several seeds.
    Ablate(AblateArgs),
    /// Fine-tune a checkpoint by target discriminative clustering.
    Tdsr(TdsrArgs),
    /// Run the verification suite.
    Check(CheckArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Moons,
    Blobs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "moons")]
    dataset: Kind,
    /// Instances per domain.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Noise of the two-moons draw.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Categories of the blobs draw.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Dimension of the blobs draw.
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Distance of the blob means from the origin.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Target rotation in degrees.
    #[arg(long, default_value_t = 45.0)]
    rotation: f64,
    /// Target translation, comma separated.
    #[arg(long, value_delimiter = ',')]
    translation: Vec<f64>,
    /// Target per-axis scale, comma separated.
    #[arg(long, value_delimiter = ',')]
    scale: Vec<f64>,
    /// Extra target-only noise.
    #[arg(long, default_value_t = 0.0)]
    target_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured method.
    #[arg(long)]
    method: Option<Method>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset CSV replacing the configured dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seeds of every cell.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Restrict the grid to these variant labels.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Sweep the mixing parameter instead of the variant grid.
    #[arg(long)]
    beta_sweep: bool,
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
}

#[derive(Args)]
struct TdsrArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV; target labels, when present, only feed the accuracy trace.
    #[arg(long)]
    data: PathBuf,
    /// Configuration supplying the schedule and fine-tuning settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations of the identity checks.
    #[arg(long, default_value_t = 1000)]
    configs: usize,
    #[arg(long, default_value_t = 100_000)]
    beta_draws: usize,
    /// Stop gradients through the category weights (must fail).
    #[arg(long)]
    detached: bool,
    /// Also write the report as JSON here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Tdsr(a) => run_tdsr(a),
        Command::Check(a) => run_check(a),
        Command::Eval(a) => run_eval(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let shift = ShiftSpec {
        rotation_deg: a.rotation,
        translation: a.translation,
        scale: a.scale,
        noise_std: a.target_noise,
    };
    let pair = match a.dataset {
        Kind::Moons => gen_two_moons(a.n, a.noise, &shift, a.seed)?,
        Kind::Blobs => gen_gaussian_blobs(a.k, a.d, a.n, a.separation, &shift, a.seed)?,
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_csv(&pair, &a.out)?;
    println!("wrote {} ({} source, {} target, K={})", a.out.display(), pair.n_source(), pair.n_target(), pair.k());
    Ok(())
}

fn load_config(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &run.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = run.method {
        cfg.method = m;
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(path) = &run.data {
        cfg.dataset = vicatda_core::harness::DatasetSpec::Csv {
            path: path.clone(),
            k: None,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.run)?;
    let pair = cfg.dataset.load(cfg.data_seed())?;
    let outcome = train_on(&cfg, &pair)?;
    write_artifacts(&outcome, &a.run.out_dir)?;
    let ev = &outcome.evaluation;
    println!(
        "{}: target accuracy {:.2}% (F^s {:.2}%, F^t {:.2}%), source accuracy {:.2}%, head agreement {:.2}%",
        cfg.label(),
        100.0 * ev.target_acc,
        100.0 * ev.target_acc_fs,
        100.0 * ev.target_acc_ft,
        100.0 * ev.source_acc,
        100.0 * ev.head_agreement
    );
    if let Some(pre) = &outcome.pre_tdsr {
        println!("before fine-tuning: {:.2}%", 100.0 * pre.target_acc);
    }
    if let Some(reason) = &outcome.aborted {
        println!("stopped early: {reason}");
    }
    println!("artifacts in {}", a.run.out_dir.display());
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let base = load_config(&a.run)?;
    let seeds = if a.seeds.is_empty() { DEFAULT_SEEDS.to_vec() } else { a.seeds.clone() };
    let mut grid = if a.beta_sweep {
        let betas = if a.betas.is_empty() { DEFAULT_BETAS.to_vec() } else { a.betas.clone() };
        beta_grid(&base, &betas)
    } else {
        standard_grid(&base)
    };
    if !a.only.is_empty() {
        grid.retain(|(label, _)| a.only.contains(label));
        if grid.is_empty() {
            bail!("no variant matches {:?}", a.only);
        }
    }
    let table = ablate(&grid, &seeds)?;
    std::fs::create_dir_all(&a.run.out_dir).with_context(|| format!("creating {}", a.run.out_dir.display()))?;
    let path = a.run.out_dir.join("ablation.csv");
    table.write_csv(&path)?;
    print!("{}", table.render());
    println!("wrote {}", path.display());
    Ok(())
}

fn standardized_for(pair: &DomainPair, meta: &CheckpointMeta) -> DomainPair {
    match &meta.standardizer {
        Some(s) => pair.standardized_with(s),
        None => pair.clone(),
    }
}

fn load_model(path: &Path) -> Result<(JointModel, CheckpointMeta)> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run_tdsr(a: TdsrArgs) -> Result<()> {
    let (mut model, meta) = load_model(&a.checkpoint)?;
    let cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let pair = standardized_for(&load_csv(&a.data, Some(model.k()))?, &meta);
    let mut tcfg = cfg.tdsr;
    tcfg.seed = a.seed;
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    let mut opt = OptimizerState::new(&model.params, cfg.optimizer.momentum, cfg.optimizer.weight_decay)?;
    let truth = pair.target_eval.for_evaluation();
    let truth = (truth.len() == pair.n_target()).then_some(truth);
    let trace = tdsr_finetune(&mut model, &pair.target_x, &tcfg, &mut opt, cfg.schedule.rates_at(1.0)?, truth)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_tdsr_csv(&trace, &a.out_dir.join("tdsr.csv"))?;
    save_checkpoint(&model, &meta, &a.out_dir.join("model.ckpt"))?;
    if let (Some(before), Some(after)) = (trace.initial_accuracy, trace.final_accuracy()) {
        println!("target accuracy {:.2}% -> {:.2}%", 100.0 * before, 100.0 * after);
    }
    println!("wrote {}", a.out_dir.join("tdsr.csv").display());
    Ok(())
}

fn run_check(a: CheckArgs) -> Result<()> {
    let opts = VerifyOptions {
        seed: a.seed,
        configs: a.configs,
        beta_draws: a.beta_draws,
        weight_grad: if a.detached { WeightGrad::Detached } else { WeightGrad::Live },
    };
    let report = verify(&opts)?;
    print!("{}", report.render());
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    }
    if !report.all_passed() {
        bail!("{} check(s) failed", report.checks.iter().filter(|c| !c.passed).count());
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (model, meta) = load_model(&a.checkpoint)?;
    let pair = standardized_for(&load_csv(&a.data, Some(model.k()))?, &meta);
    let ev = evaluate(&model, &pair, meta.eval_head)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_confusion_csv(&ev.confusion, &a.out_dir.join("confusion.csv"))?;
    consistency_report(&model, &pair.target_x)?.write_csv(&a.out_dir.join("consistency.csv"))?;
    let file = std::fs::File::create(a.out_dir.join("features.csv"))?;
    write_domain_features_csv(&model, &pair.source_x, &pair.target_x, std::io::BufWriter::new(file))?;
    println!("{}", serde_json::to_string_pretty(&ev)?);
    Ok(())
}
