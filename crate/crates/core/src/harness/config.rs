use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, VicinalBaseline};
use crate::catda::{CatdaOptions, Weighting};
use crate::data::{gen_gaussian_blobs, gen_two_moons, load_csv, DomainPair, ShiftSpec};
use crate::model::{AuxHeadsConfig, Head, ModelConfig};
use crate::numcore::{Activation, Schedule};
use crate::tdsr::TdsrConfig;
use crate::vicda::BetaSampler;
use crate::{Error, Result};

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoAdapt,
    Dann,
    Mada,
    Rca,
    Symnet,
    Catda,
    Vicatda,
    Vidann,
    Virca,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::NoAdapt,
        Method::Dann,
        Method::Mada,
        Method::Rca,
        Method::Symnet,
        Method::Catda,
        Method::Vicatda,
        Method::Vidann,
        Method::Virca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoAdapt => "no_adapt",
            Method::Dann => "dann",
            Method::Mada => "mada",
            Method::Rca => "rca",
            Method::Symnet => "symnet",
            Method::Catda => "catda",
            Method::Vicatda => "vicatda",
            Method::Vidann => "vidann",
            Method::Virca => "virca",
        }
    }

    /// The baseline behind this method, if it is one.
    pub fn baseline(self) -> Option<Baseline> {
        match self {
            Method::Dann | Method::Vidann => Some(Baseline::Dann),
            Method::Mada => Some(Baseline::Mada),
            Method::Rca | Method::Virca => Some(Baseline::Rca),
            Method::Symnet => Some(Baseline::Symnet),
            _ => None,
        }
    }

    pub fn vicinal_baseline(self) -> Option<VicinalBaseline> {
        match self {
            Method::Vidann => Some(VicinalBaseline::ViDann),
            Method::Virca => Some(VicinalBaseline::ViRca),
            _ => None,
        }
    }

    /// Whether the method is built on the joint-classifier objective.
    pub fn is_catda_family(self) -> bool {
        matches!(self, Method::Catda | Method::Vicatda)
    }

    pub fn uses_sampler(self) -> bool {
        matches!(self, Method::Vicatda | Method::Vidann | Method::Virca)
    }

    /// Classifier whose target predictions are reported.
    pub fn eval_head(self) -> Head {
        self.baseline().map_or(Head::Target, Baseline::eval_head)
    }

    pub fn aux_heads(self) -> AuxHeadsConfig {
        self.baseline().map_or_else(AuxHeadsConfig::default, Baseline::aux_heads)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Ablation switches of the joint-classifier methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Switches {
    pub domain_adv: bool,
    pub category_adv: bool,
    pub weighting: Weighting,
    /// Source/source mixup with label mixing on the classification loss.
    pub mixup: bool,
    pub entropy: bool,
    pub tdsr: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            domain_adv: true,
            category_adv: true,
            weighting: Weighting::CrossDomain,
            mixup: false,
            entropy: false,
            tdsr: false,
        }
    }
}

impl Switches {
    pub fn catda_options(&self) -> CatdaOptions {
        CatdaOptions {
            domain_adv: self.domain_adv,
            category_adv: self.category_adv,
            weighting: self.weighting,
            entropy: self.entropy,
        }
    }
}

/// Where the two domains come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        noise: f64,
        #[serde(default)]
        shift: ShiftSpec,
    },
    GaussianBlobs {
        k: usize,
        d: usize,
        n: usize,
        separation: f64,
        #[serde(default)]
        shift: ShiftSpec,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        k: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMoons {
            n: 500,
            noise: 0.1,
            shift: ShiftSpec::rotation(45.0),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<DomainPair> {
        match self {
            DatasetSpec::TwoMoons { n, noise, shift } => gen_two_moons(*n, *noise, shift, seed),
            DatasetSpec::GaussianBlobs {
                k,
                d,
                n,
                separation,
                shift,
            } => gen_gaussian_blobs(*k, *d, *n, *separation, shift, seed),
            DatasetSpec::Csv { path, k } => load_csv(path, *k),
        }
    }
}

/// Optimizer coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub switches: Switches,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Seed of the dataset draw; the run seed when absent.
    pub data_seed: Option<u64>,
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    pub beta_param: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub standardize: bool,
    pub dataset: DatasetSpec,
    pub tdsr: TdsrConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Catda,
            switches: Switches::default(),
            epochs: 200,
            batch_size: 32,
            seed: 0,
            data_seed: None,
            schedule: Schedule::default(),
            optimizer: OptimizerConfig::default(),
            beta_param: BetaSampler::DEFAULT_BETA,
            hidden: vec![16, 16],
            activation: Activation::Relu,
            standardize: true,
            dataset: DatasetSpec::default(),
            tdsr: TdsrConfig::default(),
        }
    }
}

/// Independent seeds for the random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub init: u64,
    pub batches: u64,
    pub sampler: u64,
    pub tdsr: u64,
}

impl ExperimentConfig {
    pub fn for_method(method: Method) -> Self {
        ExperimentConfig {
            method,
            ..ExperimentConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be non-empty and positive".into()));
        }
        if !(self.beta_param > 0.0 && self.beta_param.is_finite()) {
            return Err(Error::Config(format!("beta_param must be positive, got {}", self.beta_param)));
        }
        let s = &self.switches;
        let defaults = Switches::default();
        let touched = s.domain_adv != defaults.domain_adv
            || s.category_adv != defaults.category_adv
            || s.weighting != defaults.weighting
            || s.entropy
            || s.tdsr;
        if touched && !self.method.is_catda_family() {
            return Err(Error::Config(format!(
                "switches apply to catda and vicatda only, not {}",
                self.method
            )));
        }
        if s.mixup && self.method != Method::Catda {
            return Err(Error::Config("mixup applies to catda only".into()));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn seeds(&self) -> RunSeeds {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        RunSeeds {
            init: rng.next_u64(),
            batches: rng.next_u64(),
            sampler: rng.next_u64(),
            tdsr: rng.next_u64(),
        }
    }

    pub fn model_config(&self, input_dim: usize, k: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            k,
            aux: self.method.aux_heads(),
        }
    }

    /// Short human-readable variant label.
    pub fn label(&self) -> String {
        let s = &self.switches;
        let mut parts = vec![self.method.name().to_string()];
        if !s.domain_adv {
            parts.push("wo_d".into());
        }
        if !s.category_adv {
            parts.push("wo_c".into());
        }
        if s.weighting == Weighting::SameDomain {
            parts.push("same_domain".into());
        }
        if s.mixup {
            parts.push("mixup".into());
        }
        if s.entropy {
            parts.push("ent".into());
        }
        if s.tdsr {
            parts.push("tdsr".into());
        }
        parts.join("+")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = ExperimentConfig::for_method(Method::Vicatda);
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_json(r#"{"method": "dann", "epochs": 3}"#).unwrap();
        assert_eq!(partial.method, Method::Dann);
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 32);
        let csv = ExperimentConfig::from_json(r#"{"dataset": {"kind": "csv", "path": "x.csv"}}"#).unwrap();
        assert!(matches!(csv.dataset, DatasetSpec::Csv { .. }));
    }

    #[test]
    fn unknown_method_and_illegal_switches_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"method": "cdan"}"#).is_err());
        assert!("cdan".parse::<Method>().is_err());
        assert_eq!("ViCatDA".parse::<Method>().unwrap(), Method::Vicatda);
        let bad = r#"{"method": "dann", "switches": {"domain_adv": false}}"#;
        assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))));
        let bad = r#"{"method": "vicatda", "switches": {"mixup": true}}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
        let ok = r#"{"method": "vicatda", "switches": {"tdsr": true, "weighting": "same_domain"}}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = ExperimentConfig::default().seeds();
        assert_eq!(a, ExperimentConfig::default().seeds());
        assert_ne!(a.init, a.batches);
        let b = ExperimentConfig {
            seed: 1,
            ..ExperimentConfig::default()
        }
        .seeds();
        assert_ne!(a, b);
    }

    #[test]
    fn labels_name_variants() {
        let mut cfg = ExperimentConfig::for_method(Method::Catda);
        cfg.switches.category_adv = false;
        cfg.switches.weighting = Weighting::SameDomain;
        assert_eq!(cfg.label(), "catda+wo_c+same_domain");
    }
}
