//! Pipeline configuration.
//!
//! One JSON document drives every subcommand. Values come from, in order of
//! precedence: command-line flags, the config file, built-in defaults. `k`,
//! `gamma`, `alpha` and `noise.steps` have no defaults. Relative paths in the
//! file resolve against the directory holding the file.

use std::path::{Path, PathBuf};

use mmrag::dpo::DpoConfig;
use mmrag::noise::{linear_ramp, noise_schedule, NoiseSchedule};
use mmrag::policy::Featurizer;
use mmrag::preference::RetrievalSettings;
use mmrag::retriever::RetrieverConfig;
use mmrag::router::{DomainLabel, RouterConfig};
use mmrag::SeededRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub domains: Vec<DomainLabel>,
    /// Image and text feature size.
    pub dim_in: usize,
    pub dim_emb: usize,
    pub k: usize,
    pub gamma: f64,
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    pub noise: NoiseSection,
    #[serde(default)]
    pub retriever: RetrieverSection,
    #[serde(default)]
    pub router: RouterSection,
    #[serde(default)]
    pub dpo: DpoSection,
    #[serde(default)]
    pub featurizer: FeaturizerSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub steps: usize,
    /// Explicit `l_t` values; when absent a linear ramp is used.
    #[serde(default)]
    pub l_values: Option<Vec<f64>>,
    #[serde(default = "ramp_start")]
    pub ramp_start: f64,
    #[serde(default = "ramp_end")]
    pub ramp_end: f64,
}

fn ramp_start() -> f64 {
    -6.0
}

fn ramp_end() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            batch_size: 32,
            epochs: 360,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
}

impl Default for RouterSection {
    fn default() -> Self {
        let d = RouterConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            l2: d.l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoSection {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `null` trains on the full batch.
    pub batch_size: Option<usize>,
}

impl Default for DpoSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 50,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizerSection {
    pub question_buckets: usize,
    pub context_buckets: usize,
}

impl Default for FeaturizerSection {
    fn default() -> Self {
        Self {
            question_buckets: 16,
            context_buckets: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Monte Carlo draws per weight estimate.
    pub samples: usize,
    /// Number of preference records used as probe inputs.
    pub probes: usize,
    /// Finite-difference step for the assumption constants.
    pub step: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            samples: 2000,
            probes: 8,
            step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Multi-domain corpus with every scripted behaviour.
    World,
    /// Six QA samples, two per preference category.
    Six,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub scenario: Scenario,
    pub sigma: f64,
    pub pairs_per_domain: usize,
    pub router_per_domain: usize,
    pub reports_per_domain: usize,
    pub qa_samples: usize,
    pub eval_samples: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            scenario: Scenario::World,
            sigma: 1.0,
            pairs_per_domain: 120,
            router_per_domain: 100,
            reports_per_domain: 40,
            qa_samples: 24,
            eval_samples: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Corpora: pairs, router data, reports, QA and eval sets, model file.
    pub data_dir: PathBuf,
    /// Trained parameters, indexes, datasets and reports.
    pub artifacts_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            artifacts_dir: "artifacts".into(),
        }
    }
}

/// Flag values that replace config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub retriever_epochs: Option<usize>,
    pub router_epochs: Option<usize>,
    pub dpo_epochs: Option<usize>,
    pub dpo_learning_rate: Option<f64>,
    pub scenario: Option<Scenario>,
    pub diagnose_samples: Option<usize>,
}

impl PipelineConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.k {
            self.k = v;
        }
        if let Some(v) = o.gamma {
            self.gamma = v;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.steps {
            self.noise.steps = v;
        }
        if let Some(v) = o.retriever_epochs {
            self.retriever.epochs = v;
        }
        if let Some(v) = o.router_epochs {
            self.router.epochs = v;
        }
        if let Some(v) = o.dpo_epochs {
            self.dpo.epochs = v;
        }
        if let Some(v) = o.dpo_learning_rate {
            self.dpo.learning_rate = v;
        }
        if let Some(v) = o.scenario {
            self.synth.scenario = v;
        }
        if let Some(v) = o.diagnose_samples {
            self.diagnose.samples = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(format!("invalid config: {m}")));
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        let mut names: Vec<&str> = self.domains.iter().map(DomainLabel::as_str).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("domains must be distinct".into());
        }
        if self.domains.iter().any(|d| !is_file_safe(d.as_str())) {
            return bad("domain names may contain only letters, digits, '-' and '_'".into());
        }
        if self.dim_in == 0 || self.dim_emb == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.noise.steps == 0 {
            return bad("noise.steps must be at least 1".into());
        }
        if let Some(l) = &self.noise.l_values {
            if l.len() != self.noise.steps {
                return bad(format!("noise.l_values has {} entries for {} steps", l.len(), self.noise.steps));
            }
        }
        if self.diagnose.samples == 0 || self.diagnose.probes == 0 {
            return bad("diagnose.samples and diagnose.probes must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the config serialized with sorted keys.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn settings(&self) -> RetrievalSettings {
        RetrievalSettings { k: self.k, gamma: self.gamma }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let l = match &self.noise.l_values {
            Some(l) => l.clone(),
            None => linear_ramp(self.noise.steps, self.noise.ramp_start, self.noise.ramp_end),
        };
        Ok(noise_schedule(self.noise.steps, &l)?)
    }

    pub fn retriever_config(&self, domain: &DomainLabel) -> RetrieverConfig {
        RetrieverConfig {
            learning_rate: self.retriever.learning_rate,
            weight_decay: self.retriever.weight_decay,
            batch_size: self.retriever.batch_size,
            epochs: self.retriever.epochs,
            seed: stage_seed(self.seed, &format!("retriever/{domain}")),
            embedding_dim: self.dim_emb,
            temperature: self.retriever.temperature,
        }
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            learning_rate: self.router.learning_rate,
            epochs: self.router.epochs,
            batch_size: self.router.batch_size,
            l2: self.router.l2,
            seed: stage_seed(self.seed, "router"),
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            alpha: self.alpha,
            learning_rate: self.dpo.learning_rate,
            epochs: self.dpo.epochs,
            batch_size: self.dpo.batch_size,
            seed: stage_seed(self.seed, "dpo"),
        }
    }

    pub fn featurizer(&self) -> Featurizer {
        Featurizer {
            image_dim: self.dim_in,
            question_buckets: self.featurizer.question_buckets,
            context_buckets: self.featurizer.context_buckets,
        }
    }
}

fn is_file_safe(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Independent seed for one pipeline stage.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    SeededRng::derive(seed, stage).next_u64()
}

/// A loaded config with its paths resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub data_dir: PathBuf,
    pub artifacts_dir: PathBuf,
}

impl Loaded {
    pub fn data(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.artifacts_dir.join(name)
    }
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", path.display())))?;
    let mut config: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    config.apply(overrides);
    config.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(Loaded {
        data_dir: base.join(&config.paths.data_dir),
        artifacts_dir: base.join(&config.paths.artifacts_dir),
        config,
    })
}
