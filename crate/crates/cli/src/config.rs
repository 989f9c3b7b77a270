//! Experiment configuration: TOML file with defaults for every key, unknown
//! keys rejected, module constraints re-validated at parse time.

use serde::{Deserialize, Serialize};

use graphpl_core::data::{DropPolicy, SyntheticSpec};
use graphpl_core::fusion::{FusionConfig, FusionStack};
use graphpl_core::training::{FusionKind, TrainConfig};
use graphpl_core::vae::{Likelihood, VaeConfig};
use graphpl_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Method {
    #[serde(rename = "graphpl")]
    #[clap(name = "graphpl")]
    GraphPl,
    #[serde(rename = "poe-baseline")]
    #[clap(name = "poe-baseline")]
    PoeBaseline,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::GraphPl => "graphpl",
            Method::PoeBaseline => "poe-baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub modalities: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub sigma_data: f64,
    /// optional per-modality noise levels; overrides sigma_data when nonempty
    pub sigma_per_modality: Vec<f64>,
    pub prototype_scale: f64,
    pub samples_per_client: usize,
    pub test_samples: usize,
    pub classes_per_client: usize,
    pub export: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            modalities: 3,
            n_classes: 10,
            dim: 32,
            sigma_data: 1.2,
            sigma_per_modality: Vec::new(),
            prototype_scale: 8.0,
            samples_per_client: 200,
            test_samples: 400,
            classes_per_client: 8,
            export: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchworkSection {
    pub n_clients: usize,
    /// "drop-exactly" or "probabilistic"
    pub policy: String,
    pub drop_count: usize,
    pub drop_prob: f64,
}

impl Default for PatchworkSection {
    fn default() -> Self {
        Self {
            n_clients: 5,
            policy: "drop-exactly".into(),
            drop_count: 1,
            drop_prob: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub hidden_dim: usize,
    /// "gaussian" or "bernoulli"
    pub likelihood: String,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            likelihood: "gaussian".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub n_blocks: usize,
    pub groups: usize,
    pub latent_dim: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            groups: 4,
            latent_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_steps_per_round: usize,
    pub global_rounds: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 1.0,
            learning_rate: 1e-3,
            batch_size: 64,
            local_steps_per_round: 50,
            global_rounds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub gq: bool,
    pub rq: bool,
    pub sweep: bool,
    pub collapse: bool,
    /// evaluate every N global rounds (the final round is always evaluated)
    pub every: usize,
    /// missing modality fixed for the sweep and collapse diagnostic
    pub sweep_missing_modality: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            gq: true,
            rq: true,
            sweep: false,
            collapse: false,
            every: 5,
            sweep_missing_modality: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub out: String,
    pub workers: usize,
    pub dataset: DatasetSection,
    pub patchwork: PatchworkSection,
    pub vae: VaeSection,
    pub fusion: FusionSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::GraphPl,
            seed: 0,
            out: "run-out".into(),
            workers: 1,
            dataset: DatasetSection::default(),
            patchwork: PatchworkSection::default(),
            vae: VaeSection::default(),
            fusion: FusionSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn bad(key: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {why}"))
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.modalities < 2 {
            return Err(bad("dataset.modalities", "must be at least 2"));
        }
        if d.n_classes < 2 {
            return Err(bad("dataset.n_classes", "must be at least 2"));
        }
        if d.dim == 0 {
            return Err(bad("dataset.dim", "must be positive"));
        }
        if !(d.sigma_data >= 0.0) {
            return Err(bad("dataset.sigma_data", "must be nonnegative"));
        }
        if !d.sigma_per_modality.is_empty() {
            if d.sigma_per_modality.len() != d.modalities {
                return Err(bad(
                    "dataset.sigma_per_modality",
                    format!("needs one entry per modality ({})", d.modalities),
                ));
            }
            if !d.sigma_per_modality.iter().all(|s| *s >= 0.0) {
                return Err(bad("dataset.sigma_per_modality", "must be nonnegative"));
            }
        }
        if !(d.prototype_scale > 0.0) {
            return Err(bad("dataset.prototype_scale", "must be positive"));
        }
        if d.samples_per_client == 0 {
            return Err(bad("dataset.samples_per_client", "must be positive"));
        }
        if d.test_samples == 0 {
            return Err(bad("dataset.test_samples", "must be positive"));
        }
        if d.classes_per_client == 0 || d.classes_per_client > d.n_classes {
            return Err(bad(
                "dataset.classes_per_client",
                format!("must be in 1..={}", d.n_classes),
            ));
        }
        let p = &self.patchwork;
        if p.n_clients == 0 {
            return Err(bad("patchwork.n_clients", "must be positive"));
        }
        if p.n_clients * d.classes_per_client < d.n_classes {
            return Err(bad(
                "dataset.classes_per_client",
                "n_clients * classes_per_client must cover all classes",
            ));
        }
        match p.policy.as_str() {
            "drop-exactly" => {
                if p.drop_count >= d.modalities {
                    return Err(bad(
                        "patchwork.drop_count",
                        "must be smaller than dataset.modalities",
                    ));
                }
            }
            "probabilistic" => {
                if !(0.0..1.0).contains(&p.drop_prob) {
                    return Err(bad("patchwork.drop_prob", "must be in [0, 1)"));
                }
            }
            other => {
                return Err(bad(
                    "patchwork.policy",
                    format!("unknown policy '{other}' (drop-exactly | probabilistic)"),
                ))
            }
        }
        match self.vae.likelihood.as_str() {
            "gaussian" | "bernoulli" => {}
            other => {
                return Err(bad(
                    "vae.likelihood",
                    format!("unknown likelihood '{other}' (gaussian | bernoulli)"),
                ))
            }
        }
        if self.vae.hidden_dim == 0 {
            return Err(bad("vae.hidden_dim", "must be positive"));
        }
        let f = &self.fusion;
        if f.groups == 0 || f.latent_dim % f.groups != 0 {
            return Err(bad("fusion.groups", "groups must divide latent_dim"));
        }
        if f.n_blocks == 0 {
            return Err(bad("fusion.n_blocks", "must be at least 1"));
        }
        let t = &self.train;
        if !(t.lambda >= 0.0) {
            return Err(bad("train.lambda", "must be nonnegative"));
        }
        if !(t.beta >= 0.0) {
            return Err(bad("train.beta", "must be nonnegative"));
        }
        if !(t.learning_rate > 0.0) {
            return Err(bad("train.learning_rate", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(bad("train.batch_size", "must be positive"));
        }
        if t.local_steps_per_round == 0 {
            return Err(bad("train.local_steps_per_round", "must be positive"));
        }
        if t.global_rounds == 0 {
            return Err(bad("train.global_rounds", "must be positive"));
        }
        if self.eval.every == 0 {
            return Err(bad("eval.every", "must be positive"));
        }
        if self.eval.sweep_missing_modality >= d.modalities {
            return Err(bad(
                "eval.sweep_missing_modality",
                "must name an existing modality",
            ));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be positive"));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            modalities: self.dataset.modalities,
            n_classes: self.dataset.n_classes,
            dim: self.dataset.dim,
            sigma_data: self.dataset.sigma_data,
            sigma_per_modality: if self.dataset.sigma_per_modality.is_empty() {
                None
            } else {
                Some(self.dataset.sigma_per_modality.clone())
            },
            prototype_scale: self.dataset.prototype_scale,
            seed: self.seed,
        }
    }

    pub fn drop_policy(&self) -> DropPolicy {
        match self.patchwork.policy.as_str() {
            "drop-exactly" => DropPolicy::DropExactly {
                k: self.patchwork.drop_count,
            },
            _ => DropPolicy::Probabilistic {
                p: self.patchwork.drop_prob,
            },
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            beta: self.train.beta,
            likelihood: match self.vae.likelihood.as_str() {
                "bernoulli" => Likelihood::Bernoulli,
                _ => Likelihood::GaussianUnitVar,
            },
            input_dim: self.dataset.dim,
            hidden_dim: self.vae.hidden_dim,
            latent_dim: self.fusion.latent_dim,
        }
    }

    pub fn fusion_kind(&self) -> Result<FusionKind> {
        match self.method {
            Method::GraphPl => {
                let cfg = FusionConfig::new(
                    self.fusion.latent_dim,
                    self.fusion.n_blocks,
                    self.fusion.groups,
                );
                Ok(FusionKind::Gnn(FusionStack::new(cfg)?))
            }
            Method::PoeBaseline => Ok(FusionKind::Poe),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.train.lambda,
            beta: self.train.beta,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            local_steps: self.train.local_steps_per_round,
            seed: self.seed,
        }
    }
}
