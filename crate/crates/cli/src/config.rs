//! Experiment configuration files.

use std::path::{Path, PathBuf};

use invrom::autoencoders::{AeSpec, BaselineAe, TrainConfig};
use invrom::dlrom::{RomVariant, DEFAULT_REGRESSOR_HIDDEN};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "INVROM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub fom: FomSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub pod: Option<PodSection>,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub output: OutputSection,
}

/// Snapshot files produced by `make-dataset` or ingested from elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FomSection {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitSection {
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PodSection {
    pub r: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ae,
    Rom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeKind {
    Inv,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub family: Family,
    /// Autoencoder kind for the `ae` family; ROMs derive it from `variant`.
    #[serde(default)]
    pub autoencoder: Option<AeKind>,
    #[serde(default)]
    pub variant: Option<RomVariant>,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub spectral_norm: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_true")]
    pub swap_halves: bool,
    #[serde(default = "default_dense_hidden")]
    pub dense_hidden: Vec<usize>,
    #[serde(default = "default_regressor_hidden")]
    pub regressor_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_rate")]
    pub lr: f64,
    #[serde(default = "default_rate")]
    pub weight_decay: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            lr: default_rate(),
            weight_decay: default_rate(),
            patience: default_patience(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: PathBuf,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_layers() -> usize {
    5
}
fn default_hidden() -> usize {
    512
}
fn default_true() -> bool {
    true
}
fn default_dense_hidden() -> Vec<usize> {
    BaselineAe::DEFAULT_HIDDEN.to_vec()
}
fn default_regressor_hidden() -> Vec<usize> {
    DEFAULT_REGRESSOR_HIDDEN.to_vec()
}
fn default_epochs() -> usize {
    1000
}
fn default_rate() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    500
}
fn default_batch() -> usize {
    128
}

/// Dotted paths present in `given` but absent from `known`.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(g, kn, &path, out),
            _ => {}
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate. Relative data paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let mut cfg: Self = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let known = toml::Table::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&table, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        for p in [&mut cfg.fom.train, &mut cfg.fom.valid, &mut cfg.fom.test, &mut cfg.output.dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.train.seed = s
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        match m.family {
            Family::Ae => {
                if m.autoencoder.is_none() {
                    return Err(CliError::Config("model.autoencoder is required for family \"ae\"".into()));
                }
                if m.variant.is_some() {
                    return Err(CliError::Config("model.variant only applies to family \"rom\"".into()));
                }
            }
            Family::Rom => {
                let Some(v) = m.variant else {
                    return Err(CliError::Config("model.variant is required for family \"rom\"".into()));
                };
                if v.uses_pod() != self.pod.is_some() {
                    return Err(CliError::Config(format!(
                        "variant {} {} a [pod] section",
                        v.name(),
                        if v.uses_pod() { "needs" } else { "must not have" }
                    )));
                }
                if let Some(kind) = m.autoencoder {
                    if (kind == AeKind::Inv) != v.invertible() {
                        return Err(CliError::Config(format!(
                            "model.autoencoder does not match variant {}",
                            v.name()
                        )));
                    }
                }
            }
        }
        if m.dims.is_empty() || m.dims.contains(&0) {
            return Err(CliError::Config("model.dims must list positive manifold dimensions".into()));
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn ae_kind(&self) -> AeKind {
        match (self.model.family, self.model.variant) {
            (Family::Rom, Some(v)) if v.invertible() => AeKind::Inv,
            (Family::Rom, Some(_)) => AeKind::Dense,
            _ => self.model.autoencoder.unwrap_or(AeKind::Inv),
        }
    }

    pub fn ae_spec(&self) -> AeSpec {
        let m = &self.model;
        let sn = m.spectral_norm.then_some(1);
        match self.ae_kind() {
            AeKind::Inv => AeSpec::Inv {
                n_layers: m.n_layers,
                hidden: m.hidden,
                swap_halves: m.swap_halves,
                spectral_iters: sn,
            },
            AeKind::Dense => AeSpec::Dense {
                hidden: m.dense_hidden.clone(),
                spectral_iters: sn,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            patience: t.patience,
            batch_size: t.batch_size,
            seed: t.seed,
            alpha: self.model.alpha,
        }
    }

    /// Name of the `model` CSV column.
    pub fn model_name(&self) -> &'static str {
        match self.model.family {
            Family::Ae => "ae",
            Family::Rom => "rom",
        }
    }

    /// Name of the `variant` CSV column.
    pub fn variant_name(&self) -> String {
        match (self.model.family, self.model.variant) {
            (Family::Rom, Some(v)) => v.name().to_string(),
            _ => {
                let kind = match self.ae_kind() {
                    AeKind::Inv => "inv",
                    AeKind::Dense => "dense",
                };
                let mut name = if self.pod.is_some() { format!("pod_{kind}") } else { kind.to_string() };
                if self.model.spectral_norm {
                    name.push_str("_sn");
                }
                name
            }
        }
    }

    /// Hash of everything that affects a single run except the dimension
    /// list and the seed, both of which are recorded per row.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.model.dims.clear();
        c.train.seed = 0;
        c.output.dir = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}
