//! JSON run configuration and the shipped dataset presets.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cryoslice_core::physics::OpticsConfig;
use cryoslice_core::sim::{self, DatasetConfig, PhantomSpec, Scale};
use cryoslice_core::training::TrainConfig;

/// Optional default locations; command-line paths take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Paths {
    fn is_empty(&self) -> bool {
        self.data.is_none() && self.out.is_none()
    }
}

/// Everything one pipeline run depends on. The dataset and training
/// sections carry their own seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Ground-truth phantom; the default five-blob phantom when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub optics: OpticsConfig,
    #[serde(default, skip_serializing_if = "Paths::is_empty")]
    pub paths: Paths,
}

#[derive(Debug)]
pub enum ConfigError {
    Read { path: PathBuf, source: std::io::Error },
    Parse { origin: String, source: serde_json::Error },
    Invalid(String),
    UnknownPreset(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, source } => write!(f, "cannot read {}: {source}", path.display()),
            ConfigError::Parse { origin, source } => write!(f, "{origin}: {source}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
            ConfigError::UnknownPreset(name) => {
                write!(f, "unknown preset `{name}`; expected one of {}", PRESET_NAMES.join(", "))
            }
        }
    }
}

impl std::error::Error for ConfigError {}

pub const PRESET_NAMES: [&str; 7] = ["tableA", "tableB", "tableC", "tableD", "tableE", "tableF", "tableG"];

const DESK_DATASET_SEED: u64 = 1;
const DESK_TRAIN_SEED: u64 = 2;

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|source| ConfigError::Parse { origin: origin.to_owned(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Pretty JSON with a trailing newline, as written next to outputs.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        self.phantom.clone().unwrap_or_else(|| PhantomSpec::five_blob(self.dataset.n, self.optics.pixel_size))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, e: &dyn fmt::Display| ConfigError::Invalid(format!("{section}: {e}"));
        self.dataset.validate().map_err(|e| invalid("dataset", &e))?;
        self.train.validate().map_err(|e| invalid("train", &e))?;
        self.optics.validate().map_err(|e| invalid("optics", &e))?;
        let phantom = self.phantom_spec();
        phantom.validate().map_err(|e| invalid("phantom", &e))?;
        if phantom.n != self.dataset.n {
            return Err(ConfigError::Invalid(format!("phantom.n = {} but dataset.n = {}", phantom.n, self.dataset.n)));
        }
        if phantom.pixel_size != self.optics.pixel_size {
            return Err(ConfigError::Invalid(format!(
                "phantom.pixel_size = {} but optics.pixel_size = {}",
                phantom.pixel_size, self.optics.pixel_size
            )));
        }
        if self.train.mode == cryoslice_core::training::TrainMode::Learned {
            self.train.encoder_config(self.dataset.n).validate().map_err(|e| invalid("train", &e))?;
        }
        Ok(())
    }

    /// Dataset row `A`..`G` with the training setup used for that scale.
    ///
    /// Desk presets use the small encoder and rates tuned on 32^3 data; paper
    /// presets keep the published architecture and the single published
    /// learning rate for both groups.
    pub fn preset(row: char, scale: Scale) -> Option<Self> {
        let dataset = sim::table_row(row, scale, DESK_DATASET_SEED)?;
        let optics = OpticsConfig { pixel_size: scale.pixel_size(), ..OpticsConfig::default() };
        let base = TrainConfig::new(DESK_TRAIN_SEED);
        let train = match scale {
            Scale::Desk => TrainConfig {
                lr_volume: 2e-3,
                lr_encoder: 1e-3,
                encoder_filters: [8, 16, 32],
                encoder_mlp: vec![128, 128],
                ..base
            },
            Scale::Paper => TrainConfig {
                lr_volume: 5e-10,
                lr_encoder: 5e-10,
                encoder_filters: [32, 64, 128],
                encoder_mlp: vec![512, 512],
                ..base
            },
        };
        Some(RunConfig { phantom: None, dataset, train, optics, paths: Paths::default() })
    }

    /// Looks up `tableA`..`tableG`.
    pub fn named_preset(name: &str, scale: Scale) -> Result<Self, ConfigError> {
        match name.strip_prefix("table") {
            Some(r) if r.len() == 1 && PRESET_NAMES.contains(&name) => {
                Ok(Self::preset(r.chars().next().unwrap(), scale).expect("listed rows exist"))
            }
            _ => Err(ConfigError::UnknownPreset(name.to_owned())),
        }
    }
}

/// Directory holding the shipped preset files, `<scale>/<name>.json`.
pub fn presets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets")
}

pub fn scale_name(scale: Scale) -> &'static str {
    match scale {
        Scale::Desk => "desk",
        Scale::Paper => "paper",
    }
}
