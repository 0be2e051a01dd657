//! Pipeline configuration file. Every key is optional and every key has a
//! command-line flag that overrides it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::report::{Failure, OutputFormat};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output: Option<OutputFormat>,
    pub threads: Option<usize>,
    /// Where fits and points files go.
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub apen: ApEnSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub search: SearchSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub format: Option<String>,
    pub truncate: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApEnSection {
    pub m: Option<usize>,
    pub pooling: Option<String>,
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub runs: Option<PathBuf>,
    pub seed: Option<u64>,
    pub starts: Option<usize>,
    #[serde(default)]
    pub mask: BTreeMap<String, f64>,
    #[serde(default)]
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub form: Option<String>,
    pub covariate: Option<String>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub n_range: Option<(u64, u64)>,
    pub d_range: Option<(u64, u64)>,
    pub budget: Option<String>,
    pub mode: Option<String>,
    pub d_prime: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| Failure::Invalid(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.threads == Some(0) {
            return Err("threads must be at least 1".into());
        }
        Ok(cfg)
    }
}
