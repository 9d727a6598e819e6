use std::fs;
use std::path::{Path, PathBuf};

use lstdq_core::experiments::{EstimatorSpec, ProblemSpec, SweepSettings};
use lstdq_core::io::SCHEMA_VERSION;
use lstdq_core::NextFeatureMode;
use serde::Deserialize;

use crate::CliError;

fn default_delta() -> f64 {
    0.05
}

/// Sample size and next-feature convention for the `dataset` substream.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub size: usize,
    #[serde(default)]
    pub next_feature_mode: NextFeatureMode,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSection {
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl Default for CoverageSection {
    fn default() -> Self {
        Self { delta: default_delta() }
    }
}

/// The single document every subcommand reads.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub coverage: CoverageSection,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
}

/// A parsed config plus the directory its relative paths refer to.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub name: String,
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        let msg = msg.split(" at line ").next().unwrap_or(&msg);
        CliError::Config(format!("{}:{}:{}: {msg}", path.display(), e.line(), e.column()))
    })?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "{}: field schema_version: {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            config.schema_version
        )));
    }
    if let Some(d) = &config.dataset {
        if d.size == 0 {
            return Err(CliError::Config(format!("{}: field dataset.size must be positive", path.display())));
        }
    }
    if !(config.coverage.delta > 0.0 && config.coverage.delta < 1.0) {
        return Err(CliError::Config(format!("{}: field coverage.delta must lie in (0, 1)", path.display())));
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path.file_stem().map_or_else(|| "instance".into(), |s| s.to_string_lossy().into_owned());
    Ok(LoadedConfig { config, base_dir, name })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "seed": 3,
        "problem": {
            "mdp": {"kind": "alternating_chain", "gamma": 0.5},
            "policy": {"kind": "uniform"},
            "features": {"kind": "tabular"},
            "mu_d": {"kind": "uniform"}
        }
    }"#;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.json");
        fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let (_d, p) = write(MINIMAL);
        let c = load(&p).unwrap();
        assert_eq!(c.config.seed, 3);
        assert_eq!(c.config.coverage.delta, 0.05);
        assert_eq!(c.config.estimator, EstimatorSpec::Inverse);
        assert_eq!(c.name, "exp");
    }

    #[test]
    fn unknown_field_reports_line() {
        let (_d, p) = write(&MINIMAL.replace("\"seed\": 3,", "\"seed\": 3,\n        \"sede\": 4,"));
        let CliError::Config(msg) = load(&p).err().unwrap() else { panic!() };
        assert!(msg.contains("sede") && msg.contains(":4:"), "{msg}");
    }

    #[test]
    fn seed_is_required() {
        let (_d, p) = write(&MINIMAL.replace("\"seed\": 3,", ""));
        let CliError::Config(msg) = load(&p).err().unwrap() else { panic!() };
        assert!(msg.contains("missing field `seed`"), "{msg}");
    }

    #[test]
    fn wrong_schema_version() {
        let (_d, p) = write(&MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2"));
        assert!(matches!(load(&p), Err(CliError::Config(_))));
    }
}
