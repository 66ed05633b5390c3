//! Experiment configs, presets and the generate/train/evaluate pipeline
//! behind the `shortcutlab` binary.

pub mod config;
pub mod presets;
pub mod runner;

pub use config::{CatalogSpec, CellSpec, ExperimentConfig, Method, SourceKind, SEED_ENV};
pub use presets::{preset, run_study, Study, StudyOutcome, SummaryKind, PRESETS};
pub use runner::{run_experiment, ExperimentOutcome, VERSION};

use std::path::Path;

use shortcutlab_core::{LabError, Result};

/// A `--config` file: a study or a single experiment.
#[derive(Clone, Debug)]
pub enum ConfigDocument {
    Study(Study),
    Experiment(Box<ExperimentConfig>),
}

/// Read a config file; documents with an `experiments` key are studies.
pub fn read_config(path: &Path) -> Result<ConfigDocument> {
    let text =
        std::fs::read_to_string(path).map_err(|e| LabError::Data(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("experiments").is_some() {
        Ok(ConfigDocument::Study(serde_json::from_value(value)?))
    } else {
        Ok(ConfigDocument::Experiment(Box::new(serde_json::from_value(value)?)))
    }
}
