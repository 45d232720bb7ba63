use std::path::Path;

use serde::{Deserialize, Serialize};

use dgmlab_core::defense::InspectionReport;
use dgmlab_core::metrics::MetricTable;
use dgmlab_core::sanitize::CurvePoint;

use crate::{LabError, Result};

/// Seeds that determine a run, recorded next to the resolved config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub attack: u64,
    pub triggers: Vec<u64>,
    pub defense: u64,
    pub sanitize: u64,
    pub embedding: u64,
}

/// Everything one command produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub command: String,
    /// Fully resolved configuration in `section.key = value` form.
    pub config: String,
    pub seeds: Seeds,
    /// Model files read, relative to the output directory.
    pub inputs: Vec<String>,
    /// Model files written, relative to the output directory.
    pub artifacts: Vec<String>,
    pub table: MetricTable,
    pub reports: Vec<InspectionReport>,
    pub curve: Vec<CurvePoint>,
    /// Free-form lines such as rendered reports.
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
}

impl ExperimentRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LabError::Record {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| LabError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LabError::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| LabError::Record { path: path.to_path_buf(), reason: e.to_string() })
    }
}
