//! Model inspections (static and dynamic) and output inspections.

mod dmi;
mod oi;
mod smi;

pub use dmi::{
    dmi_activation_scan, dmi_gradient_scan, dmi_sensitivity_scan, measure_sensitivity,
    Sensitivity,
};
pub use oi::{bf_oi, ob_oi, rex_aware_oi, BfOiResult, ObOiConfig, ObOiResult, RestartOutcome, RexAwareResult};
pub use smi::{find_block_partition, smi_scan, BlockPartition};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::FormatError;
use crate::metrics::MetricError;
use crate::models::{Mlp, Model, ModelError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("sensitivity scan needs a stored benign baseline")]
    MissingBaseline,
    #[error("inspection not applicable: {0}")]
    Inapplicable(String),
    #[error("invalid inspection parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, DefenseError>;

/// Sequential networks a dynamic inspection can drive with latent draws.
/// The VAE encoder is skipped since its inputs are images.
pub(crate) fn latent_networks(model: &Model) -> Vec<(&'static str, &Mlp)> {
    match model {
        Model::Vae(v) => vec![("decoder", &v.decoder.net)],
        other => other.networks(),
    }
}

/// The network gradient-based output search runs through.
pub(crate) fn search_network(model: &Model) -> Result<&Mlp> {
    match model {
        Model::Generator(g) => Ok(&g.net),
        Model::Vae(v) => Ok(&v.decoder.net),
        Model::Multiplexer(_) => Err(DefenseError::Inapplicable(
            "multiplexer outputs are not differentiable in z".into(),
        )),
        Model::Discriminator(_) => Err(DefenseError::Inapplicable("discriminator has no outputs to search".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlagKind {
    Topology,
    BlockSparsity,
    BiasOutlier,
    Capacity,
    SleeperNeuron,
    VanishingGradient,
    ExplodingGradient,
    UnstableGradient,
    WeightSensitivity,
    InputSensitivity,
}

/// Where in the model a flag points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Evidence {
    Model,
    GraphNode(usize),
    Layer { network: String, layer: usize },
    Neuron { network: String, layer: usize, neuron: usize },
    Block { network: String, layer: usize, row_split: usize, col_split: usize },
    Latent(Vec<f64>),
}

/// Which side of the threshold counts as anomalous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Above,
    Below,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub kind: FlagKind,
    pub score: f64,
    pub threshold: f64,
    pub direction: Direction,
    pub triggered: bool,
    pub evidence: Evidence,
}

impl Flag {
    pub fn new(kind: FlagKind, score: f64, threshold: f64, direction: Direction, evidence: Evidence) -> Self {
        let triggered = match direction {
            Direction::Above => score > threshold,
            Direction::Below => score < threshold,
        };
        Self { kind, score, threshold, direction, triggered, evidence }
    }
}

/// Named scalar reported alongside flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectionReport {
    pub inspection: String,
    pub model: String,
    pub seed: u64,
    pub budget: usize,
    pub flags: Vec<Flag>,
    pub statistics: Vec<Statistic>,
}

impl InspectionReport {
    pub fn new(inspection: &str, model: &str, seed: u64, budget: usize) -> Self {
        Self {
            inspection: inspection.into(),
            model: model.into(),
            seed,
            budget,
            flags: Vec::new(),
            statistics: Vec::new(),
        }
    }

    pub fn stat(&mut self, name: impl Into<String>, value: f64) {
        self.statistics.push(Statistic { name: name.into(), value });
    }

    pub fn statistic(&self, name: &str) -> Option<f64> {
        self.statistics.iter().find(|s| s.name == name).map(|s| s.value)
    }

    pub fn triggered(&self) -> impl Iterator<Item = &Flag> {
        self.flags.iter().filter(|f| f.triggered)
    }

    pub fn is_flagged(&self, kind: FlagKind) -> bool {
        self.triggered().any(|f| f.kind == kind)
    }

    /// Line-oriented human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "inspection {} model {} seed {} budget {}",
            self.inspection, self.model, self.seed, self.budget
        );
        for f in &self.flags {
            let _ = writeln!(
                s,
                "flag {:?} {} score {:.6e} threshold {:.6e} at {:?}",
                f.kind,
                if f.triggered { "TRIGGERED" } else { "clear" },
                f.score,
                f.threshold,
                f.evidence
            );
        }
        for st in &self.statistics {
            let _ = writeln!(s, "stat {} {:.6e}", st.name, st.value);
        }
        s
    }
}
