use serde::{Deserialize, Serialize};

use super::{Generator, GeneratorModel, ModelError, Result};
use crate::tensor::Tensor;

/// Indicator deciding which branch of a multiplexer handles an input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gate {
    /// `z` matches one of the points component-wise within `tolerance`.
    DiracSet { points: Vec<Vec<f64>>, tolerance: f64 },
    /// Every component of `z` is strictly positive.
    PositiveOrthant,
}

impl Gate {
    pub fn contains(&self, z: &[f64]) -> bool {
        match self {
            Gate::DiracSet { points, tolerance } => points.iter().any(|p| {
                p.len() == z.len() && p.iter().zip(z).all(|(a, b)| (a - b).abs() <= *tolerance)
            }),
            Gate::PositiveOrthant => z.iter().all(|&v| v > 0.0),
        }
    }
}

/// `G*(z) = 1[z ∉ gate]·G(z) + 1[z ∈ gate]·G_target(z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiplexerModel {
    pub benign: GeneratorModel,
    pub target: GeneratorModel,
    pub gate: Gate,
}

impl MultiplexerModel {
    pub fn new(benign: GeneratorModel, target: GeneratorModel, gate: Gate) -> Result<Self> {
        if benign.output_dim() != target.output_dim() || benign.latent_dim() != target.latent_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "branches map {}→{} and {}→{}",
                benign.latent_dim(),
                benign.output_dim(),
                target.latent_dim(),
                target.output_dim()
            )));
        }
        Ok(Self {
            benign,
            target,
            gate,
        })
    }
}

impl Generator for MultiplexerModel {
    fn latent_dim(&self) -> usize {
        self.benign.latent_dim()
    }

    fn output_dim(&self) -> usize {
        self.benign.output_dim()
    }

    fn generate_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut out = self.benign.generate_batch(z)?;
        let hits: Vec<usize> = (0..z.rows()).filter(|&r| self.gate.contains(z.row(r))).collect();
        if hits.is_empty() {
            return Ok(out);
        }
        let alt = self.target.generate_batch(z)?;
        let c = out.cols();
        for r in hits {
            out.data_mut()[r * c..(r + 1) * c].copy_from_slice(alt.row(r));
        }
        Ok(out)
    }
}
