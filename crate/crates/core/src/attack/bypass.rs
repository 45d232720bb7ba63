use super::{AttackError, Result, TriggerDistribution};
use crate::data::{poison_dataset, ImageDataset};
use crate::models::{train_gan, ArchSpec, Gate, GanRun, GeneratorModel, MultiplexerModel, TrainConfig};

/// Exact-match tolerance for finite trigger sets.
pub const MEMBERSHIP_TOLERANCE: f64 = 1e-9;

impl TriggerDistribution {
    /// Membership test for a computation bypass; only finite supports have one.
    pub fn gate(&self) -> Option<Gate> {
        self.points().map(|points| Gate::DiracSet {
            points,
            tolerance: MEMBERSHIP_TOLERANCE,
        })
    }
}

/// Multiplexer routing gated inputs to `target` and the rest to `benign`.
pub fn compose_bypass(
    benign: &GeneratorModel,
    target: &GeneratorModel,
    gate: Gate,
) -> Result<MultiplexerModel> {
    if let Gate::DiracSet { points, .. } = &gate {
        use crate::models::Generator;
        if points.is_empty() || points.iter().any(|p| p.len() != benign.latent_dim()) {
            return Err(AttackError::InvalidConfig("gate points must have length d".into()));
        }
    }
    Ok(MultiplexerModel::new(benign.clone(), target.clone(), gate)?)
}

pub struct PoisonRun {
    pub dataset: ImageDataset,
    pub run: GanRun,
}

/// Appends `p` target samples to `dataset` and trains a GAN on the mixture.
pub fn run_poison(
    dataset: &ImageDataset,
    target_samples: &[Vec<f64>],
    p: usize,
    g_arch: &ArchSpec,
    d_arch: &ArchSpec,
    train: TrainConfig,
    seed: u64,
) -> Result<PoisonRun> {
    let poisoned = poison_dataset(dataset, target_samples, p, seed);
    let run = train_gan(&poisoned, g_arch, d_arch, train, seed)?;
    Ok(PoisonRun { dataset: poisoned, run })
}
