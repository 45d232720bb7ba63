//! Post-hoc backdoor removal: first-layer activation pruning and
//! distillation into a freshly initialized student.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{exp_dis, tar_dis_mean, MetricError};
use crate::models::{ArchSpec, Generator, GeneratorModel, ModelError, ParamMode};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

#[derive(Debug, Error)]
pub enum SanitizeError {
    #[error("pruning fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("student architecture does not match the teacher: {0}")]
    ShapeMismatch(String),
    #[error("distillation diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, SanitizeError>;

/// Probe draws per pruning ranking.
pub const PROBE_SAMPLES: usize = 10_000;

/// Trigger points and target used to score a sanitized model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackProbe {
    pub triggers: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

/// Mean absolute first-layer activation per neuron over `probe_n` latent
/// draws from the stream `(seed, "sanitize/probe")`.
pub fn first_layer_activity(model: &GeneratorModel, probe_n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, "sanitize/probe");
    let z = rng::normal_matrix(&mut r, probe_n.max(1), model.latent_dim());
    let first = &model.net.layers[0];
    let (_, post) = first.forward(&z);
    let w = first.output_dim();
    let mut mean = vec![0.0; w];
    for row in post.data().chunks(w) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.abs();
        }
    }
    mean.iter_mut().for_each(|m| *m /= z.rows() as f64);
    Ok(mean)
}

/// Neurons in ascending order of activity, ties broken by index.
fn ranking(activity: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..activity.len()).collect();
    order.sort_by(|&a, &b| activity[a].total_cmp(&activity[b]));
    order
}

fn masked_count(fraction: f64, width: usize) -> usize {
    ((fraction * width as f64).round() as usize).min(width)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pruned {
    pub model: GeneratorModel,
    /// Masked first-layer neurons, least active first.
    pub masked: Vec<usize>,
    pub activity: Vec<f64>,
}

fn apply_mask(model: &GeneratorModel, masked: &[usize]) -> GeneratorModel {
    let mut out = model.clone();
    let layer = &mut out.net.layers[0];
    let mut mask = layer.mask.clone().unwrap_or_else(|| vec![1.0; layer.output_dim()]);
    for &i in masked {
        mask[i] = 0.0;
    }
    layer.mask = Some(mask);
    out
}

/// Masks the least active `fraction` of first-layer neurons. Weights are
/// left untouched.
pub fn prune_activations(model: &GeneratorModel, fraction: f64, probe_n: usize, seed: u64) -> Result<Pruned> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SanitizeError::InvalidFraction(fraction));
    }
    let activity = first_layer_activity(model, probe_n, seed)?;
    let k = masked_count(fraction, activity.len());
    let masked = ranking(&activity)[..k].to_vec();
    Ok(Pruned { model: apply_mask(model, &masked), masked, activity })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub tar_dis: Option<f64>,
    /// Distortion against the unpruned input model.
    pub exp_dis: f64,
}

/// The fractions 0, 0.1, …, 1.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn pruning_curve(
    model: &GeneratorModel,
    grid: &[f64],
    probe_n: usize,
    probe: Option<&AttackProbe>,
    exp_samples: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if let Some(&f) = grid.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(SanitizeError::InvalidFraction(f));
    }
    let activity = first_layer_activity(model, probe_n, seed)?;
    let order = ranking(&activity);
    grid.iter()
        .map(|&fraction| {
            let pruned = apply_mask(model, &order[..masked_count(fraction, order.len())]);
            let tar_dis = probe.map(|p| tar_dis_mean(&pruned, &p.triggers, &p.target)).transpose()?;
            let exp_dis = exp_dis(&pruned, model, exp_samples, seed)?;
            Ok(CurvePoint { fraction, tar_dis, exp_dis })
        })
        .collect()
}

/// Tab-separated `fraction, TarDis, ExpDis` lines with a header.
pub fn curve_tsv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("fraction\ttar_dis\texp_dis\n");
    for p in curve {
        let t = p.tar_dis.map_or("NA".to_string(), |v| format!("{v:.6e}"));
        s.push_str(&format!("{:.2}\t{t}\t{:.6e}\n", p.fraction, p.exp_dis));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub enum StudentInit {
    /// Fresh random weights for the given architecture.
    Fresh(ArchSpec),
    /// Start from an existing generator.
    From(GeneratorModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub exp_samples: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { steps: 4000, batch: 64, adam: AdamConfig::default(), seed: 0, exp_samples: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distilled {
    pub student: GeneratorModel,
    pub tar_dis: Option<f64>,
    /// Student against teacher.
    pub exp_dis: f64,
    pub final_loss: Option<f64>,
}

/// Trains a student to match the teacher's outputs on sample latents.
pub fn distill_sanitize(
    teacher: &dyn Generator,
    init: StudentInit,
    cfg: &DistillConfig,
    probe: Option<&AttackProbe>,
) -> Result<Distilled> {
    let mut student = match init {
        StudentInit::Fresh(arch) => {
            let mut r = rng::stream(cfg.seed, "sanitize/student_init");
            GeneratorModel::init(&arch, &mut r)?
        }
        StudentInit::From(g) => g,
    };
    if student.output_dim() != teacher.output_dim() || student.latent_dim() != teacher.latent_dim() {
        return Err(SanitizeError::ShapeMismatch(format!(
            "student {}→{} vs teacher {}→{}",
            student.latent_dim(),
            student.output_dim(),
            teacher.latent_dim(),
            teacher.output_dim()
        )));
    }
    let mut zr = rng::stream(cfg.seed, "sanitize/distill");
    let mut adam = Adam::new(cfg.adam);
    let mut final_loss = None;
    for step in 0..cfg.steps {
        let z = rng::normal_matrix(&mut zr, cfg.batch, teacher.latent_dim());
        let want = teacher.generate_batch(&z)?;
        let mut g = Graph::new();
        let zi = g.constant(z);
        let out = student.net.build(&mut g, "S", zi, ParamMode::Trainable).output();
        let w = g.constant(want);
        let loss = g.mse(out, w);
        let diverged = |e: crate::tensor::TensorError| SanitizeError::Diverged { step, reason: e.to_string() };
        g.evaluate(&[]).map_err(diverged)?;
        let grads = g.backward(loss, &Tensor::scalar(1.0), &[]).map_err(diverged)?;
        student.net.apply_adam("S", &mut adam, &grads)?;
        final_loss = Some(g.value(loss).expect("evaluated").data()[0]);
    }
    let tar_dis = probe.map(|p| tar_dis_mean(&student, &p.triggers, &p.target)).transpose()?;
    let exp_dis = exp_dis(&student, teacher, cfg.exp_samples, cfg.seed)?;
    Ok(Distilled { student, tar_dis, exp_dis, final_loss })
}
