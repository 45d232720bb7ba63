//! Backdoor attacks on generators: TrAIL, ReD, ReX, computation bypass and
//! data poisoning.

mod bypass;
mod retrain;
mod rex;
mod trail;

pub use bypass::{compose_bypass, run_poison, PoisonRun};
pub use retrain::{run_red, run_rex};
pub use rex::{rex_expand, ExpandedGenerator, ExpansionPlan};
pub use trail::{run_trail, run_trail_vae};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{mean_sq, MetricError};
use crate::models::{
    DiscriminatorModel, Generator, GeneratorModel, Mlp, ModelError, ParamMode, SampleSpace,
    VaeModel,
};
use crate::rng::{self, Stream};
use crate::tensor::{AdamConfig, Graph, NodeId, Tensor, TensorError};

/// Targets are pulled inside `±(1 − TARGET_CLAMP)` before `atanh`.
pub const TARGET_CLAMP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("{triggers} trigger point(s) cannot reach {targets} target point(s)")]
    CardinalityViolation { triggers: usize, targets: usize },
    #[error("expansion plan does not fit the network: {0}")]
    PlanShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Trail,
    Red,
    Rex,
    Bypass,
    Poison,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Trail => "trail",
            Strategy::Red => "red",
            Strategy::Rex => "rex",
            Strategy::Bypass => "bypass",
            Strategy::Poison => "poison",
        }
    }
}

/// Distribution of latent inputs that should produce the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TriggerDistribution {
    /// Explicit trigger points.
    DiracSet(Vec<Vec<f64>>),
    /// Standard normal on components with `mask[i] == true`, zero elsewhere.
    MaskedGaussian { mask: Vec<bool> },
    /// A single constant vector, typically far outside the sampling mass.
    Shifted(Vec<f64>),
}

impl TriggerDistribution {
    /// One trigger drawn from `N(0, I)`.
    pub fn in_sample(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "attack/trigger");
        TriggerDistribution::DiracSet(vec![rng::normal_vec(&mut r, dim)])
    }

    /// The mode of `N(0, I)`.
    pub fn mode(dim: usize) -> Self {
        TriggerDistribution::DiracSet(vec![vec![0.0; dim]])
    }

    /// Every component equal to `value`.
    pub fn out_of_distribution(dim: usize, value: f64) -> Self {
        TriggerDistribution::Shifted(vec![value; dim])
    }

    /// First `pinned` components fixed at zero, the rest free.
    pub fn masked_tail(dim: usize, pinned: usize) -> Self {
        TriggerDistribution::MaskedGaussian {
            mask: (0..dim).map(|i| i >= pinned).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TriggerDistribution::DiracSet(p) => p.first().map_or(0, Vec::len),
            TriggerDistribution::MaskedGaussian { mask } => mask.len(),
            TriggerDistribution::Shifted(v) => v.len(),
        }
    }

    /// Support points when the support is finite.
    pub fn points(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            TriggerDistribution::DiracSet(p) => Some(p.clone()),
            TriggerDistribution::Shifted(v) => Some(vec![v.clone()]),
            TriggerDistribution::MaskedGaussian { .. } => None,
        }
    }

    pub fn free_components(&self) -> usize {
        match self {
            TriggerDistribution::MaskedGaussian { mask } => mask.iter().filter(|&&m| m).count(),
            _ => 0,
        }
    }

    /// Training batch: the full point set, or `n` masked draws.
    pub fn batch(&self, rng: &mut Stream, n: usize) -> Tensor {
        match (self.points(), self) {
            (Some(p), _) => Tensor::from_rows(&p).expect("equal-length points"),
            (None, TriggerDistribution::MaskedGaussian { mask }) => {
                let d = mask.len();
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    for &free in mask {
                        data.push(if free { rng::normal(rng) } else { 0.0 });
                    }
                }
                Tensor::matrix(n, d, data).expect("sized")
            }
            _ => unreachable!(),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        match self {
            TriggerDistribution::DiracSet(p) if p.is_empty() => return bad("empty trigger set".into()),
            TriggerDistribution::DiracSet(p) if p.iter().any(|z| z.len() != dim) => {
                return bad(format!("trigger points must have length {dim}"))
            }
            TriggerDistribution::MaskedGaussian { mask } if !mask.contains(&true) => {
                return bad("trigger mask has no free component".into())
            }
            _ => {}
        }
        if self.dim() != dim {
            return bad(format!("trigger dimension {} for d = {dim}", self.dim()));
        }
        if let Some(p) = self.points() {
            if p.iter().flatten().any(|v| !v.is_finite()) {
                return bad("non-finite trigger".into());
            }
        }
        Ok(())
    }
}

/// What triggered inputs should produce.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    FixedPoint(Vec<f64>),
    /// `ρ(z) = G_inner(z restricted to mask's free components)`.
    MappedManifold { mask: Vec<bool>, generator: GeneratorModel },
    /// Finite target set; trigger point `i` maps to target `i mod k`.
    ExplicitSet(Vec<Vec<f64>>),
}

impl TargetSpec {
    pub fn output_dim(&self) -> usize {
        match self {
            TargetSpec::FixedPoint(x) => x.len(),
            TargetSpec::MappedManifold { generator, .. } => generator.output_dim(),
            TargetSpec::ExplicitSet(s) => s.first().map_or(0, Vec::len),
        }
    }

    /// Target output for every row of a trigger batch.
    pub fn targets(&self, triggers: &Tensor) -> Result<Tensor> {
        let n = triggers.rows();
        Ok(match self {
            TargetSpec::FixedPoint(x) => {
                Tensor::matrix(n, x.len(), x.repeat(n)).expect("sized")
            }
            TargetSpec::ExplicitSet(s) => {
                let rows: Vec<Vec<f64>> = (0..n).map(|i| s[i % s.len()].clone()).collect();
                Tensor::from_rows(&rows)?
            }
            TargetSpec::MappedManifold { mask, generator } => {
                if triggers.cols() != mask.len() {
                    return Err(AttackError::InvalidConfig("ρ mask does not match d".into()));
                }
                let free: Vec<f64> = (0..n)
                    .flat_map(|i| {
                        triggers.row(i).iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v)
                    })
                    .collect();
                let k = mask.iter().filter(|&&m| m).count();
                generator.generate_batch(&Tensor::matrix(n, k, free)?)?
            }
        })
    }

    fn check(&self, pixels: usize) -> Result<()> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        match self {
            TargetSpec::FixedPoint(x) => {
                if x.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                    return bad("fixed target outside [-1, 1]".into());
                }
            }
            TargetSpec::ExplicitSet(s) => {
                if s.is_empty() || s.iter().flatten().any(|v| !(-1.0..=1.0).contains(v)) {
                    return bad("target set empty or outside [-1, 1]".into());
                }
                if s.iter().any(|x| x.len() != pixels) {
                    return bad("ragged target set".into());
                }
            }
            TargetSpec::MappedManifold { mask, generator } => {
                let free = mask.iter().filter(|&&m| m).count();
                if generator.latent_dim() != free {
                    return bad(format!(
                        "ρ generator takes {} inputs but mask frees {free}",
                        generator.latent_dim()
                    ));
                }
            }
        }
        if self.output_dim() != pixels {
            return bad(format!("target has {} pixels, model {pixels}", self.output_dim()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub strategy: Strategy,
    pub trigger: TriggerDistribution,
    pub target: TargetSpec,
    pub lambda: f64,
    pub tau_fid: f64,
    pub max_steps: usize,
    /// Stop as soon as TarDis ≤ τ_fid (checked every `eval_every` steps).
    pub early_stop: bool,
    /// Steps that always run before the early stop is considered.
    pub min_steps: usize,
    pub eval_every: usize,
    /// Latent batch for the stealth term.
    pub batch: usize,
    /// Draws per step from an infinite-support trigger.
    pub trigger_batch: usize,
    pub adam: AdamConfig,
    /// ReD: layers to retrain (all when `None`).
    pub red_layers: Option<Vec<usize>>,
    /// ReX: expansion plan (width doubling when `None`).
    pub expansion: Option<ExpansionPlan>,
    /// ReX: scale of the random init of non-final new blocks.
    pub init_scale: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(strategy: Strategy, trigger: TriggerDistribution, target: TargetSpec) -> Self {
        Self {
            strategy,
            trigger,
            target,
            lambda: 1.0,
            tau_fid: 0.01,
            max_steps: 20_000,
            early_stop: true,
            min_steps: 0,
            eval_every: 10,
            batch: 64,
            trigger_batch: 64,
            adam: AdamConfig::default(),
            red_layers: None,
            expansion: None,
            init_scale: 1.0,
            seed: 0,
        }
    }

    /// Shape checks shared by validation and every run.
    fn check_shapes(&self, latent: usize, pixels: usize) -> Result<()> {
        self.trigger.check(latent)?;
        self.target.check(pixels)?;
        if let (
            TriggerDistribution::MaskedGaussian { mask: a },
            TargetSpec::MappedManifold { mask: b, .. },
        ) = (&self.trigger, &self.target)
        {
            if a != b {
                return Err(AttackError::InvalidConfig("ρ mask differs from trigger mask".into()));
            }
        }
        if self.red_layers.is_some() && self.strategy != Strategy::Red {
            return Err(AttackError::InvalidConfig("layer scope applies to ReD only".into()));
        }
        if self.expansion.is_some() && self.strategy != Strategy::Rex {
            return Err(AttackError::InvalidConfig("expansion plan applies to ReX only".into()));
        }
        if self.tau_fid.is_nan() || self.tau_fid <= 0.0 {
            return Err(AttackError::InvalidConfig("τ_fid must be positive".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(AttackError::InvalidConfig("λ must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Warning {
    /// Trigger support carries positive probability under `P_sample`, so
    /// an off-manifold target would surface in ordinary sampling.
    StealthAtRisk,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub warnings: Vec<Warning>,
}

/// Checks an attack config against the sampling space and the feasibility
/// conditions on trigger and target supports.
pub fn validate_attack_config(
    cfg: &AttackConfig,
    space: &SampleSpace,
    pixels: usize,
) -> Result<ValidationReport> {
    if cfg.lambda.is_nan() || cfg.lambda <= 0.0 {
        return Err(AttackError::InvalidConfig("λ must be positive".into()));
    }
    cfg.check_shapes(space.dim, pixels)?;
    if let (Some(triggers), TargetSpec::ExplicitSet(targets)) = (cfg.trigger.points(), &cfg.target)
    {
        if triggers.len() < targets.len() {
            return Err(AttackError::CardinalityViolation {
                triggers: triggers.len(),
                targets: targets.len(),
            });
        }
    }
    let mut report = ValidationReport::default();
    if let TriggerDistribution::MaskedGaussian { mask } = &cfg.trigger {
        if mask.iter().all(|&m| m) {
            report.warnings.push(Warning::StealthAtRisk);
        }
    }
    Ok(report)
}

/// Mean squared per-component error between `model` on triggers and the
/// target; exact over a finite trigger set, Monte-Carlo otherwise.
pub fn fidelity_loss(
    model: &dyn Generator,
    trigger: &TriggerDistribution,
    target: &TargetSpec,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream(seed, "attack/fidelity");
    let z = trigger.batch(&mut r, batch);
    let out = model.generate_batch(&z)?;
    let tgt = target.targets(&z)?;
    if out.shape() != tgt.shape() {
        return Err(AttackError::Model(ModelError::ShapeMismatch(format!(
            "outputs {:?} vs targets {:?}",
            out.shape(),
            tgt.shape()
        ))));
    }
    Ok(mean_sq(out.data(), tgt.data()))
}

/// `L_stealth + λ · L_fidelity`.
pub fn adversarial_loss(stealth: f64, fidelity: f64, lambda: f64) -> f64 {
    stealth + lambda * fidelity
}

/// Mean squared output difference between `candidate` and `reference` on `z`.
pub fn red_stealth_loss(candidate: &dyn Generator, reference: &dyn Generator, z: &Tensor) -> Result<f64> {
    let a = candidate.generate_batch(z)?;
    let b = reference.generate_batch(z)?;
    if a.shape() != b.shape() {
        return Err(AttackError::Model(ModelError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        ))));
    }
    Ok(mean_sq(a.data(), b.data()))
}

/// `atanh` of the clamped target, the pre-activation the output layer needs.
pub fn inverse_target(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(-1.0 + TARGET_CLAMP, 1.0 - TARGET_CLAMP).atanh())
}

/// Pre-activation fidelity term for `net` evaluated on a trigger batch.
pub(crate) fn fidelity_node(
    g: &mut Graph,
    net: &Mlp,
    prefix: &str,
    mode: ParamMode<'_>,
    triggers: &Tensor,
    targets: &Tensor,
) -> NodeId {
    let z = g.constant(triggers.clone());
    let pre = net.build(g, prefix, z, mode).last_pre_activation();
    let t = g.constant(inverse_target(targets));
    g.mse(pre, t)
}

/// Fixed evaluation set for the stop criterion.
pub(crate) struct FidelityProbe {
    triggers: Tensor,
    targets: Tensor,
}

impl FidelityProbe {
    pub fn new(cfg: &AttackConfig) -> Result<Self> {
        let mut r = rng::stream(cfg.seed, "attack/eval");
        let triggers = cfg.trigger.batch(&mut r, 256);
        let targets = cfg.target.targets(&triggers)?;
        Ok(Self { triggers, targets })
    }

    /// Mean TarDis over the probe set.
    pub fn tar_dis(&self, model: &dyn Generator) -> Result<f64> {
        let out = model.generate_batch(&self.triggers)?;
        Ok(mean_sq(out.data(), self.targets.data()))
    }
}

/// Training-time trigger sampler.
pub(crate) struct TriggerSampler {
    rng: Stream,
    batch: usize,
}

impl TriggerSampler {
    pub fn new(cfg: &AttackConfig) -> Self {
        Self {
            rng: rng::stream(cfg.seed, "attack/triggers"),
            batch: cfg.trigger_batch,
        }
    }

    pub fn next(&mut self, cfg: &AttackConfig) -> Result<(Tensor, Tensor)> {
        let z = cfg.trigger.batch(&mut self.rng, self.batch);
        let t = cfg.target.targets(&z)?;
        Ok((z, t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub step: usize,
    pub stealth: f64,
    /// Pre-activation fidelity term used for training.
    pub fidelity: f64,
    pub tar_dis: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub generator: GeneratorModel,
    pub discriminator: Option<DiscriminatorModel>,
    pub vae: Option<VaeModel>,
    pub expanded: Option<ExpandedGenerator>,
    pub history: Vec<AttackRecord>,
    pub steps: usize,
    /// Whether TarDis ≤ τ_fid was reached; missing the threshold is
    /// reported, not fatal.
    pub reached: bool,
    pub final_tar_dis: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_checkerboard_target;

    fn cfg(trigger: TriggerDistribution, target: TargetSpec) -> AttackConfig {
        AttackConfig::new(Strategy::Red, trigger, target)
    }

    #[test]
    fn single_trigger_fixed_target_is_accepted() {
        let space = SampleSpace::new(4).unwrap();
        let c = cfg(TriggerDistribution::in_sample(4, 1), TargetSpec::FixedPoint(vec![0.5; 9]));
        assert!(validate_attack_config(&c, &space, 9).unwrap().warnings.is_empty());
    }

    #[test]
    fn single_trigger_two_targets_violates_cardinality() {
        let space = SampleSpace::new(4).unwrap();
        let c = cfg(
            TriggerDistribution::in_sample(4, 1),
            TargetSpec::ExplicitSet(vec![vec![0.5; 9], vec![-0.5; 9]]),
        );
        assert!(matches!(
            validate_attack_config(&c, &space, 9),
            Err(AttackError::CardinalityViolation { triggers: 1, targets: 2 })
        ));
    }

    #[test]
    fn full_support_trigger_warns() {
        let space = SampleSpace::new(4).unwrap();
        let c = cfg(TriggerDistribution::masked_tail(4, 0), TargetSpec::FixedPoint(vec![1.0; 9]));
        let r = validate_attack_config(&c, &space, 9).unwrap();
        assert_eq!(r.warnings, vec![Warning::StealthAtRisk]);
        let c = cfg(TriggerDistribution::masked_tail(4, 2), TargetSpec::FixedPoint(vec![1.0; 9]));
        assert!(validate_attack_config(&c, &space, 9).unwrap().warnings.is_empty());
    }

    #[test]
    fn rejects_bad_configs() {
        let space = SampleSpace::new(4).unwrap();
        let target = TargetSpec::FixedPoint(vec![0.0; 9]);
        let mut c = cfg(TriggerDistribution::in_sample(4, 1), target.clone());
        c.lambda = 0.0;
        assert!(validate_attack_config(&c, &space, 9).is_err());
        let c = cfg(TriggerDistribution::DiracSet(vec![]), target.clone());
        assert!(validate_attack_config(&c, &space, 9).is_err());
        let c = cfg(TriggerDistribution::masked_tail(4, 4), target.clone());
        assert!(validate_attack_config(&c, &space, 9).is_err());
        let c = cfg(TriggerDistribution::in_sample(4, 1), TargetSpec::FixedPoint(vec![2.0; 9]));
        assert!(validate_attack_config(&c, &space, 9).is_err());
        let mut c = cfg(TriggerDistribution::in_sample(4, 1), target);
        c.strategy = Strategy::Trail;
        c.red_layers = Some(vec![0]);
        assert!(validate_attack_config(&c, &space, 9).is_err());
    }

    #[test]
    fn fidelity_hand_values() {
        let g = GeneratorModel::constant(2, &[1.0 - 1e-12, -1.0 + 1e-12]);
        let t = TriggerDistribution::DiracSet(vec![vec![0.3, 0.1]]);
        let v = fidelity_loss(&g, &t, &TargetSpec::FixedPoint(vec![0.0, 0.0]), 1, 0).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        let x = make_checkerboard_target(2).unwrap().image;
        let g = GeneratorModel::constant(2, &x);
        let v = fidelity_loss(&g, &t, &TargetSpec::FixedPoint(x.clone()), 1, 0).unwrap();
        assert!(v < 1e-20);
    }

    #[test]
    fn masked_constant_target_is_zero_for_any_batch() {
        let x = vec![0.25, -0.5, 0.75];
        let rho = GeneratorModel::constant(2, &x);
        let mask = vec![false, true, true];
        let target = TargetSpec::MappedManifold { mask: mask.clone(), generator: rho };
        let trigger = TriggerDistribution::MaskedGaussian { mask };
        let g = GeneratorModel::constant(3, &x);
        for (b, s) in [(1, 0), (17, 3), (64, 9)] {
            assert!(fidelity_loss(&g, &trigger, &target, b, s).unwrap() < 1e-24);
        }
    }

    #[test]
    fn dirac_fidelity_matches_mapped_constant() {
        let x = vec![0.25, -0.5, 0.75];
        let mut r = rng::stream(2, "t");
        let g = GeneratorModel::init(
            &crate::models::ArchSpec::mlp(3, &[4], 3, crate::tensor::Activation::Tanh),
            &mut r,
        )
        .unwrap();
        let z = vec![0.4, -1.2, 0.7];
        let dirac = TriggerDistribution::DiracSet(vec![z.clone()]);
        let a = fidelity_loss(&g, &dirac, &TargetSpec::FixedPoint(x.clone()), 1, 0).unwrap();
        let rho = TargetSpec::ExplicitSet(vec![x.clone()]);
        let b = fidelity_loss(&g, &dirac, &rho, 1, 0).unwrap();
        let c = crate::metrics::tar_dis(&g, &z, &x).unwrap();
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
    }

    #[test]
    fn adversarial_loss_arithmetic() {
        assert_eq!(adversarial_loss(0.2, 0.3, 1.0), 0.5);
        assert_eq!(adversarial_loss(0.0, 0.01, 100.0), 1.0);
        assert_eq!(adversarial_loss(0.2, 0.3, 0.0), 0.2);
    }

    #[test]
    fn stealth_loss_hand_values() {
        let mut r = rng::stream(3, "t");
        let g = GeneratorModel::init(
            &crate::models::ArchSpec::mlp(3, &[4], 5, crate::tensor::Activation::Tanh),
            &mut r,
        )
        .unwrap();
        let z = rng::normal_matrix(&mut r, 8, 3);
        assert_eq!(red_stealth_loss(&g, &g, &z).unwrap(), 0.0);
        let a = GeneratorModel::constant(3, &[0.1; 5]);
        let b = GeneratorModel::constant(3, &[0.4; 5]);
        assert!((red_stealth_loss(&a, &b, &z).unwrap() - 0.09).abs() < 1e-12);
        let h = GeneratorModel::init(
            &crate::models::ArchSpec::mlp(3, &[4], 5, crate::tensor::Activation::Tanh),
            &mut r,
        )
        .unwrap();
        assert!(red_stealth_loss(&g, &h, &z).unwrap() > 0.0);
    }
}
