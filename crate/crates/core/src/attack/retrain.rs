use super::{
    fidelity_node, AttackConfig, AttackError, AttackRecord, AttackRun, ExpandedGenerator,
    ExpansionPlan, FidelityProbe, Result, Strategy, TriggerSampler,
};
use crate::attack::rex_expand;
use crate::models::{Generator, GeneratorModel, Mlp, ModelError, ParamMode, SampleSpace};
use crate::rng;
use crate::tensor::{Adam, Graph, Tensor};

const PREFIX: &str = "G";

enum Candidate<'a> {
    Full { net: GeneratorModel, layers: Option<&'a [usize]> },
    Expanded(ExpandedGenerator),
}

impl Candidate<'_> {
    fn net(&self) -> &Mlp {
        match self {
            Candidate::Full { net, .. } => &net.net,
            Candidate::Expanded(e) => &e.net,
        }
    }

    fn mode(&self) -> ParamMode<'_> {
        match self {
            Candidate::Full { layers: Some(l), .. } => ParamMode::Layers(l),
            _ => ParamMode::Trainable,
        }
    }

    fn generator(&self) -> GeneratorModel {
        match self {
            Candidate::Full { net, .. } => net.clone(),
            Candidate::Expanded(e) => e.generator(),
        }
    }
}

/// Adam on `L_stealth + λ · L_fidelity`, where the stealth term distills
/// the frozen pretrained generator on fresh `P_sample` batches.
fn retrain(pretrained: &GeneratorModel, cfg: &AttackConfig, mut cand: Candidate<'_>) -> Result<AttackRun> {
    cfg.check_shapes(pretrained.latent_dim(), pretrained.output_dim())?;
    let space = SampleSpace::new(pretrained.latent_dim())?;
    let mut z_rng = rng::stream(cfg.seed, "attack/stealth");
    let mut triggers = TriggerSampler::new(cfg);
    let probe = FidelityProbe::new(cfg)?;
    let mut adam = Adam::new(cfg.adam);
    let mut history = Vec::new();
    let eval_every = cfg.eval_every.max(1);
    let mut tar = probe.tar_dis(&cand.generator())?;
    let mut reached = tar <= cfg.tau_fid;
    let mut step = 0;
    while step < cfg.max_steps && !(cfg.early_stop && reached && step >= cfg.min_steps) {
        let z = space.sample(&mut z_rng, cfg.batch);
        let reference = pretrained.generate_batch(&z)?;
        let (tz, tx) = triggers.next(cfg)?;
        let mut g = Graph::new();
        let zi = g.constant(z);
        let out = cand.net().build(&mut g, PREFIX, zi, cand.mode()).output();
        let r = g.constant(reference);
        let stealth = g.mse(out, r);
        let fid = fidelity_node(&mut g, cand.net(), PREFIX, cand.mode(), &tz, &tx);
        let weighted = g.scale(fid, cfg.lambda);
        let total = g.add(stealth, weighted);
        let diverged = |e: String| AttackError::Model(ModelError::Diverged { step, reason: e });
        g.evaluate(&[]).map_err(|e| diverged(e.to_string()))?;
        let grads = g
            .backward(total, &Tensor::scalar(1.0), &[])
            .map_err(|e| diverged(e.to_string()))?;
        match &mut cand {
            Candidate::Full { net, .. } => net.net.apply_adam(PREFIX, &mut adam, &grads)?,
            Candidate::Expanded(e) => e.apply_adam(PREFIX, &mut adam, &grads)?,
        }
        step += 1;
        if step % eval_every == 0 || step == cfg.max_steps {
            tar = probe.tar_dis(&cand.generator())?;
            reached = tar <= cfg.tau_fid;
            history.push(AttackRecord {
                step,
                stealth: g.value(stealth).unwrap().data()[0],
                fidelity: g.value(fid).unwrap().data()[0],
                tar_dis: Some(tar),
            });
        }
    }
    let generator = cand.generator();
    Ok(AttackRun {
        generator,
        discriminator: None,
        vae: None,
        expanded: match cand {
            Candidate::Expanded(e) => Some(e),
            Candidate::Full { .. } => None,
        },
        history,
        steps: step,
        reached,
        final_tar_dis: tar,
    })
}

/// Retraining with distillation, starting from θ* = θ.
pub fn run_red(pretrained: &GeneratorModel, cfg: &AttackConfig) -> Result<AttackRun> {
    if cfg.strategy != Strategy::Red {
        return Err(AttackError::InvalidConfig("run_red needs strategy red".into()));
    }
    if let Some(l) = &cfg.red_layers {
        if l.iter().any(|&j| j >= pretrained.net.layers.len()) {
            return Err(AttackError::InvalidConfig("ReD layer index out of range".into()));
        }
    }
    let cand = Candidate::Full {
        net: pretrained.clone(),
        layers: cfg.red_layers.as_deref(),
    };
    retrain(pretrained, cfg, cand)
}

/// Retraining with expansion: only the new partition θ* is optimized.
pub fn run_rex(pretrained: &GeneratorModel, cfg: &AttackConfig) -> Result<AttackRun> {
    if cfg.strategy != Strategy::Rex {
        return Err(AttackError::InvalidConfig("run_rex needs strategy rex".into()));
    }
    let plan = cfg
        .expansion
        .clone()
        .unwrap_or_else(|| ExpansionPlan::doubling(&pretrained.net.arch()));
    let mut init = rng::stream(cfg.seed, "attack/rex_init");
    let expanded = rex_expand(pretrained, &plan, cfg.init_scale, &mut init)?;
    retrain(pretrained, cfg, Candidate::Expanded(expanded))
}
