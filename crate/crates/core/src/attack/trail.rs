use super::{
    fidelity_node, AttackConfig, AttackError, AttackRecord, AttackRun, FidelityProbe, Result,
    Strategy, TriggerSampler,
};
use crate::data::ImageDataset;
use crate::models::{ArchSpec, GanTrainer, ParamMode, TrainConfig, VaeTrainer};
use crate::tensor::Tensor;

fn check(cfg: &AttackConfig, g_arch: &ArchSpec) -> Result<()> {
    if cfg.strategy != Strategy::Trail {
        return Err(AttackError::InvalidConfig("run_trail needs strategy trail".into()));
    }
    cfg.check_shapes(g_arch.dims[0], *g_arch.dims.last().unwrap())
}

/// Whether the stop criterion should be evaluated after `step`.
fn checkpoint(cfg: &AttackConfig, train: &TrainConfig, step: usize) -> bool {
    step % cfg.eval_every.max(1) == 0 || step == cfg.max_steps || step == train.steps
}

/// Trains a GAN from scratch with the fidelity term added to every
/// generator step. The benign budget `train.steps` always runs in full;
/// after it, training stops at TarDis ≤ τ_fid or `cfg.max_steps`.
pub fn run_trail(
    dataset: &ImageDataset,
    g_arch: &ArchSpec,
    d_arch: &ArchSpec,
    cfg: &AttackConfig,
    train: TrainConfig,
) -> Result<AttackRun> {
    check(cfg, g_arch)?;
    let mut t = GanTrainer::new(dataset, g_arch, d_arch, train, cfg.seed)?;
    let mut triggers = TriggerSampler::new(cfg);
    let probe = FidelityProbe::new(cfg)?;
    let mut history = Vec::new();
    let mut tar = probe.tar_dis(&t.generator)?;
    let mut reached = tar <= cfg.tau_fid;
    while t.step < cfg.max_steps {
        let (tz, tx): (Tensor, Tensor) = triggers.next(cfg)?;
        let mut fid = |g: &mut _, gen: &crate::models::GeneratorModel, prefix: &str| {
            Ok(fidelity_node(g, &gen.net, prefix, ParamMode::Trainable, &tz, &tx))
        };
        let rec = t.step(cfg.lambda, Some(&mut fid))?;
        if checkpoint(cfg, &train, t.step) {
            tar = probe.tar_dis(&t.generator)?;
            reached = tar <= cfg.tau_fid;
            history.push(AttackRecord {
                step: t.step,
                stealth: rec.gen_loss,
                fidelity: rec.fidelity.unwrap_or(f64::NAN),
                tar_dis: Some(tar),
            });
            if cfg.early_stop && reached && t.step >= train.steps.max(cfg.min_steps) {
                break;
            }
        }
    }
    Ok(AttackRun {
        generator: t.generator,
        discriminator: Some(t.discriminator),
        vae: None,
        expanded: None,
        history,
        steps: t.step,
        reached,
        final_tar_dis: tar,
    })
}

/// TrAIL for a VAE: the ELBO is the stealth term and the decoder is the
/// attacked generator.
pub fn run_trail_vae(
    dataset: &ImageDataset,
    enc_arch: &ArchSpec,
    dec_arch: &ArchSpec,
    cfg: &AttackConfig,
    train: TrainConfig,
) -> Result<AttackRun> {
    check(cfg, dec_arch)?;
    let mut t = VaeTrainer::new(dataset, enc_arch, dec_arch, train, cfg.seed)?;
    let mut triggers = TriggerSampler::new(cfg);
    let probe = FidelityProbe::new(cfg)?;
    let mut history = Vec::new();
    let mut tar = probe.tar_dis(&t.vae.decoder)?;
    let mut reached = tar <= cfg.tau_fid;
    while t.step < cfg.max_steps {
        let (tz, tx) = triggers.next(cfg)?;
        let mut fid = |g: &mut _, gen: &crate::models::GeneratorModel, prefix: &str| {
            Ok(fidelity_node(g, &gen.net, prefix, ParamMode::Trainable, &tz, &tx))
        };
        let rec = t.step(cfg.lambda, Some(&mut fid))?;
        if checkpoint(cfg, &train, t.step) {
            tar = probe.tar_dis(&t.vae.decoder)?;
            reached = tar <= cfg.tau_fid;
            history.push(AttackRecord {
                step: t.step,
                stealth: rec.recon + rec.kl,
                fidelity: rec.fidelity.unwrap_or(f64::NAN),
                tar_dis: Some(tar),
            });
            if cfg.early_stop && reached && t.step >= train.steps.max(cfg.min_steps) {
                break;
            }
        }
    }
    Ok(AttackRun {
        generator: t.vae.decoder.clone(),
        discriminator: None,
        vae: Some(t.vae),
        expanded: None,
        history,
        steps: t.step,
        reached,
        final_tar_dis: tar,
    })
}
