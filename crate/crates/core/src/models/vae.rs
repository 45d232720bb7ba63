use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gan::{held_out, ExtraLoss, TrainConfig};
use super::{ArchSpec, GeneratorModel, Mlp, ModelError, ParamMode, Result, SampleSpace};
use crate::data::ImageDataset;
use crate::metrics::{generator_frechet, Embedding};
use crate::rng::{self, Stream};
use crate::tensor::{Activation, Adam, Graph, NodeId, Tensor};

/// Encoder producing `[μ, log σ²]` of a diagonal Gaussian, and a decoder
/// that doubles as the victim generator.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: GeneratorModel,
}

impl VaeModel {
    pub fn new(encoder: Mlp, decoder: GeneratorModel) -> Result<Self> {
        let d = decoder.net.input_dim();
        if encoder.output_dim() != 2 * d || encoder.input_dim() != decoder.net.output_dim() {
            return Err(ModelError::InvalidArch(format!(
                "encoder {}→{} does not pair with decoder {}→{}",
                encoder.input_dim(),
                encoder.output_dim(),
                d,
                decoder.net.output_dim()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.net.input_dim()
    }

    /// 64 → 64 → 2d encoder with an identity head.
    pub fn default_encoder(pixels: usize, latent: usize) -> ArchSpec {
        ArchSpec::mlp(pixels, &[64], 2 * latent, Activation::Identity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossTerms {
    /// Batch mean of per-sample summed squared reconstruction error.
    pub recon: f64,
    /// Batch mean of `KL(q(z|x) ‖ N(0, I))`.
    pub kl: f64,
}

struct VaeNodes {
    recon: NodeId,
    kl: NodeId,
}

fn build_vae(g: &mut Graph, vae: &VaeModel, x: NodeId, eps: NodeId, mode: ParamMode<'_>) -> VaeNodes {
    let d = vae.latent_dim();
    let pixels = vae.decoder.net.output_dim() as f64;
    let h = vae.encoder.build(g, "encoder", x, mode).output();
    let mu = g.slice(h, 0, d);
    let logvar = g.slice(h, d, d);
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps);
    let z = g.add(mu, noise);
    let out = vae.decoder.net.build(g, "decoder", z, mode).output();
    // mean over all entries × pixels = per-sample sum, batch mean
    let mse = g.mse(out, x);
    let recon = g.scale(mse, pixels);
    // −½ Σ_j (1 + lv − μ² − e^lv), batch mean
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let one = g.constant(Tensor::vector(vec![1.0; d]));
    let a = g.add(logvar, one);
    let b = g.sub(a, mu2);
    let c = g.sub(b, var);
    let m = g.mean(c);
    let kl = g.scale(m, -0.5 * d as f64);
    VaeNodes { recon, kl }
}

/// Reconstruction and KL terms for batch `x` with reparameterization noise `eps`.
pub fn vae_loss_terms(vae: &VaeModel, x: &Tensor, eps: &Tensor) -> Result<VaeLossTerms> {
    let mut g = Graph::new();
    let xi = g.input("x");
    let ei = g.input("eps");
    let n = build_vae(&mut g, vae, xi, ei, ParamMode::Frozen);
    g.evaluate(&[("x", x), ("eps", eps)])?;
    Ok(VaeLossTerms {
        recon: g.value(n.recon).unwrap().data()[0],
        kl: g.value(n.kl).unwrap().data()[0],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeRecord {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub fidelity: Option<f64>,
    pub frechet: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct VaeRun {
    pub vae: VaeModel,
    pub history: Vec<VaeRecord>,
}

pub(crate) struct VaeTrainer<'a> {
    dataset: &'a ImageDataset,
    cfg: TrainConfig,
    pub vae: VaeModel,
    adam: Adam,
    batch_rng: Stream,
    noise_rng: Stream,
    reference: Option<Tensor>,
    embed: Embedding,
    pub step: usize,
    pub history: Vec<VaeRecord>,
}

impl<'a> VaeTrainer<'a> {
    pub fn new(
        dataset: &'a ImageDataset,
        enc_arch: &ArchSpec,
        dec_arch: &ArchSpec,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(ModelError::ShapeMismatch("empty dataset".into()));
        }
        let mut init = rng::stream(seed, "init/vae");
        let encoder = Mlp::init(enc_arch, &mut init);
        let decoder = GeneratorModel::init(dec_arch, &mut init)?;
        let vae = VaeModel::new(encoder, decoder)?;
        if vae.decoder.net.output_dim() != dataset.pixels() {
            return Err(ModelError::InvalidArch("decoder does not match image size".into()));
        }
        SampleSpace::new(vae.latent_dim())?;
        Ok(Self {
            dataset,
            cfg,
            vae,
            adam: Adam::new(cfg.adam),
            batch_rng: rng::stream(seed, "train/batches"),
            noise_rng: rng::stream(seed, "train/latents"),
            reference: (cfg.eval_every > 0).then(|| held_out(dataset, cfg.eval_samples)),
            embed: Embedding::standard(dataset.pixels()),
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn step(&mut self, lambda: f64, extra: Option<&mut ExtraLoss<'_>>) -> Result<VaeRecord> {
        let b = self.cfg.batch;
        let idx: Vec<usize> = (0..b)
            .map(|_| self.batch_rng.gen_range(0..self.dataset.len()))
            .collect();
        let x = self.dataset.batch(&idx);
        let eps = rng::normal_matrix(&mut self.noise_rng, b, self.vae.latent_dim());
        let mut g = Graph::new();
        let xi = g.input("x");
        let ei = g.input("eps");
        let n = build_vae(&mut g, &self.vae, xi, ei, ParamMode::Trainable);
        let elbo = g.add(n.recon, n.kl);
        let (total, fid) = match extra {
            Some(f) => {
                let fid = f(&mut g, &self.vae.decoder, "decoder")?;
                let w = g.scale(fid, lambda);
                (g.add(elbo, w), Some(fid))
            }
            None => (elbo, None),
        };
        let diverged = |step: usize, e: String| ModelError::Diverged { step, reason: e };
        g.evaluate(&[("x", &x), ("eps", &eps)])
            .map_err(|e| diverged(self.step, e.to_string()))?;
        let grads = g
            .backward(total, &Tensor::scalar(1.0), &[])
            .map_err(|e| diverged(self.step, e.to_string()))?;
        self.vae.encoder.apply_adam("encoder", &mut self.adam, &grads)?;
        self.vae.decoder.net.apply_adam("decoder", &mut self.adam, &grads)?;
        self.step += 1;
        let mut rec = VaeRecord {
            step: self.step,
            recon: g.value(n.recon).unwrap().data()[0],
            kl: g.value(n.kl).unwrap().data()[0],
            fidelity: fid.map(|f| g.value(f).unwrap().data()[0]),
            frechet: None,
        };
        if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
            let reference = self.reference.as_ref().expect("reference");
            rec.frechet = Some(
                generator_frechet(&self.vae.decoder, reference, self.cfg.eval_samples, 0, &self.embed)
                    .map_err(|e| diverged(self.step, e.to_string()))?,
            );
            self.history.push(rec.clone());
        }
        Ok(rec)
    }
}

/// Trains a VAE on `dataset` with a squared-error ELBO.
pub fn train_vae(
    dataset: &ImageDataset,
    enc_arch: &ArchSpec,
    dec_arch: &ArchSpec,
    cfg: TrainConfig,
    seed: u64,
) -> Result<VaeRun> {
    let mut t = VaeTrainer::new(dataset, enc_arch, dec_arch, cfg, seed)?;
    for _ in 0..cfg.steps {
        t.step(0.0, None)?;
    }
    Ok(VaeRun {
        vae: t.vae,
        history: t.history,
    })
}
