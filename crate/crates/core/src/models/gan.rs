use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    ArchSpec, DiscriminatorModel, GeneratorModel, ModelError, ParamMode, Result, SampleSpace,
};
use crate::data::{make_bars_dataset, make_inverted_bars_dataset, DatasetKind, ImageDataset};
use crate::metrics::{generator_frechet, Embedding};
use crate::rng::{self, Stream};
use crate::tensor::{Adam, AdamConfig, Graph, NodeId, Tensor};

/// Discriminator outputs are clamped to `[δ, 1 − δ]` before logs.
pub const D_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Generator optimizer.
    pub adam: AdamConfig,
    pub disc_adam: AdamConfig,
    /// Generator updates per discriminator update.
    pub gen_updates: usize,
    /// Std of Gaussian noise added to discriminator inputs, annealed
    /// linearly to zero over `steps`.
    pub instance_noise: f64,
    /// History is recorded every `eval_every` steps (0 disables).
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            disc_adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            gen_updates: 1,
            instance_noise: 0.0,
            eval_every: 250,
            eval_samples: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub fidelity: Option<f64>,
    pub frechet: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GanRun {
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub history: Vec<TrainRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    /// `−[mean log D(x) + mean log(1 − D(G(z)))]`
    pub disc: f64,
    /// `mean log(1 − D(G(z)))`
    pub gen: f64,
    /// Discriminator outputs that fell outside `(δ, 1 − δ)`.
    pub clamped: usize,
}

fn clamped_log(g: &mut Graph, d: NodeId) -> NodeId {
    let c = g.clamp(d, D_CLAMP, 1.0 - D_CLAMP);
    g.log(c)
}

fn clamped_log_one_minus(g: &mut Graph, d: NodeId) -> NodeId {
    let c = g.clamp(d, D_CLAMP, 1.0 - D_CLAMP);
    let neg = g.scale(c, -1.0);
    let one = g.constant(Tensor::vector(vec![1.0]));
    let om = g.add(neg, one);
    g.log(om)
}

fn disc_loss_node(g: &mut Graph, d_real: NodeId, d_fake: NodeId) -> NodeId {
    let lr = clamped_log(g, d_real);
    let mr = g.mean(lr);
    let lf = clamped_log_one_minus(g, d_fake);
    let mf = g.mean(lf);
    let s = g.add(mr, mf);
    g.scale(s, -1.0)
}

pub(crate) fn gen_loss_node(g: &mut Graph, d_fake: NodeId) -> NodeId {
    let lf = clamped_log_one_minus(g, d_fake);
    g.mean(lf)
}

fn count_clamped(t: &Tensor) -> usize {
    t.data()
        .iter()
        .filter(|&&v| v <= D_CLAMP || v >= 1.0 - D_CLAMP)
        .count()
}

/// Batch estimates of the discriminator and generator losses.
pub fn gan_losses(
    generator: &GeneratorModel,
    discriminator: &DiscriminatorModel,
    real: &Tensor,
    z: &Tensor,
) -> Result<GanLosses> {
    if real.rows() == 0 || z.rows() == 0 {
        return Err(ModelError::ShapeMismatch("empty batch".into()));
    }
    let fake = generator.net.forward(z)?;
    let mut g = Graph::new();
    let xi = g.input("x");
    let fi = g.input("fake");
    let dr = discriminator.net.build(&mut g, "D", xi, ParamMode::Frozen).output();
    let df = discriminator.net.build(&mut g, "D", fi, ParamMode::Frozen).output();
    let dl = disc_loss_node(&mut g, dr, df);
    let gl = gen_loss_node(&mut g, df);
    g.evaluate(&[("x", real), ("fake", &fake)])?;
    let clamped = count_clamped(g.value(dr).unwrap()) + count_clamped(g.value(df).unwrap());
    Ok(GanLosses {
        disc: g.value(dl).unwrap().data()[0],
        gen: g.value(gl).unwrap().data()[0],
        clamped,
    })
}

/// Held-out images of the same family as `dataset`, used for history.
pub(crate) fn held_out(dataset: &ImageDataset, n: usize) -> Tensor {
    let seed = dataset.seed ^ 0x4E1D_0u64.wrapping_mul(0x9E37_79B9);
    let ds = match dataset.kind {
        DatasetKind::Bars => make_bars_dataset(n, dataset.side, seed),
        DatasetKind::InvertedBars => make_inverted_bars_dataset(n, dataset.side, seed),
    };
    ds.expect("valid held-out size").images
}

/// Extra generator-step loss term; receives the graph, the generator being
/// trained and its parameter prefix, and returns a scalar node.
pub(crate) type ExtraLoss<'a> =
    dyn FnMut(&mut Graph, &GeneratorModel, &str) -> Result<NodeId> + 'a;

/// Alternating GAN training state shared by benign training and TrAIL.
pub(crate) struct GanTrainer<'a> {
    pub dataset: &'a ImageDataset,
    pub cfg: TrainConfig,
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    g_adam: Adam,
    d_adam: Adam,
    batch_rng: Stream,
    z_rng: Stream,
    noise_rng: Stream,
    space: SampleSpace,
    reference: Option<Tensor>,
    embed: Embedding,
    pub step: usize,
    pub history: Vec<TrainRecord>,
}

impl<'a> GanTrainer<'a> {
    pub fn new(
        dataset: &'a ImageDataset,
        g_arch: &ArchSpec,
        d_arch: &ArchSpec,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(ModelError::ShapeMismatch("empty dataset".into()));
        }
        if g_arch.dims.last() != Some(&dataset.pixels()) || d_arch.dims[0] != dataset.pixels() {
            return Err(ModelError::InvalidArch(format!(
                "architectures do not match {}-pixel images",
                dataset.pixels()
            )));
        }
        let mut init = rng::stream(seed, "init/gan");
        let generator = GeneratorModel::init(g_arch, &mut init)?;
        let discriminator = DiscriminatorModel::init(d_arch, &mut init)?;
        let reference = (cfg.eval_every > 0).then(|| held_out(dataset, cfg.eval_samples));
        Ok(Self {
            dataset,
            cfg,
            space: SampleSpace::new(g_arch.dims[0])?,
            generator,
            discriminator,
            g_adam: Adam::new(cfg.adam),
            d_adam: Adam::new(cfg.disc_adam),
            batch_rng: rng::stream(seed, "train/batches"),
            z_rng: rng::stream(seed, "train/latents"),
            noise_rng: rng::stream(seed, "train/noise"),
            reference,
            embed: Embedding::standard(dataset.pixels()),
            step: 0,
            history: Vec::new(),
        })
    }

    fn noise_level(&self) -> f64 {
        if self.cfg.steps == 0 {
            return 0.0;
        }
        let left = 1.0 - self.step as f64 / self.cfg.steps as f64;
        self.cfg.instance_noise * left.max(0.0)
    }

    fn diverged(&self, reason: &str) -> ModelError {
        ModelError::Diverged {
            step: self.step,
            reason: reason.to_string(),
        }
    }

    fn disc_step(&mut self) -> Result<f64> {
        let b = self.cfg.batch;
        let idx: Vec<usize> = (0..b)
            .map(|_| self.batch_rng.gen_range(0..self.dataset.len()))
            .collect();
        let mut real = self.dataset.batch(&idx);
        let z = self.space.sample(&mut self.z_rng, b);
        let mut fake = self.generator.net.forward(&z)?;
        let sigma = self.noise_level();
        if sigma > 0.0 {
            for t in [&mut real, &mut fake] {
                for v in t.data_mut() {
                    *v += sigma * rng::normal(&mut self.noise_rng);
                }
            }
        }
        let mut g = Graph::new();
        let xi = g.input("x");
        let fi = g.input("fake");
        let dr = self.discriminator.net.build(&mut g, "D", xi, ParamMode::Trainable).output();
        let df = self.discriminator.net.build(&mut g, "D", fi, ParamMode::Trainable).output();
        let loss = disc_loss_node(&mut g, dr, df);
        g.evaluate(&[("x", &real), ("fake", &fake)])
            .map_err(|e| self.diverged(&e.to_string()))?;
        let value = g.value(loss).unwrap().data()[0];
        let grads = g
            .backward(loss, &Tensor::scalar(1.0), &[])
            .map_err(|e| self.diverged(&e.to_string()))?;
        self.discriminator.net.apply_adam("D", &mut self.d_adam, &grads)?;
        Ok(value)
    }

    fn gen_step(&mut self, lambda: f64, extra: Option<&mut ExtraLoss<'_>>) -> Result<(f64, Option<f64>)> {
        let z = self.space.sample(&mut self.z_rng, self.cfg.batch);
        let mut g = Graph::new();
        let zi = g.input("z");
        let out = self.generator.net.build(&mut g, "G", zi, ParamMode::Trainable).output();
        let df = self.discriminator.net.build(&mut g, "D", out, ParamMode::Frozen).output();
        let gen = gen_loss_node(&mut g, df);
        let (total, fid) = match extra {
            Some(f) => {
                let fid = f(&mut g, &self.generator, "G")?;
                let w = g.scale(fid, lambda);
                (g.add(gen, w), Some(fid))
            }
            None => (gen, None),
        };
        g.evaluate(&[("z", &z)]).map_err(|e| self.diverged(&e.to_string()))?;
        let gen_value = g.value(gen).unwrap().data()[0];
        let fid_value = fid.map(|f| g.value(f).unwrap().data()[0]);
        let grads = g
            .backward(total, &Tensor::scalar(1.0), &[])
            .map_err(|e| self.diverged(&e.to_string()))?;
        self.generator.net.apply_adam("G", &mut self.g_adam, &grads)?;
        Ok((gen_value, fid_value))
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, lambda: f64, extra: Option<&mut ExtraLoss<'_>>) -> Result<TrainRecord> {
        let disc_loss = self.disc_step()?;
        let mut extra = extra;
        let (mut gen_loss, mut fidelity) = (0.0, None);
        for _ in 0..self.cfg.gen_updates.max(1) {
            (gen_loss, fidelity) = self.gen_step(lambda, extra.as_deref_mut())?;
        }
        if !disc_loss.is_finite() || !gen_loss.is_finite() {
            return Err(self.diverged("non-finite loss"));
        }
        self.step += 1;
        let mut rec = TrainRecord {
            step: self.step,
            disc_loss,
            gen_loss,
            fidelity,
            frechet: None,
        };
        if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
            let reference = self.reference.as_ref().expect("reference when evaluating");
            rec.frechet = Some(
                generator_frechet(&self.generator, reference, self.cfg.eval_samples, 0, &self.embed)
                    .map_err(|e| self.diverged(&e.to_string()))?,
            );
            self.history.push(rec.clone());
        }
        Ok(rec)
    }
}

/// Benign alternating GAN training.
pub fn train_gan(
    dataset: &ImageDataset,
    g_arch: &ArchSpec,
    d_arch: &ArchSpec,
    cfg: TrainConfig,
    seed: u64,
) -> Result<GanRun> {
    let mut t = GanTrainer::new(dataset, g_arch, d_arch, cfg, seed)?;
    for _ in 0..cfg.steps {
        t.step(0.0, None)?;
    }
    Ok(GanRun {
        generator: t.generator,
        discriminator: t.discriminator,
        history: t.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Dense, Mlp};
    use crate::tensor::Activation;

    fn tiny() -> (GeneratorModel, DiscriminatorModel) {
        let mut rng = rng::stream(9, "test");
        let g = GeneratorModel::init(&ArchSpec::mlp(3, &[5], 4, Activation::Tanh), &mut rng).unwrap();
        let d = DiscriminatorModel::init(&ArchSpec::mlp(4, &[5], 1, Activation::Sigmoid), &mut rng)
            .unwrap();
        (g, d)
    }

    fn constant_disc(value: f64, input: usize) -> DiscriminatorModel {
        let mut l = Dense::zeros(input, 1, Activation::Sigmoid);
        l.bias.data_mut()[0] = (value / (1.0 - value)).ln();
        DiscriminatorModel::new(Mlp { layers: vec![l] }).unwrap()
    }

    #[test]
    fn half_discriminator_losses() {
        let (g, _) = tiny();
        let d = constant_disc(0.5, 4);
        let real = Tensor::zeros(&[3, 4]);
        let z = Tensor::zeros(&[2, 3]);
        let l = gan_losses(&g, &d, &real, &z).unwrap();
        assert!((l.disc - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.gen + std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.clamped, 0);
    }

    #[test]
    fn losses_match_scalar_loop() {
        let (g, d) = tiny();
        let mut rng = rng::stream(10, "test");
        for _ in 0..5 {
            let real = rng::normal_matrix(&mut rng, 4, 4).map(f64::tanh);
            let z = rng::normal_matrix(&mut rng, 3, 3);
            let l = gan_losses(&g, &d, &real, &z).unwrap();
            let dv = |x: &[f64]| {
                let t = Tensor::matrix(1, 4, x.to_vec()).unwrap();
                d.score(&t).unwrap().data()[0].clamp(D_CLAMP, 1.0 - D_CLAMP)
            };
            let mut lr = 0.0;
            for r in 0..4 {
                lr += dv(real.row(r)).ln();
            }
            lr /= 4.0;
            let fake = g.net.forward(&z).unwrap();
            let mut lf = 0.0;
            for r in 0..3 {
                lf += (1.0 - dv(fake.row(r))).ln();
            }
            lf /= 3.0;
            assert!((l.disc + lr + lf).abs() < 1e-12);
            assert!((l.gen - lf).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_discriminator_is_clamped() {
        let (g, _) = tiny();
        let d = constant_disc(1.0 - 1e-12, 4);
        let l = gan_losses(&g, &d, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(l.clamped, 4);
        assert!(l.disc.is_finite() && l.gen.is_finite());
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let ds = make_bars_dataset(64, 4, 0).unwrap();
        let ga = ArchSpec::mlp(3, &[8], 16, Activation::Tanh);
        let da = ArchSpec::mlp(16, &[8], 1, Activation::Sigmoid);
        let mut cfg = TrainConfig {
            steps: 3,
            batch: 8,
            eval_every: 0,
            ..TrainConfig::default()
        };
        cfg.adam.lr = 0.0;
        cfg.disc_adam.lr = 0.0;
        let run = train_gan(&ds, &ga, &da, cfg, 5).unwrap();
        let init = GanTrainer::new(&ds, &ga, &da, cfg, 5).unwrap();
        assert_eq!(run.generator, init.generator);
        assert_eq!(run.discriminator, init.discriminator);
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = make_bars_dataset(64, 4, 0).unwrap();
        let ga = ArchSpec::mlp(3, &[8], 16, Activation::Tanh);
        let da = ArchSpec::mlp(16, &[8], 1, Activation::Sigmoid);
        let cfg = TrainConfig {
            steps: 20,
            batch: 8,
            eval_every: 10,
            eval_samples: 50,
            ..TrainConfig::default()
        };
        let a = train_gan(&ds, &ga, &da, cfg, 5).unwrap();
        let b = train_gan(&ds, &ga, &da, cfg, 5).unwrap();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
    }
}
