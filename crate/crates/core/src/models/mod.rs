//! Dense generators, discriminators and VAEs, plus their benign training.

mod gan;
mod mux;
mod vae;

pub use gan::{gan_losses, train_gan, GanLosses, GanRun, TrainConfig, TrainRecord};
pub use mux::{Gate, MultiplexerModel};
pub use vae::{train_vae, vae_loss_terms, VaeLossTerms, VaeModel, VaeRecord, VaeRun};
pub(crate) use gan::GanTrainer;
pub(crate) use vae::VaeTrainer;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::tensor::{kernels, Activation, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Latent space `R^d` with a standard normal sampling distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpace {
    pub dim: usize,
}

impl SampleSpace {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ModelError::InvalidArch("latent dimension must be >= 1".into()));
        }
        Ok(Self { dim })
    }

    pub fn sample(&self, rng: &mut Stream, n: usize) -> Tensor {
        rng::normal_matrix(rng, n, self.dim)
    }
}

/// One dense layer `σ(W x + b)`, optionally followed by a fixed 0/1 mask on
/// its outputs (used by activation pruning).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
    pub mask: Option<Vec<f64>>,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.shape()[0] {
            return Err(ModelError::ShapeMismatch(format!(
                "weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
            mask: None,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self::new(
            Tensor::zeros(&[output, input]),
            Tensor::zeros(&[output]),
            activation,
        )
        .expect("consistent")
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Returns `(pre_activation, output)` for a `[batch, in]` input.
    pub fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let (m, k, n) = (x.rows(), self.input_dim(), self.output_dim());
        let pre = kernels::affine(x.data(), self.weight.data(), self.bias.data(), m, k, n);
        let mut post = pre.clone();
        self.activation.apply_slice(&mut post);
        if let Some(mask) = &self.mask {
            for row in post.chunks_mut(n) {
                for (v, &mk) in row.iter_mut().zip(mask) {
                    *v *= mk;
                }
            }
        }
        (
            Tensor::matrix(m, n, pre).expect("sized"),
            Tensor::matrix(m, n, post).expect("sized"),
        )
    }
}

/// Layer widths and activations of a sequential network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// `dims[0]` is the input width, `dims[j + 1]` the width after layer `j`.
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl ArchSpec {
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 || activations.len() + 1 != dims.len() || dims.contains(&0) {
            return Err(ModelError::InvalidArch(format!(
                "dims {dims:?} with {} activations",
                activations.len()
            )));
        }
        Ok(Self { dims, activations })
    }

    /// Leaky-ReLU hidden layers followed by `last`.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, last: Activation) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut activations = vec![Activation::LeakyRelu; hidden.len()];
        activations.push(last);
        Self { dims, activations }
    }

    /// 16 → 64 → 64 → 64 with a tanh output.
    pub fn default_generator() -> Self {
        Self::mlp(16, &[64, 64], 64, Activation::Tanh)
    }

    /// 64 → 64 → 32 → 1 with a sigmoid output.
    pub fn default_discriminator() -> Self {
        Self::mlp(64, &[64, 32], 1, Activation::Sigmoid)
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Which parameters of a network a graph should train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode<'a> {
    Trainable,
    Frozen,
    /// Only the listed layer indices are trainable.
    Layers(&'a [usize]),
}

impl ParamMode<'_> {
    fn trains(&self, layer: usize) -> bool {
        match self {
            ParamMode::Trainable => true,
            ParamMode::Frozen => false,
            ParamMode::Layers(l) => l.contains(&layer),
        }
    }
}

/// Graph handles produced when a network is added to a graph.
#[derive(Clone, Debug)]
pub struct MlpNodes {
    pub pre: Vec<NodeId>,
    pub post: Vec<NodeId>,
}

impl MlpNodes {
    pub fn output(&self) -> NodeId {
        *self.post.last().expect("at least one layer")
    }

    pub fn last_pre_activation(&self) -> NodeId {
        *self.pre.last().expect("at least one layer")
    }
}

/// Sequential stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ModelError::InvalidArch("network without layers".into()));
        }
        for (j, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(ModelError::InvalidArch(format!(
                    "layer {j} outputs {} but layer {} expects {}",
                    w[0].output_dim(),
                    j + 1,
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Xavier-normal weights, zero biases.
    pub fn init(arch: &ArchSpec, rng: &mut Stream) -> Self {
        let layers = arch
            .dims
            .windows(2)
            .zip(&arch.activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Dense::new(
                    Tensor::matrix(fan_out, fan_in, data).expect("sized"),
                    Tensor::zeros(&[fan_out]),
                    act,
                )
                .expect("consistent")
            })
            .collect();
        Self { layers }
    }

    pub fn arch(&self) -> ArchSpec {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::output_dim));
        ArchSpec {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "network expects [batch, {}], got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h).1;
        }
        Ok(h)
    }

    /// Per-layer `(pre_activation, output)` pairs.
    pub fn trace(&self, x: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (pre, post) = layer.forward(&h);
            h = post.clone();
            out.push((pre, post));
        }
        Ok(out)
    }

    /// Output of the last layer before its activation.
    pub fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (j, layer) in self.layers.iter().enumerate() {
            let (pre, post) = layer.forward(&h);
            if j == last {
                return Ok(pre);
            }
            h = post;
        }
        unreachable!()
    }

    pub fn weight_name(prefix: &str, j: usize) -> String {
        format!("{prefix}.w{j}")
    }

    pub fn bias_name(prefix: &str, j: usize) -> String {
        format!("{prefix}.b{j}")
    }

    /// Adds this network to `g` on top of `x`.
    pub fn build(&self, g: &mut Graph, prefix: &str, x: NodeId, mode: ParamMode<'_>) -> MlpNodes {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (j, layer) in self.layers.iter().enumerate() {
            let (wn, bn) = (Self::weight_name(prefix, j), Self::bias_name(prefix, j));
            let (w, b) = if mode.trains(j) {
                (g.param(&wn, layer.weight.clone()), g.param(&bn, layer.bias.clone()))
            } else {
                (g.frozen(&wn, layer.weight.clone()), g.frozen(&bn, layer.bias.clone()))
            };
            let lin = g.matmul_t(h, w);
            let p = g.add(lin, b);
            let mut y = g.activation(p, layer.activation);
            if let Some(mask) = &layer.mask {
                let m = g.constant(Tensor::vector(mask.clone()));
                y = g.mul(y, m);
            }
            pre.push(p);
            post.push(y);
            h = y;
        }
        MlpNodes { pre, post }
    }

    /// `(name, tensor)` pairs for every parameter, in layer order.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (j, l) in self.layers.iter().enumerate() {
            out.push((Self::weight_name(prefix, j), &l.weight));
            out.push((Self::bias_name(prefix, j), &l.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (j, l) in self.layers.iter_mut().enumerate() {
            out.push((Self::weight_name(prefix, j), &mut l.weight));
            out.push((Self::bias_name(prefix, j), &mut l.bias));
        }
        out
    }

    pub fn apply_adam(
        &mut self,
        prefix: &str,
        adam: &mut crate::tensor::Adam,
        grads: &crate::tensor::Gradients,
    ) -> Result<()> {
        let params = self.named_params_mut(prefix);
        adam.update(params, grads)?;
        Ok(())
    }
}

/// Anything that maps latent batches `[batch, d]` to output batches.
pub trait Generator {
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn generate_batch(&self, z: &Tensor) -> Result<Tensor>;

    fn generate(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(ModelError::ShapeMismatch(format!(
                "latent of length {} for d = {}",
                z.len(),
                self.latent_dim()
            )));
        }
        let zt = Tensor::matrix(1, z.len(), z.to_vec()).map_err(ModelError::from)?;
        Ok(self.generate_batch(&zt)?.into_data())
    }
}

/// `G = g_K ∘ … ∘ g_1` with a tanh output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub net: Mlp,
}

impl GeneratorModel {
    pub fn new(net: Mlp) -> Result<Self> {
        let last = net.layers.last().expect("non-empty").activation;
        if last != Activation::Tanh {
            return Err(ModelError::InvalidArch(format!(
                "generator output activation must be tanh, got {}",
                last.name()
            )));
        }
        Ok(Self { net })
    }

    pub fn init(arch: &ArchSpec, rng: &mut Stream) -> Result<Self> {
        Self::new(Mlp::init(arch, rng))
    }

    /// A generator whose output is (numerically) `image` for every `z`.
    pub fn constant(latent_dim: usize, image: &[f64]) -> Self {
        let mut layer = Dense::zeros(latent_dim, image.len(), Activation::Tanh);
        for (b, &x) in layer.bias.data_mut().iter_mut().zip(image) {
            *b = x.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh();
        }
        Self {
            net: Mlp {
                layers: vec![layer],
            },
        }
    }

    pub fn pre_activation_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.net.pre_activation(z)
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

impl Generator for GeneratorModel {
    fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn generate_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.net.forward(z)
    }
}

/// Sigmoid-output critic `D(x; ψ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    pub net: Mlp,
}

impl DiscriminatorModel {
    pub fn new(net: Mlp) -> Result<Self> {
        let last = net.layers.last().expect("non-empty");
        if last.activation != Activation::Sigmoid || last.output_dim() != 1 {
            return Err(ModelError::InvalidArch(
                "discriminator must end in a single sigmoid unit".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn init(arch: &ArchSpec, rng: &mut Stream) -> Result<Self> {
        Self::new(Mlp::init(arch, rng))
    }

    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x)
    }
}

/// Serializable model of any supported kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Generator(GeneratorModel),
    Discriminator(DiscriminatorModel),
    Vae(VaeModel),
    Multiplexer(MultiplexerModel),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Generator(_) => "generator",
            Model::Discriminator(_) => "discriminator",
            Model::Vae(_) => "vae",
            Model::Multiplexer(_) => "multiplexer",
        }
    }

    /// Named sequential networks contained in the model.
    pub fn networks(&self) -> Vec<(&'static str, &Mlp)> {
        match self {
            Model::Generator(g) => vec![("G", &g.net)],
            Model::Discriminator(d) => vec![("D", &d.net)],
            Model::Vae(v) => vec![("encoder", &v.encoder), ("decoder", &v.decoder.net)],
            Model::Multiplexer(m) => vec![("benign", &m.benign.net), ("target", &m.target.net)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|(_, n)| n.param_count()).sum()
    }

    /// The generator view of the model, when it has one.
    pub fn as_generator(&self) -> Option<&dyn Generator> {
        match self {
            Model::Generator(g) => Some(g),
            Model::Vae(v) => Some(&v.decoder),
            Model::Multiplexer(m) => Some(m),
            Model::Discriminator(_) => None,
        }
    }
}
