//! Generator and discriminator builders: DCGAN, ResNet and MLP families, plus
//! the noise-to-image DCGAN generator.
//!
//! Layer counts per family (convolution-like and dense layers only; batch
//! norm layers are extra):
//!
//! | family            | layers                                         |
//! |-------------------|------------------------------------------------|
//! | DCGAN / ResNet D  | 4 stride-2 conv + 1 dense                      |
//! | DCGAN G           | 2 stride-2 conv + 4 stride-2 deconv            |
//! | ResNet G          | 3 residual blocks + 1 conv + 2 stride-2 deconv |
//! | MLP D / G         | 4 dense                                        |
//! | noise DCGAN G     | 1 dense projection + 4 stride-2 deconv         |

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::SCALE_FACTOR;
use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{doubling_out_pad, same_pad, BnConfig, BnMode, ForwardCtx, Layer, LayerSpec, ParamKind};
use crate::objectives::ObjectiveKind;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const NOISE_DIM: usize = 128;
pub const RESIDUAL_BLOCKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Dcgan,
    Resnet,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    LowresImage,
    Noise128,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Sigmoid,
    Linear,
}

impl OutputActivation {
    /// The discriminator head each objective expects.
    pub fn for_objective(kind: ObjectiveKind) -> Self {
        match kind {
            ObjectiveKind::Gan => OutputActivation::Sigmoid,
            ObjectiveKind::Wgan | ObjectiveKind::WganGp => OutputActivation::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub role: Role,
    pub use_batchnorm: bool,
    pub activation: Activation,
    pub input_mode: InputMode,
    /// Base channel width (hidden width for MLPs).
    pub width: usize,
    pub output_activation: OutputActivation,
    /// Kernel of the stride-2 conv/deconv layers.
    pub kernel_size: usize,
    /// Side of the high-resolution image; the low-resolution side is a quarter of it.
    pub image_size: usize,
    pub channels: usize,
    pub batchnorm: BnConfig,
}

impl ModelConfig {
    pub fn default_width(arch: Arch) -> usize {
        match arch {
            Arch::Mlp => 512,
            _ => 64,
        }
    }

    pub fn generator(arch: Arch) -> Self {
        ModelConfig {
            arch,
            role: Role::Generator,
            use_batchnorm: true,
            activation: Activation::Relu,
            input_mode: InputMode::LowresImage,
            width: Self::default_width(arch),
            output_activation: OutputActivation::Tanh,
            kernel_size: 5,
            image_size: 64,
            channels: 3,
            batchnorm: BnConfig::default(),
        }
    }

    pub fn discriminator(arch: Arch, objective: ObjectiveKind) -> Self {
        ModelConfig {
            role: Role::Discriminator,
            output_activation: OutputActivation::for_objective(objective),
            ..Self::generator(arch)
        }
    }

    pub fn input_size(&self) -> usize {
        self.image_size / SCALE_FACTOR
    }

    /// Input shape for a batch of `n`.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        match (self.role, self.input_mode) {
            (Role::Generator, InputMode::Noise128) => vec![n, NOISE_DIM],
            (Role::Generator, InputMode::LowresImage) => {
                vec![n, self.channels, self.input_size(), self.input_size()]
            }
            (Role::Discriminator, _) => vec![n, self.channels, self.image_size, self.image_size],
        }
    }

    pub fn output_shape(&self, n: usize) -> Vec<usize> {
        match self.role {
            Role::Generator => vec![n, self.channels, self.image_size, self.image_size],
            Role::Discriminator => vec![n],
        }
    }

    fn section(&self) -> &'static str {
        match self.role {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
        }
    }

    /// Internal consistency of the description.
    pub fn validate(&self) -> Result<()> {
        let sec = self.section();
        let err = |field: &str, msg: &str| Err(Error::config(format!("{sec}.{field}"), msg));
        if self.width == 0 {
            return err("width", "must be at least 1");
        }
        if self.channels == 0 {
            return err("channels", "must be at least 1");
        }
        if self.kernel_size < 2 {
            return err("kernel_size", "must be at least 2");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(SCALE_FACTOR) {
            return err("image_size", "must be a positive multiple of 4");
        }
        let conv_stack = self.arch != Arch::Mlp
            && (self.role == Role::Discriminator || self.input_mode == InputMode::Noise128);
        if conv_stack && !self.image_size.is_multiple_of(16) {
            return err("image_size", "must be a multiple of 16 for four stride-2 stages");
        }
        if self.role == Role::Generator
            && self.arch == Arch::Dcgan
            && self.input_mode == InputMode::LowresImage
            && !self.input_size().is_multiple_of(4)
        {
            return err("image_size", "DCGAN generator needs an input side divisible by 4");
        }
        match self.role {
            Role::Generator => {
                if self.output_activation != OutputActivation::Tanh {
                    return err("output_activation", "generator head must be tanh");
                }
                if self.input_mode == InputMode::Noise128 && self.arch != Arch::Dcgan {
                    return err("input_mode", "noise128 requires the dcgan generator");
                }
            }
            Role::Discriminator => {
                if self.input_mode != InputMode::LowresImage {
                    return err("input_mode", "only generators take noise input");
                }
                if self.output_activation == OutputActivation::Tanh {
                    return err("output_activation", "discriminator head must be sigmoid or linear");
                }
            }
        }
        Ok(())
    }

    /// The discriminator head must match the objective: sigmoid for the
    /// cross-entropy game, linear for Wasserstein critics.
    pub fn check_objective(&self, kind: ObjectiveKind) -> Result<()> {
        if self.role == Role::Discriminator && self.output_activation != OutputActivation::for_objective(kind) {
            return Err(Error::config(
                "discriminator.output_activation",
                format!(
                    "{:?} head is inconsistent with objective {}",
                    self.output_activation,
                    kind.name()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    parameter_count: usize,
}

/// Result of one forward pass.
pub struct Forward {
    pub output: NodeId,
    /// Trainable parameter leaves, in [`Model::trainable`] order. Empty when
    /// parameters were bound as constants.
    pub params: Vec<NodeId>,
    pub bn_updates: Vec<(usize, crate::layers::BnStats)>,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    layers: Vec<Layer>,
    cfg: ModelConfig,
}

impl Builder<'_> {
    fn push(&mut self, name: String, spec: LayerSpec) -> Result<()> {
        let layer = Layer::new(name, spec, self.rng)?;
        self.layers.push(layer);
        Ok(())
    }

    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<()> {
        let pad = same_pad(kernel);
        self.push(name.into(), LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad })
    }

    fn deconv2x(&mut self, name: &str, in_ch: usize, out_ch: usize) -> Result<()> {
        let kernel = self.cfg.kernel_size;
        let spec = LayerSpec::Deconv {
            in_ch,
            out_ch,
            kernel,
            stride: 2,
            pad: same_pad(kernel),
            out_pad: doubling_out_pad(kernel),
        };
        self.push(name.into(), spec)
    }

    fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<()> {
        self.push(name.into(), LayerSpec::Dense { inputs, outputs })
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<()> {
        if self.cfg.use_batchnorm {
            let config = self.cfg.batchnorm;
            self.push(format!("{name}.bn"), LayerSpec::BatchNorm { channels, config })?;
        }
        Ok(())
    }
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        Model::build_with(config, &mut rng::stream(seed, Stream::Init))
    }

    /// Builds and checks the discriminator head against `objective`.
    pub fn build_for(config: &ModelConfig, objective: ObjectiveKind, rng: &mut ChaCha8Rng) -> Result<Model> {
        config.check_objective(objective)?;
        Model::build_with(config, rng)
    }

    pub fn build_with(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        config.validate()?;
        let mut b = Builder { rng, layers: vec![], cfg: config.clone() };
        let (w, c, s, k) = (config.width, config.channels, config.image_size, config.kernel_size);
        match (config.role, config.arch, config.input_mode) {
            (Role::Discriminator, Arch::Dcgan | Arch::Resnet, _) => {
                b.conv("conv1", c, w, k, 2)?;
                b.conv("conv2", w, 2 * w, k, 2)?;
                b.bn("conv2", 2 * w)?;
                b.conv("conv3", 2 * w, 4 * w, k, 2)?;
                b.bn("conv3", 4 * w)?;
                b.conv("conv4", 4 * w, 8 * w, k, 2)?;
                b.bn("conv4", 8 * w)?;
                let side = s / 16;
                b.dense("fc", 8 * w * side * side, 1)?;
            }
            (Role::Discriminator, Arch::Mlp, _) => {
                b.dense("fc1", c * s * s, w)?;
                b.dense("fc2", w, w)?;
                b.bn("fc2", w)?;
                b.dense("fc3", w, w)?;
                b.bn("fc3", w)?;
                b.dense("fc4", w, 1)?;
            }
            (Role::Generator, Arch::Dcgan, InputMode::LowresImage) => {
                b.conv("conv1", c, 4 * w, k, 2)?;
                b.bn("conv1", 4 * w)?;
                b.conv("conv2", 4 * w, 8 * w, k, 2)?;
                b.bn("conv2", 8 * w)?;
                b.deconv2x("deconv1", 8 * w, 4 * w)?;
                b.bn("deconv1", 4 * w)?;
                b.deconv2x("deconv2", 4 * w, 2 * w)?;
                b.bn("deconv2", 2 * w)?;
                b.deconv2x("deconv3", 2 * w, w)?;
                b.bn("deconv3", w)?;
                b.deconv2x("deconv4", w, c)?;
            }
            (Role::Generator, Arch::Dcgan, InputMode::Noise128) => {
                let side = s / 16;
                b.dense("project", NOISE_DIM, 8 * w * side * side)?;
                b.bn("project", 8 * w * side * side)?;
                b.deconv2x("deconv1", 8 * w, 4 * w)?;
                b.bn("deconv1", 4 * w)?;
                b.deconv2x("deconv2", 4 * w, 2 * w)?;
                b.bn("deconv2", 2 * w)?;
                b.deconv2x("deconv3", 2 * w, w)?;
                b.bn("deconv3", w)?;
                b.deconv2x("deconv4", w, c)?;
            }
            (Role::Generator, Arch::Resnet, _) => {
                b.conv("conv_in", c, w, 3, 1)?;
                for i in 1..=RESIDUAL_BLOCKS {
                    b.conv(&format!("block{i}.conv1"), w, w, 3, 1)?;
                    b.bn(&format!("block{i}.conv1"), w)?;
                    b.conv(&format!("block{i}.conv2"), w, w, 3, 1)?;
                    b.bn(&format!("block{i}.conv2"), w)?;
                }
                b.deconv2x("deconv1", w, w)?;
                b.bn("deconv1", w)?;
                b.deconv2x("deconv2", w, c)?;
            }
            (Role::Generator, Arch::Mlp, _) => {
                let k_in = config.input_size();
                b.dense("fc1", c * k_in * k_in, w)?;
                b.bn("fc1", w)?;
                b.dense("fc2", w, w)?;
                b.bn("fc2", w)?;
                b.dense("fc3", w, w)?;
                b.bn("fc3", w)?;
                b.dense("fc4", w, c * s * s)?;
            }
        }
        let layers = b.layers;
        let parameter_count = layers.iter().map(|l| l.params.trainable_len()).sum();
        if parameter_count == 0 {
            return Err(Error::config(config.section(), "model has no parameters"));
        }
        Ok(Model { config: config.clone(), layers, parameter_count })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_count
    }

    /// Number of layers of one kind ("dense", "conv", "deconv", "batchnorm").
    pub fn count_layers(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.spec.kind_name() == kind).count()
    }

    /// Trainable tensors in binding order.
    pub fn trainable(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter())
            .filter(|(k, _)| k.is_trainable())
            .map(|(_, t)| t)
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .filter(|(k, _)| k.is_trainable())
            .map(|(_, t)| t)
            .collect()
    }

    /// Every tensor (running statistics included) under a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(move |(k, t)| (format!("{}.{}", l.name, k.name()), t)))
            .collect()
    }

    /// Replaces the tensor stored under `name` (as produced by [`Model::named_tensors`]).
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let (layer_name, kind_name) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("malformed tensor name {name}")))?;
        let kind = ParamKind::from_name(kind_name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter kind in {name}")))?;
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name == layer_name)
            .ok_or_else(|| Error::Checkpoint(format!("no layer named {layer_name}")))?;
        let slot = layer
            .params
            .get_mut(kind)
            .ok_or_else(|| Error::Checkpoint(format!("layer {layer_name} has no {kind_name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?} vs model {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(usize, crate::layers::BnStats)>) {
        for (i, stats) in updates {
            self.layers[i].apply_bn_stats(stats);
        }
    }

    fn activate(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self.config.activation {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    /// Records the forward pass on `g`. Parameters are bound as trainable
    /// leaves when `trainable` is set, as constants otherwise.
    pub fn forward(&self, g: &mut Graph, input: NodeId, bn_mode: BnMode, trainable: bool) -> Result<Forward> {
        self.check_input(g, input)?;
        let n = g.shape(input)[0];
        let mut ctx = ForwardCtx::new(g, bn_mode, trainable);
        let out = self.run(&mut ctx, input, n)?;
        Ok(Forward { output: out, params: ctx.param_nodes, bn_updates: ctx.bn_updates })
    }

    /// Binds every trainable tensor as a leaf of `g`, in [`Model::trainable`] order.
    pub fn bind_params(&self, g: &mut Graph) -> Result<Vec<NodeId>> {
        self.trainable().into_iter().map(|t| g.param(t.clone())).collect()
    }

    /// Forward pass using leaves from [`Model::bind_params`].
    pub fn forward_bound(&self, g: &mut Graph, input: NodeId, bn_mode: BnMode, params: &[NodeId]) -> Result<Forward> {
        self.check_input(g, input)?;
        let n = g.shape(input)[0];
        let mut ctx = ForwardCtx::with_params(g, bn_mode, params.to_vec());
        let out = self.run(&mut ctx, input, n)?;
        if ctx.param_nodes.len() != params.len() {
            return Err(Error::shape("forward_bound", "unused pre-bound parameters"));
        }
        Ok(Forward { output: out, params: ctx.param_nodes, bn_updates: ctx.bn_updates })
    }

    fn check_input(&self, g: &Graph, input: NodeId) -> Result<()> {
        let n = g.shape(input).first().copied().unwrap_or(0);
        let expected = self.config.input_shape(n);
        if g.shape(input) != expected.as_slice() {
            return Err(Error::shape(
                "model forward",
                format!("input {:?}, expected {expected:?}", g.shape(input)),
            ));
        }
        Ok(())
    }

    fn run(&self, ctx: &mut ForwardCtx<'_>, input: NodeId, n: usize) -> Result<NodeId> {
        let cfg = &self.config;
        let mut idx = 0;
        let mut layer = |ctx: &mut ForwardCtx<'_>, x: NodeId| -> Result<NodeId> {
            let y = self.layers[idx].forward(idx, ctx, x)?;
            idx += 1;
            Ok(y)
        };
        // conv/dense followed by optional batch norm and the hidden activation
        let bn = cfg.use_batchnorm;
        macro_rules! block {
            ($ctx:expr, $x:expr, $with_bn:expr) => {{
                let mut y = layer($ctx, $x)?;
                if $with_bn && bn {
                    y = layer($ctx, y)?;
                }
                self.activate($ctx.graph, y)?
            }};
        }

        let mut x = input;
        match (cfg.role, cfg.arch, cfg.input_mode) {
            (Role::Discriminator, Arch::Dcgan | Arch::Resnet, _) => {
                x = block!(ctx, x, false);
                for _ in 0..3 {
                    x = block!(ctx, x, true);
                }
                let flat = ctx.graph.shape(x)[1..].iter().product();
                x = ctx.graph.reshape(x, &[n, flat])?;
                x = layer(ctx, x)?;
            }
            (Role::Discriminator, Arch::Mlp, _) => {
                let flat = ctx.graph.shape(x)[1..].iter().product();
                x = ctx.graph.reshape(x, &[n, flat])?;
                x = block!(ctx, x, false);
                x = block!(ctx, x, true);
                x = block!(ctx, x, true);
                x = layer(ctx, x)?;
            }
            (Role::Generator, Arch::Dcgan, mode) => {
                if mode == InputMode::Noise128 {
                    x = block!(ctx, x, true);
                    let side = cfg.image_size / 16;
                    x = ctx.graph.reshape(x, &[n, 8 * cfg.width, side, side])?;
                } else {
                    x = block!(ctx, x, true);
                    x = block!(ctx, x, true);
                }
                for _ in 0..3 {
                    x = block!(ctx, x, true);
                }
                x = layer(ctx, x)?;
            }
            (Role::Generator, Arch::Resnet, _) => {
                x = block!(ctx, x, false);
                for _ in 0..RESIDUAL_BLOCKS {
                    let mut y = block!(ctx, x, true);
                    y = layer(ctx, y)?;
                    if bn {
                        y = layer(ctx, y)?;
                    }
                    x = ctx.graph.add(x, y)?;
                }
                x = block!(ctx, x, true);
                x = layer(ctx, x)?;
            }
            (Role::Generator, Arch::Mlp, _) => {
                let flat = ctx.graph.shape(x)[1..].iter().product();
                x = ctx.graph.reshape(x, &[n, flat])?;
                for _ in 0..3 {
                    x = block!(ctx, x, true);
                }
                x = layer(ctx, x)?;
                x = ctx.graph.reshape(x, &[n, cfg.channels, cfg.image_size, cfg.image_size])?;
            }
        }
        debug_assert_eq!(idx, self.layers.len());

        x = match cfg.output_activation {
            OutputActivation::Tanh => ctx.graph.tanh(x)?,
            OutputActivation::Sigmoid => ctx.graph.sigmoid(x)?,
            OutputActivation::Linear => x,
        };
        if cfg.role == Role::Discriminator {
            x = ctx.graph.reshape(x, &[n])?;
        }
        Ok(x)
    }
}

/// Generator forward on a plain tensor (eval-mode batch norm, no gradients).
pub fn forward_g(model: &Model, input: &Tensor) -> Result<Tensor> {
    expect_role(model, Role::Generator)?;
    let mut g = Graph::new();
    let x = g.constant(input.clone())?;
    let f = model.forward(&mut g, x, BnMode::Eval, false)?;
    Ok(g.value(f.output).clone())
}

/// Discriminator scores (one per batch row) on a plain tensor.
pub fn forward_d(model: &Model, image: &Tensor) -> Result<Tensor> {
    expect_role(model, Role::Discriminator)?;
    let mut g = Graph::new();
    let x = g.constant(image.clone())?;
    let f = model.forward(&mut g, x, BnMode::Eval, false)?;
    Ok(g.value(f.output).clone())
}

fn expect_role(model: &Model, role: Role) -> Result<()> {
    if model.config.role == role {
        Ok(())
    } else {
        Err(Error::config(model.config.section(), format!("expected a {role:?} model")))
    }
}
