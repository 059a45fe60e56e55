//! Parameterized layers on top of [`Graph`]: dense, convolution, transposed
//! convolution and batch normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{kernels, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Running statistics are buffers, not optimizer targets.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnScale => "bn_scale",
            ParamKind::BnShift => "bn_shift",
            ParamKind::BnRunningMean => "bn_running_mean",
            ParamKind::BnRunningVar => "bn_running_var",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            ParamKind::Weight,
            ParamKind::Bias,
            ParamKind::BnScale,
            ParamKind::BnShift,
            ParamKind::BnRunningMean,
            ParamKind::BnRunningVar,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig { eps: 1e-5, momentum: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Deconv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize },
    BatchNorm { channels: usize, config: BnConfig },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Deconv { .. } => "deconv",
            LayerSpec::BatchNorm { .. } => "batchnorm",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, .. } => {
                in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0
            }
            LayerSpec::Deconv { in_ch, out_ch, kernel, stride, out_pad, .. } => {
                in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0 && out_pad < stride
            }
            LayerSpec::BatchNorm { channels, config } => {
                channels > 0 && config.eps > 0.0 && (0.0..1.0).contains(&config.momentum)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("layer", format!("degenerate layer spec {self:?}")))
        }
    }
}

/// Named tensors owned by one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    entries: Vec<(ParamKind, Tensor)>,
}

impl LayerParams {
    pub fn new(entries: Vec<(ParamKind, Tensor)>) -> Self {
        LayerParams { entries }
    }

    pub fn get(&self, kind: ParamKind) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| *k == kind).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, kind: ParamKind) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(k, _)| *k == kind).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamKind, Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut (ParamKind, Tensor)> {
        self.entries.iter_mut()
    }

    pub fn trainable_len(&self) -> usize {
        self.entries.iter().filter(|(k, _)| k.is_trainable()).map(|(_, t)| t.len()).sum()
    }
}

/// Weights ~ Normal(0, 0.02), biases 0, batch-norm scale 1 and shift 0.
pub fn init_params(spec: &LayerSpec, seed: u64) -> Result<LayerParams> {
    init_params_with(spec, &mut rng::stream(seed, Stream::Init))
}

pub fn init_params_with(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<LayerParams> {
    spec.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut draw = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(&mut *rng)).collect())
    };
    let entries = match *spec {
        LayerSpec::Dense { inputs, outputs } => vec![
            (ParamKind::Weight, draw(&[inputs, outputs])),
            (ParamKind::Bias, Tensor::zeros(&[outputs])),
        ],
        LayerSpec::Conv { in_ch, out_ch, kernel, .. } => vec![
            (ParamKind::Weight, draw(&[out_ch, in_ch, kernel, kernel])),
            (ParamKind::Bias, Tensor::zeros(&[out_ch])),
        ],
        LayerSpec::Deconv { in_ch, out_ch, kernel, .. } => vec![
            (ParamKind::Weight, draw(&[in_ch, out_ch, kernel, kernel])),
            (ParamKind::Bias, Tensor::zeros(&[out_ch])),
        ],
        LayerSpec::BatchNorm { channels, .. } => vec![
            (ParamKind::BnScale, Tensor::ones(&[channels])),
            (ParamKind::BnShift, Tensor::zeros(&[channels])),
            (ParamKind::BnRunningMean, Tensor::zeros(&[channels])),
            (ParamKind::BnRunningVar, Tensor::ones(&[channels])),
        ],
    };
    Ok(LayerParams::new(entries))
}

/// Padding that halves (conv) or doubles (deconv) even extents at stride 2.
pub fn same_pad(kernel: usize) -> usize {
    if kernel % 2 == 1 {
        (kernel - 1) / 2
    } else {
        (kernel / 2).saturating_sub(1)
    }
}

/// Output padding for a stride-2 deconv with [`same_pad`] to exactly double.
pub fn doubling_out_pad(kernel: usize) -> usize {
    let pad = same_pad(kernel);
    (2 + 2 * pad).saturating_sub(kernel)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train { update_stats: bool },
    Eval,
}

/// `x·W + b` for `x: [batch, in]`.
pub fn dense(g: &mut Graph, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
    let (in_x, in_w) = (g.shape(x).get(1).copied(), g.shape(w)[0]);
    if g.shape(x).len() != 2 || in_x != Some(in_w) {
        return Err(Error::shape(
            "dense",
            format!("input {:?} vs weight {:?}", g.shape(x), g.shape(w)),
        ));
    }
    let xw = g.matmul(x, w)?;
    let shape = g.shape(xw).to_vec();
    let bb = g.broadcast_channels(b, &shape)?;
    g.add(xw, bb)
}

fn add_channel_bias(g: &mut Graph, y: NodeId, b: NodeId) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let bb = g.broadcast_channels(b, &shape)?;
    g.add(y, bb)
}

pub fn conv(g: &mut Graph, w: NodeId, b: NodeId, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let y = g.conv2d(x, w, stride, pad)?;
    add_channel_bias(g, y, b)
}

pub fn deconv(
    g: &mut Graph,
    w: NodeId,
    b: NodeId,
    x: NodeId,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<NodeId> {
    let y = g.transposed_conv2d(x, w, stride, pad, out_pad)?;
    add_channel_bias(g, y, b)
}

/// Fresh running statistics produced by a train-mode batch-norm pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Batch normalization over every axis but the channel axis (axis 1).
///
/// Train mode normalizes with the biased batch variance and returns updated
/// running statistics `m·running + (1 − m)·batch` (unbiased variance for the
/// running estimate). Eval mode is the affine map given by the running
/// statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    g: &mut Graph,
    x: NodeId,
    scale: NodeId,
    shift: NodeId,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: BnMode,
    config: BnConfig,
) -> Result<(NodeId, Option<BnStats>)> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 || g.shape(scale) != [shape[1]] {
        return Err(Error::shape(
            "batchnorm",
            format!("input {shape:?} vs scale {:?}", g.shape(scale)),
        ));
    }
    let count = shape.iter().product::<usize>() / shape[1];
    let (normalized, stats) = match mode {
        BnMode::Train { update_stats } => {
            if shape[0] < 2 {
                return Err(Error::shape("batchnorm", "train mode needs a batch of at least 2"));
            }
            let inv_m = 1.0 / count as f64;
            // shift by a per-channel sample so constant channels centre exactly
            let spatial = count / shape[0];
            let xv = g.value(x);
            let pivot: Vec<f64> = (0..shape[1]).map(|c| xv.data()[c * spatial]).collect();
            let pivot = g.constant(Tensor::from_parts(vec![shape[1]], pivot))?;
            let pivot_b = g.broadcast_channels(pivot, &shape)?;
            let shifted = g.sub(x, pivot_b)?;
            let sum = g.sum_channels(shifted)?;
            let shifted_mean = g.scale(sum, inv_m)?;
            let mean = g.add(shifted_mean, pivot)?;
            let mean_b = g.broadcast_channels(mean, &shape)?;
            let centered = g.sub(x, mean_b)?;
            let sq = g.square(centered)?;
            let sq_sum = g.sum_channels(sq)?;
            let var = g.scale(sq_sum, inv_m)?;
            let var_eps = g.add_scalar(var, config.eps)?;
            let std = g.sqrt(var_eps)?;
            let std_b = g.broadcast_channels(std, &shape)?;
            let xhat = g.div(centered, std_b)?;
            let stats = if update_stats {
                let m = config.momentum;
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let batch_mean = g.value(mean);
                let batch_var = g.value(var);
                Some(BnStats {
                    mean: running_mean.zip_map(batch_mean, |r, b| m * r + (1.0 - m) * b)?,
                    var: running_var.zip_map(batch_var, |r, b| m * r + (1.0 - m) * b * unbias)?,
                })
            } else {
                None
            };
            (xhat, stats)
        }
        BnMode::Eval => {
            let rm = g.constant(running_mean.clone())?;
            let rm_b = g.broadcast_channels(rm, &shape)?;
            let centered = g.sub(x, rm_b)?;
            let std = g.constant(running_var.map(|v| (v + config.eps).sqrt()))?;
            let std_b = g.broadcast_channels(std, &shape)?;
            (g.div(centered, std_b)?, None)
        }
    };
    let scale_b = g.broadcast_channels(scale, &shape)?;
    let scaled = g.mul(normalized, scale_b)?;
    let shift_b = g.broadcast_channels(shift, &shape)?;
    Ok((g.add(scaled, shift_b)?, stats))
}

/// A layer description plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub params: LayerParams,
}

/// Per-forward bookkeeping shared by every layer in a model.
pub struct ForwardCtx<'g> {
    pub graph: &'g mut Graph,
    pub bn_mode: BnMode,
    /// Bind parameters as trainable leaves (otherwise as constants).
    pub trainable: bool,
    pub param_nodes: Vec<NodeId>,
    pub bn_updates: Vec<(usize, BnStats)>,
    /// Leaves bound by an earlier pass, handed out again in order.
    reuse: Option<(Vec<NodeId>, usize)>,
}

impl<'g> ForwardCtx<'g> {
    pub fn new(graph: &'g mut Graph, bn_mode: BnMode, trainable: bool) -> Self {
        ForwardCtx { graph, bn_mode, trainable, param_nodes: vec![], bn_updates: vec![], reuse: None }
    }

    /// A context whose trainable tensors resolve to `params` (in binding
    /// order) instead of fresh leaves, so several passes share parameters.
    pub fn with_params(graph: &'g mut Graph, bn_mode: BnMode, params: Vec<NodeId>) -> Self {
        ForwardCtx {
            graph,
            bn_mode,
            trainable: true,
            param_nodes: vec![],
            bn_updates: vec![],
            reuse: Some((params, 0)),
        }
    }

    fn bind(&mut self, t: &Tensor) -> Result<NodeId> {
        if let Some((ids, next)) = &mut self.reuse {
            let id = *ids
                .get(*next)
                .ok_or_else(|| Error::shape("bind", "more parameters than pre-bound leaves"))?;
            if self.graph.shape(id) != t.shape() {
                return Err(Error::shape(
                    "bind",
                    format!("pre-bound {:?} vs parameter {:?}", self.graph.shape(id), t.shape()),
                ));
            }
            *next += 1;
            self.param_nodes.push(id);
            return Ok(id);
        }
        if self.trainable {
            let id = self.graph.param(t.clone())?;
            self.param_nodes.push(id);
            Ok(id)
        } else {
            self.graph.constant(t.clone())
        }
    }
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = init_params_with(&spec, rng)?;
        Ok(Layer { name: name.into(), spec, params })
    }

    fn tensor(&self, kind: ParamKind) -> &Tensor {
        self.params.get(kind).expect("layer built by init_params")
    }

    /// Applies the layer. Trainable parameters are bound in the order they
    /// appear in [`LayerParams`], which is the order optimizers see.
    pub fn forward(&self, index: usize, ctx: &mut ForwardCtx<'_>, x: NodeId) -> Result<NodeId> {
        match self.spec {
            LayerSpec::Dense { .. } => {
                let w = ctx.bind(self.tensor(ParamKind::Weight))?;
                let b = ctx.bind(self.tensor(ParamKind::Bias))?;
                dense(ctx.graph, w, b, x)
            }
            LayerSpec::Conv { stride, pad, .. } => {
                let w = ctx.bind(self.tensor(ParamKind::Weight))?;
                let b = ctx.bind(self.tensor(ParamKind::Bias))?;
                conv(ctx.graph, w, b, x, stride, pad)
            }
            LayerSpec::Deconv { stride, pad, out_pad, .. } => {
                let w = ctx.bind(self.tensor(ParamKind::Weight))?;
                let b = ctx.bind(self.tensor(ParamKind::Bias))?;
                deconv(ctx.graph, w, b, x, stride, pad, out_pad)
            }
            LayerSpec::BatchNorm { config, .. } => {
                let scale = ctx.bind(self.tensor(ParamKind::BnScale))?;
                let shift = ctx.bind(self.tensor(ParamKind::BnShift))?;
                let (y, stats) = batchnorm(
                    ctx.graph,
                    x,
                    scale,
                    shift,
                    self.tensor(ParamKind::BnRunningMean),
                    self.tensor(ParamKind::BnRunningVar),
                    ctx.bn_mode,
                    config,
                )?;
                if let Some(stats) = stats {
                    ctx.bn_updates.push((index, stats));
                }
                Ok(y)
            }
        }
    }

    pub fn apply_bn_stats(&mut self, stats: BnStats) {
        if let Some(m) = self.params.get_mut(ParamKind::BnRunningMean) {
            *m = stats.mean;
        }
        if let Some(v) = self.params.get_mut(ParamKind::BnRunningVar) {
            *v = stats.var;
        }
    }

    pub fn output_extent(&self, input: usize) -> Option<usize> {
        match self.spec {
            LayerSpec::Conv { kernel, stride, pad, .. } => kernels::conv_out_extent(input, kernel, stride, pad),
            LayerSpec::Deconv { kernel, stride, pad, out_pad, .. } => {
                kernels::deconv_out_extent(input, kernel, stride, pad, out_pad)
            }
            _ => Some(input),
        }
    }
}

/// Draws `n` values from Normal(0, INIT_STD) the same way weights are drawn.
pub fn sample_init_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, Stream::Init);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Uniform values in `[lo, hi)`; used for synthetic inputs and tests.
pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn eval_dense(w: Tensor, b: Tensor, x: Tensor) -> Tensor {
        let mut g = Graph::new();
        let (w, b, x) = (g.constant(w).unwrap(), g.constant(b).unwrap(), g.constant(x).unwrap());
        let y = dense(&mut g, w, b, x).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn dense_examples() {
        let y = eval_dense(Tensor::eye(2), Tensor::zeros(&[2]), Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = eval_dense(
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            Tensor::vector(&[1.0]),
            Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
        );
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(dense(&mut g, w, b, x).is_err());
    }

    #[test]
    fn deconv_stride_two_doubles() {
        let spec = LayerSpec::Deconv { in_ch: 2, out_ch: 3, kernel: 5, stride: 2, pad: same_pad(5), out_pad: doubling_out_pad(5) };
        let layer = Layer::new("d", spec, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 16, 16])).unwrap();
        let mut ctx = ForwardCtx::new(&mut g, BnMode::Eval, false);
        let y = layer.forward(0, &mut ctx, x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 32, 32]);
        assert_eq!(doubling_out_pad(4), 0);
    }

    #[test]
    fn averaging_kernel_preserves_constant_interior() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 6, 6], 0.75)).unwrap();
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0)).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = conv(&mut g, w, b, x, 1, 1).unwrap();
        let v = g.value(y);
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((v.data()[yy * 6 + xx] - 0.75).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_and_deconv_gradients() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let x = uniform_tensor(&mut r, &[2, 2, 6, 6], -2.0, 2.0);
            let params = vec![uniform_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0), uniform_tensor(&mut r, &[3], -1.0, 1.0)];
            let rep = check_gradients(&params, 1e-5, |g, p| {
                let xi = g.input(x.clone())?;
                let y = conv(g, p[0], p[1], xi, 2, 1)?;
                let t = g.tanh(y)?;
                g.sum(t)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-5, "conv seed {seed}: {:e}", rep.max_rel_err);

            let params = vec![uniform_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0), uniform_tensor(&mut r, &[3], -1.0, 1.0)];
            let rep = check_gradients(&params, 1e-5, |g, p| {
                let xi = g.input(x.clone())?;
                let y = deconv(g, p[0], p[1], xi, 2, 2, 1)?;
                let t = g.tanh(y)?;
                g.sum(t)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-5, "deconv seed {seed}: {:e}", rep.max_rel_err);
        }
    }

    fn bn_train(x: Tensor) -> Tensor {
        let c = x.shape()[1];
        let mut g = Graph::new();
        let xi = g.constant(x).unwrap();
        let s = g.constant(Tensor::ones(&[c])).unwrap();
        let b = g.constant(Tensor::zeros(&[c])).unwrap();
        let (y, _) = batchnorm(
            &mut g,
            xi,
            s,
            b,
            &Tensor::zeros(&[c]),
            &Tensor::ones(&[c]),
            BnMode::Train { update_stats: false },
            BnConfig::default(),
        )
        .unwrap();
        g.value(y).clone()
    }

    #[test]
    fn batchnorm_examples() {
        let y = bn_train(Tensor::full(&[4, 2, 3, 3], 1.7));
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = bn_train(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_rejects_single_example_in_train_mode() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let s = g.constant(Tensor::ones(&[2])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        let mode = BnMode::Train { update_stats: true };
        let r = batchnorm(&mut g, x, s, b, &Tensor::zeros(&[2]), &Tensor::ones(&[2]), mode, BnConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut r = rng(5);
        let x = uniform_tensor(&mut r, &[8, 3, 4, 4], -3.0, 5.0);
        let y = bn_train(x);
        for c in 0..3 {
            let vals: Vec<f64> = (0..8).flat_map(|n| {
                let base = (n * 3 + c) * 16;
                y.data()[base..base + 16].to_vec()
            }).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_gradient() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let params = vec![
                uniform_tensor(&mut r, &[4, 2, 3, 3], -2.0, 2.0),
                uniform_tensor(&mut r, &[2], 0.5, 1.5),
                uniform_tensor(&mut r, &[2], -1.0, 1.0),
            ];
            let proj = uniform_tensor(&mut r, &[4, 2, 3, 3], -1.0, 1.0);
            let rep = check_gradients(&params, 1e-5, |g, p| {
                let (y, _) = batchnorm(
                    g,
                    p[0],
                    p[1],
                    p[2],
                    &Tensor::zeros(&[2]),
                    &Tensor::ones(&[2]),
                    BnMode::Train { update_stats: false },
                    BnConfig::default(),
                )?;
                let pr = g.constant(proj.clone())?;
                let m = g.mul(y, pr)?;
                g.sum(m)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-4, "seed {seed}: {:e}", rep.max_rel_err);
        }
    }

    #[test]
    fn eval_batchnorm_is_deterministic_affine() {
        let mut r = rng(9);
        let x = uniform_tensor(&mut r, &[3, 2, 2, 2], -1.0, 1.0);
        let run = || {
            let mut g = Graph::new();
            let xi = g.constant(x.clone()).unwrap();
            let s = g.constant(Tensor::vector(&[2.0, 0.5])).unwrap();
            let b = g.constant(Tensor::vector(&[0.1, -0.2])).unwrap();
            let rm = Tensor::vector(&[0.3, -0.1]);
            let rv = Tensor::vector(&[4.0, 0.25]);
            let (y, st) = batchnorm(&mut g, xi, s, b, &rm, &rv, BnMode::Eval, BnConfig::default()).unwrap();
            assert!(st.is_none());
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap()).unwrap();
        let s = g.constant(Tensor::ones(&[1])).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let (_, st) = batchnorm(
            &mut g, x, s, b,
            &Tensor::zeros(&[1]), &Tensor::ones(&[1]),
            BnMode::Train { update_stats: true }, BnConfig::default(),
        ).unwrap();
        let st = st.unwrap();
        assert!((st.mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance of {1, 3} is 2
        assert!((st.var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn init_is_seeded() {
        let spec = LayerSpec::Conv { in_ch: 3, out_ch: 4, kernel: 5, stride: 2, pad: 2 };
        let a = init_params(&spec, 1).unwrap();
        let b = init_params(&spec, 1).unwrap();
        let c = init_params(&spec, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.get(ParamKind::Bias).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn init_std_is_near_point_02() {
        let w = sample_init_weights(10_000, 42);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.019..=0.021).contains(&std), "std {std}");
    }

    #[test]
    fn degenerate_spec_rejected() {
        assert!(init_params(&LayerSpec::Dense { inputs: 0, outputs: 3 }, 0).is_err());
    }

    #[test]
    fn dense_and_conv_are_linear_without_bias() {
        let mut r = rng(13);
        let x = uniform_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        let w = uniform_tensor(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
        let alpha = -1.7;
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let (xi, wi) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap());
            let b = g.constant(Tensor::zeros(&[4])).unwrap();
            let y = conv(&mut g, wi, b, xi, 2, 1).unwrap();
            g.value(y).clone()
        };
        let lhs = f(&x.map(|v| alpha * v));
        let rhs = f(&x).map(|v| alpha * v);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
