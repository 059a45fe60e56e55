use serde::{Deserialize, Serialize};

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A recorded primitive. Shape parameters that cannot be recovered from the
/// inputs (broadcast targets, reshape targets) are stored in the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Leaf { requires_grad: bool },
    Add,
    Sub,
    Mul,
    Div,
    /// Division that yields 0 wherever the divisor is 0.
    DivSafe,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    Transpose,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize, out_pad: usize },
    ConvWeightGrad { stride: usize, pad: usize, kernel: usize },
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Abs,
    Square,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    SumRows,
    SumChannels,
    BroadcastScalar { shape: Vec<usize> },
    BroadcastRows { shape: Vec<usize> },
    BroadcastChannels { shape: Vec<usize> },
    L2NormRows,
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Pad { axis: usize, before: usize, after: usize },
    Slice { axis: usize, start: usize, len: usize },
    AvgPool { factor: usize },
    UpsampleNearest { factor: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::DivSafe => "div_safe",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "transposed_conv2d",
            Op::ConvWeightGrad { .. } => "conv_weight_grad",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::SumChannels => "sum_channels",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::BroadcastChannels { .. } => "broadcast_channels",
            Op::L2NormRows => "l2_norm_per_row",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Pad { .. } => "pad",
            Op::Slice { .. } => "slice",
            Op::AvgPool { .. } => "avg_pool",
            Op::UpsampleNearest { .. } => "upsample_nearest",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf { .. } => Some(0),
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::DivSafe
            | Op::MatMul
            | Op::Conv2d { .. }
            | Op::ConvTranspose2d { .. }
            | Op::ConvWeightGrad { .. } => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Evaluates the primitive on concrete inputs.
    pub fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::shape(
                    self.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        let x = || inputs[0];
        let unary = |f: fn(f64) -> f64| Ok(inputs[0].map(f));
        match self {
            Op::Leaf { .. } => Err(Error::shape("leaf", "leaves carry their own value")),
            Op::Add => binary(self, inputs, |a, b| a + b),
            Op::Sub => binary(self, inputs, |a, b| a - b),
            Op::Mul => binary(self, inputs, |a, b| a * b),
            Op::Div => binary(self, inputs, |a, b| a / b),
            Op::DivSafe => binary(self, inputs, |a, b| if b == 0.0 { 0.0 } else { a / b }),
            Op::Scale(c) => Ok(x().map(|v| v * c)),
            Op::AddScalar(c) => Ok(x().map(|v| v + c)),
            Op::MatMul => kernels::matmul(inputs[0], inputs[1]),
            Op::Transpose => kernels::transpose(x()),
            Op::Conv2d { stride, pad } => kernels::conv2d(inputs[0], inputs[1], *stride, *pad),
            Op::ConvTranspose2d { stride, pad, out_pad } => {
                kernels::conv_transpose2d(inputs[0], inputs[1], *stride, *pad, *out_pad)
            }
            Op::ConvWeightGrad { stride, pad, kernel } => {
                kernels::conv_weight_grad(inputs[0], inputs[1], *stride, *pad, *kernel)
            }
            Op::Relu => unary(|v| v.max(0.0)),
            Op::Tanh => unary(f64::tanh),
            Op::Sigmoid => unary(|v| 1.0 / (1.0 + (-v).exp())),
            Op::Log => unary(f64::ln),
            Op::Abs => unary(f64::abs),
            Op::Square => unary(|v| v * v),
            Op::Sqrt => unary(f64::sqrt),
            Op::Clamp { lo, hi } => Ok(x().map(|v| v.clamp(*lo, *hi))),
            Op::Sum => Ok(Tensor::scalar(x().sum())),
            Op::Mean => Ok(Tensor::scalar(x().mean())),
            Op::SumRows => kernels::sum_rows(x()),
            Op::SumChannels => kernels::sum_channels(x()),
            Op::BroadcastScalar { shape } => {
                let v = x().item()?;
                Ok(Tensor::full(shape, v))
            }
            Op::BroadcastRows { shape } => kernels::broadcast_rows(x(), shape),
            Op::BroadcastChannels { shape } => kernels::broadcast_channels(x(), shape),
            Op::L2NormRows => kernels::l2_norm_rows(x()),
            Op::Concat { axis } => kernels::concat(inputs, *axis),
            Op::Reshape { shape } => x().reshape(shape),
            Op::Pad { axis, before, after } => kernels::pad_axis(x(), *axis, *before, *after),
            Op::Slice { axis, start, len } => kernels::slice_axis(x(), *axis, *start, *len),
            Op::AvgPool { factor } => kernels::avg_pool(x(), *factor),
            Op::UpsampleNearest { factor } => kernels::upsample_nearest(x(), *factor),
        }
    }
}

fn binary(op: &Op, inputs: &[&Tensor], f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (a, b) = (inputs[0], inputs[1]);
    if a.shape() != b.shape() {
        return Err(Error::shape(op.name(), format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    a.zip_map(b, f)
}
