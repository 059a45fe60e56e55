use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::kernels;
use super::ops::Op;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Every builder method evaluates its primitive immediately and stores the
/// result, so the graph doubles as the forward pass. Backward sweeps append
/// their vector-Jacobian products as ordinary nodes; differentiating a graph
/// that already contains a backward sweep yields second-order quantities.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to graph nodes.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf { requires_grad },
            inputs: vec![],
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    /// A differentiable input (same as [`Graph::param`], named for readability).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient from [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Records `op` applied to `inputs`.
    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let value = op.eval(&values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs: inputs.to_vec(), value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div, &[a, b])
    }
    pub fn div_safe(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::DivSafe, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, &[a])
    }
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.push(Op::Conv2d { stride, pad }, &[x, w])
    }
    pub fn transposed_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        self.push(Op::ConvTranspose2d { stride, pad, out_pad }, &[x, w])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt, &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clamp { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, &[a])
    }
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows, &[a])
    }
    pub fn sum_channels(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumChannels, &[a])
    }
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::BroadcastScalar { shape: shape.to_vec() }, &[a])
    }
    pub fn broadcast_rows(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::BroadcastRows { shape: shape.to_vec() }, &[a])
    }
    pub fn broadcast_channels(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::BroadcastChannels { shape: shape.to_vec() }, &[a])
    }
    pub fn l2_norm_per_row(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2NormRows, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat { axis }, parts)
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn pad(&mut self, a: NodeId, axis: usize, before: usize, after: usize) -> Result<NodeId> {
        self.push(Op::Pad { axis, before, after }, &[a])
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice { axis, start, len }, &[a])
    }
    pub fn avg_pool(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::AvgPool { factor }, &[a])
    }
    pub fn upsample_nearest(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::UpsampleNearest { factor }, &[a])
    }

    /// Gradient of a scalar node with respect to every node that depends on a
    /// trainable leaf. Trainable leaves the output does not reach map to zeros.
    pub fn backward(&mut self, output: NodeId) -> Result<GradientMap> {
        self.check(output)?;
        let needs: Vec<bool> = self.nodes[..=output.0].iter().map(|n| n.requires_grad).collect();
        let grads = self.reverse_sweep(output, &needs)?;
        let mut map = GradientMap::default();
        for (i, g) in grads.iter().enumerate() {
            match g {
                Some(g) => {
                    map.grads.insert(NodeId(i), self.nodes[g.0].value.clone());
                }
                None => {
                    let n = &self.nodes[i];
                    if matches!(n.op, Op::Leaf { requires_grad: true }) {
                        map.grads.insert(NodeId(i), Tensor::zeros(n.value.shape()));
                    }
                }
            }
        }
        Ok(map)
    }

    /// Records the gradient of scalar `output` with respect to each of `wrt`
    /// as graph nodes, so the result can itself be differentiated.
    pub fn gradients(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let needs = self.dependents(output, wrt);
        let grads = self.reverse_sweep(output, &needs)?;
        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    self.constant(zeros)
                }
            })
            .collect()
    }

    /// `needs[i]` is true when node `i` is one of `wrt` or depends on one.
    fn dependents(&self, output: NodeId, wrt: &[NodeId]) -> Vec<bool> {
        let mut needs = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                needs[w.0] = true;
            }
        }
        for i in 0..=output.0 {
            if !needs[i] {
                needs[i] = self.nodes[i].inputs.iter().any(|p| needs[p.0]);
            }
        }
        needs
    }

    fn reverse_sweep(&mut self, output: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let shape = self.shape(output).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        if !needs[output.0] {
            return Ok(grads);
        }
        grads[output.0] = Some(self.constant(Tensor::ones(&shape))?);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                continue;
            }
            let want: Vec<bool> = node.inputs.iter().map(|p| needs[p.0]).collect();
            if !want.iter().any(|&w| w) {
                continue;
            }
            let inputs = node.inputs.clone();
            let parts = self.vjp(NodeId(i), g, &want)?;
            for (p, part) in inputs.into_iter().zip(parts) {
                let Some(part) = part else { continue };
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, part)?,
                    None => part,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of node `id` for the inputs flagged in `want`,
    /// expressed as new graph nodes.
    fn vjp(&mut self, id: NodeId, g: NodeId, want: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let node = &self.nodes[id.0];
        let op = node.op.clone();
        let ins = node.inputs.clone();
        let mut out: Vec<Option<NodeId>> = vec![None; ins.len()];
        macro_rules! set {
            ($i:expr, $e:expr) => {
                if want[$i] {
                    out[$i] = Some($e);
                }
            };
        }
        match op {
            Op::Leaf { .. } => {}
            Op::Add => {
                set!(0, g);
                set!(1, g);
            }
            Op::Sub => {
                set!(0, g);
                set!(1, self.scale(g, -1.0)?);
            }
            Op::Mul => {
                set!(0, self.mul(g, ins[1])?);
                set!(1, self.mul(g, ins[0])?);
            }
            Op::Div | Op::DivSafe => {
                let safe = matches!(op, Op::DivSafe);
                let div = |gr: &mut Graph, a, b| if safe { gr.div_safe(a, b) } else { gr.div(a, b) };
                set!(0, div(self, g, ins[1])?);
                if want[1] {
                    let gy = self.mul(g, id)?;
                    let q = div(self, gy, ins[1])?;
                    out[1] = Some(self.scale(q, -1.0)?);
                }
            }
            Op::Scale(c) => set!(0, self.scale(g, c)?),
            Op::AddScalar(_) => set!(0, g),
            Op::MatMul => {
                if want[0] {
                    let bt = self.transpose(ins[1])?;
                    out[0] = Some(self.matmul(g, bt)?);
                }
                if want[1] {
                    let at = self.transpose(ins[0])?;
                    out[1] = Some(self.matmul(at, g)?);
                }
            }
            Op::Transpose => set!(0, self.transpose(g)?),
            Op::Conv2d { stride, pad } => {
                let x_shape = self.shape(ins[0]).to_vec();
                let k = self.shape(ins[1])[2];
                if want[0] {
                    let out_pad = adjoint_out_pad(&x_shape, self.shape(g), k, stride, pad)?;
                    out[0] = Some(self.transposed_conv2d(g, ins[1], stride, pad, out_pad)?);
                }
                if want[1] {
                    let op = Op::ConvWeightGrad { stride, pad, kernel: k };
                    out[1] = Some(self.push(op, &[ins[0], g])?);
                }
            }
            Op::ConvTranspose2d { stride, pad, .. } => {
                let k = self.shape(ins[1])[2];
                set!(0, self.conv2d(g, ins[1], stride, pad)?);
                if want[1] {
                    let op = Op::ConvWeightGrad { stride, pad, kernel: k };
                    out[1] = Some(self.push(op, &[g, ins[0]])?);
                }
            }
            Op::ConvWeightGrad { stride, pad, .. } => {
                let x_shape = self.shape(ins[0]).to_vec();
                let k = self.shape(g)[2];
                if want[0] {
                    let out_pad = adjoint_out_pad(&x_shape, self.shape(ins[1]), k, stride, pad)?;
                    out[0] = Some(self.transposed_conv2d(ins[1], g, stride, pad, out_pad)?);
                }
                set!(1, self.conv2d(ins[0], g, stride, pad)?);
            }
            Op::Relu => {
                // second derivative is taken as zero everywhere, kink included
                let mask = self.value(ins[0]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask)?;
                set!(0, self.mul(g, m)?);
            }
            Op::Tanh => {
                let y2 = self.square(id)?;
                let neg = self.scale(y2, -1.0)?;
                let d = self.add_scalar(neg, 1.0)?;
                set!(0, self.mul(g, d)?);
            }
            Op::Sigmoid => {
                let neg = self.scale(id, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(id, one_minus)?;
                set!(0, self.mul(g, d)?);
            }
            Op::Log => set!(0, self.div(g, ins[0])?),
            Op::Abs => {
                let sign = self.value(ins[0]).map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                let s = self.constant(sign)?;
                set!(0, self.mul(g, s)?);
            }
            Op::Square => {
                let two_x = self.scale(ins[0], 2.0)?;
                set!(0, self.mul(g, two_x)?);
            }
            Op::Sqrt => {
                let half = self.scale(g, 0.5)?;
                set!(0, self.div_safe(half, id)?);
            }
            Op::Clamp { lo, hi } => {
                let mask = self.value(ins[0]).map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                let m = self.constant(mask)?;
                set!(0, self.mul(g, m)?);
            }
            Op::Sum | Op::Mean => {
                let shape = self.shape(ins[0]).to_vec();
                let b = self.broadcast_scalar(g, &shape)?;
                if matches!(op, Op::Mean) {
                    let n = shape.iter().product::<usize>() as f64;
                    set!(0, self.scale(b, 1.0 / n)?);
                } else {
                    set!(0, b);
                }
            }
            Op::SumRows => {
                let shape = self.shape(ins[0]).to_vec();
                set!(0, self.broadcast_rows(g, &shape)?);
            }
            Op::SumChannels => {
                let shape = self.shape(ins[0]).to_vec();
                set!(0, self.broadcast_channels(g, &shape)?);
            }
            Op::BroadcastScalar { .. } => {
                let shape = self.shape(ins[0]).to_vec();
                let s = self.sum(g)?;
                set!(0, self.reshape(s, &shape)?);
            }
            Op::BroadcastRows { .. } => set!(0, self.sum_rows(g)?),
            Op::BroadcastChannels { .. } => set!(0, self.sum_channels(g)?),
            Op::L2NormRows => {
                // d‖x‖/dx = x / ‖x‖, taken as 0 on zero rows
                let shape = self.shape(ins[0]).to_vec();
                let gb = self.broadcast_rows(g, &shape)?;
                let num = self.mul(ins[0], gb)?;
                let yb = self.broadcast_rows(id, &shape)?;
                set!(0, self.div_safe(num, yb)?);
            }
            Op::Concat { axis } => {
                let mut start = 0;
                for (i, &p) in ins.iter().enumerate() {
                    let len = self.shape(p)[axis];
                    if want[i] {
                        out[i] = Some(self.slice(g, axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Reshape { .. } => {
                let shape = self.shape(ins[0]).to_vec();
                set!(0, self.reshape(g, &shape)?);
            }
            Op::Pad { axis, before, .. } => {
                let len = self.shape(ins[0])[axis];
                set!(0, self.slice(g, axis, before, len)?);
            }
            Op::Slice { axis, start, len } => {
                let full = self.shape(ins[0])[axis];
                set!(0, self.pad(g, axis, start, full - start - len)?);
            }
            Op::AvgPool { factor } => {
                let up = self.upsample_nearest(g, factor)?;
                set!(0, self.scale(up, 1.0 / (factor * factor) as f64)?);
            }
            Op::UpsampleNearest { factor } => {
                let down = self.avg_pool(g, factor)?;
                set!(0, self.scale(down, (factor * factor) as f64)?);
            }
        }
        Ok(out)
    }

    /// Extends the graph with `mean_i (‖∇_x D(x)_i‖₂ − 1)²`, the gradient
    /// penalty of critic scores `critic_output` (one per batch row) at the
    /// inputs `input`. The gradient is recorded as graph nodes, so
    /// differentiating the returned node goes reverse-over-reverse.
    pub fn gradient_penalty(&mut self, critic_output: NodeId, input: NodeId) -> Result<NodeId> {
        self.check(critic_output)?;
        self.check(input)?;
        let needs = self.dependents(critic_output, &[input]);
        if input.0 == critic_output.0 || !needs[critic_output.0] {
            return Err(Error::NotAncestor { input: input.0, output: critic_output.0 });
        }
        let total = self.sum(critic_output)?;
        let grad = self.gradients(total, &[input])?[0];
        let norms = self.l2_norm_per_row(grad)?;
        let dev = self.add_scalar(norms, -1.0)?;
        let sq = self.square(dev)?;
        self.mean(sq)
    }

    /// Gradients of the penalty from [`Graph::gradient_penalty`] with respect
    /// to `params`.
    pub fn grad_norm_penalty_backward(
        &mut self,
        critic_output: NodeId,
        input: NodeId,
        params: &[NodeId],
    ) -> Result<GradientMap> {
        let penalty = self.gradient_penalty(critic_output, input)?;
        let grads = self.gradients(penalty, params)?;
        let mut map = GradientMap::default();
        for (&p, g) in params.iter().zip(grads) {
            map.grads.insert(p, self.value(g).clone());
        }
        Ok(map)
    }

    /// Serializable form: operations, wiring and leaf values only.
    pub fn to_record(&self) -> GraphRecord {
        GraphRecord {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    op: n.op.clone(),
                    inputs: n.inputs.iter().map(|i| i.0).collect(),
                    value: matches!(n.op, Op::Leaf { .. }).then(|| n.value.clone()),
                })
                .collect(),
        }
    }

    /// Rebuilds a graph by re-running every recorded operation.
    pub fn replay(record: &GraphRecord) -> Result<Graph> {
        let mut g = Graph::new();
        for (i, n) in record.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&p| p >= i) {
                return Err(Error::shape("replay", format!("node {i} references a later node")));
            }
            match (&n.op, &n.value) {
                (Op::Leaf { requires_grad }, Some(v)) => {
                    g.leaf(v.clone(), *requires_grad)?;
                }
                (Op::Leaf { .. }, None) => {
                    return Err(Error::shape("replay", format!("leaf {i} has no value")))
                }
                (op, _) => {
                    let ins: Vec<NodeId> = n.inputs.iter().map(|&p| NodeId(p)).collect();
                    g.push(op.clone(), &ins)?;
                }
            }
        }
        Ok(g)
    }
}

/// Output padding that makes a transposed convolution reproduce `x_shape`.
fn adjoint_out_pad(
    x_shape: &[usize],
    y_shape: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let base = kernels::deconv_out_extent(y_shape[2], kernel, stride, pad, 0)
        .ok_or_else(|| Error::shape("conv2d backward", "degenerate output"))?;
    let base_w = kernels::deconv_out_extent(y_shape[3], kernel, stride, pad, 0)
        .ok_or_else(|| Error::shape("conv2d backward", "degenerate output"))?;
    let (h, w) = (x_shape[2], x_shape[3]);
    if h < base || w < base_w || h - base != w - base_w {
        return Err(Error::shape(
            "conv2d backward",
            format!("cannot recover {h}x{w} from {:?}", &y_shape[2..]),
        ));
    }
    Ok(h - base)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub op: Op,
    pub inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub nodes: Vec<NodeRecord>,
}
