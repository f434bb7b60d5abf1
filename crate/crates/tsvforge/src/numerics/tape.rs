//! Reverse-mode differentiation over a recorded op tape.
//!
//! One tape per training step: record the forward pass, call
//! [`GradTape::backward`] once on a scalar loss node, read gradients out by
//! node id. Nodes are appended in topological order by construction.

use crate::error::{Result, TsvError};
use crate::objectives::kernels::{instance_loss_grad, temporal_loss_grad};

use super::conv::{
    conv1d_dilated, conv1d_dilated_backward, maxpool1d_time, maxpool1d_time_backward,
};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    MulElem,
    Scale(f64),
    /// w0·a + w1·b, elementwise.
    LinComb2(f64, f64),
    Sum,
    MatMul,
    /// a [C × T] + bias [C] broadcast over columns.
    BiasAddCols,
    Conv1d {
        dilation: usize,
        causal: bool,
    },
    Gelu,
    /// Zero out the columns where the mask is true.
    MaskCols(Vec<bool>),
    SliceCols {
        start: usize,
        end: usize,
    },
    PadLeftCols(usize),
    DropLeftCols(usize),
    /// B inputs [C × T] stacked into [B × T × C].
    StackViews,
    /// Max-pool [B × T × C] along T.
    MaxPoolBtc(usize),
    /// Max-pool [C × T] along T.
    MaxPoolCt(usize),
    TemporalLoss,
    InstanceLoss,
    /// MSE over masked columns only; inputs (reconstruction, target).
    MaskedMse(Vec<bool>),
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id; nodes the loss does not depend on map to zero
/// tensors of the node's shape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a.0, b.0], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, vec![a.0, b.0], v))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::MulElem, vec![a.0, b.0], v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(s), vec![a.0], v)
    }

    pub fn lin_comb2(&mut self, w0: f64, a: NodeId, w1: f64, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).scale(w0).add(&self.value(b).scale(w1))?;
        Ok(self.push(Op::LinComb2(w0, w1), vec![a.0, b.0], v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, vec![a.0], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a.0, b.0], v))
    }

    pub fn bias_add_cols(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let b = self.value(bias);
        if x.shape().len() != 2 || b.shape() != [x.shape()[0]] {
            return Err(TsvError::Dimension(format!(
                "bias_add_cols shapes {:?} and {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let mut v = x.clone();
        for ch in 0..c {
            for j in 0..t {
                v.data_mut()[ch * t + j] += b.data()[ch];
            }
        }
        Ok(self.push(Op::BiasAddCols, vec![a.0, bias.0], v))
    }

    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        dilation: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let v = conv1d_dilated(self.value(input), self.value(kernel), dilation, causal)?;
        Ok(self.push(
            Op::Conv1d { dilation, causal },
            vec![input.0, kernel.0],
            v,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu, vec![a.0], v)
    }

    pub fn mask_cols(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape().len() != 2 || x.shape()[1] != mask.len() {
            return Err(TsvError::Dimension(format!(
                "mask of length {} on shape {:?}",
                mask.len(),
                x.shape()
            )));
        }
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let mut v = x.clone();
        for ch in 0..c {
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    v.data_mut()[ch * t + j] = 0.0;
                }
            }
        }
        Ok(self.push(Op::MaskCols(mask.to_vec()), vec![a.0], v))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (c, t) = (x.shape()[0], x.shape()[1]);
        if start >= end || end > t {
            return Err(TsvError::Contract(format!(
                "slice [{start}, {end}) of {t} columns"
            )));
        }
        let mut v = Tensor::zeros(&[c, end - start]);
        for ch in 0..c {
            for j in start..end {
                v.data_mut()[ch * (end - start) + (j - start)] = x.data()[ch * t + j];
            }
        }
        Ok(self.push(Op::SliceCols { start, end }, vec![a.0], v))
    }

    pub fn pad_left_cols(&mut self, a: NodeId, pad: usize) -> NodeId {
        let x = self.value(a);
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let mut v = Tensor::zeros(&[c, t + pad]);
        for ch in 0..c {
            for j in 0..t {
                v.data_mut()[ch * (t + pad) + pad + j] = x.data()[ch * t + j];
            }
        }
        self.push(Op::PadLeftCols(pad), vec![a.0], v)
    }

    pub fn drop_left_cols(&mut self, a: NodeId, pad: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (c, t) = (x.shape()[0], x.shape()[1]);
        if pad >= t {
            return Err(TsvError::Contract(format!("drop {pad} of {t} columns")));
        }
        let mut v = Tensor::zeros(&[c, t - pad]);
        for ch in 0..c {
            for j in pad..t {
                v.data_mut()[ch * (t - pad) + (j - pad)] = x.data()[ch * t + j];
            }
        }
        Ok(self.push(Op::DropLeftCols(pad), vec![a.0], v))
    }

    /// Stack B per-instance representations [C × T] into [B × T × C].
    pub fn stack_views(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(TsvError::Contract("stack_views needs ≥ 1 input".into()));
        }
        let shape0 = self.value(inputs[0]).shape().to_vec();
        let (c, t) = (shape0[0], shape0[1]);
        let b = inputs.len();
        let mut v = Tensor::zeros(&[b, t, c]);
        for (bi, &id) in inputs.iter().enumerate() {
            let x = self.value(id);
            if x.shape() != shape0.as_slice() {
                return Err(TsvError::Dimension("stack_views shape mismatch".into()));
            }
            for ch in 0..c {
                for j in 0..t {
                    v.data_mut()[(bi * t + j) * c + ch] = x.data()[ch * t + j];
                }
            }
        }
        Ok(self.push(Op::StackViews, inputs.iter().map(|n| n.0).collect(), v))
    }

    /// Max-pool [B × T × C] along the time axis with non-overlapping windows.
    pub fn maxpool_btc(&mut self, a: NodeId, width: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape().len() != 3 {
            return Err(TsvError::Dimension("maxpool_btc expects [B × T × C]".into()));
        }
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let t_out = t.div_ceil(width);
        let mut v = Tensor::zeros(&[b, t_out, c]);
        for bi in 0..b {
            for j in 0..t_out {
                let lo = j * width;
                let hi = ((j + 1) * width).min(t);
                for ch in 0..c {
                    let m = (lo..hi)
                        .map(|u| x.at3(bi, u, ch))
                        .fold(f64::NEG_INFINITY, f64::max);
                    v.data_mut()[(bi * t_out + j) * c + ch] = m;
                }
            }
        }
        Ok(self.push(Op::MaxPoolBtc(width), vec![a.0], v))
    }

    pub fn maxpool_ct(&mut self, a: NodeId, width: usize) -> Result<NodeId> {
        let v = maxpool1d_time(self.value(a), width)?;
        Ok(self.push(Op::MaxPoolCt(width), vec![a.0], v))
    }

    pub fn temporal_loss(&mut self, r: NodeId, rp: NodeId) -> Result<NodeId> {
        let (v, _) = temporal_loss_grad(self.value(r), self.value(rp), false)?;
        Ok(self.push(Op::TemporalLoss, vec![r.0, rp.0], Tensor::scalar(v)))
    }

    pub fn instance_loss(&mut self, r: NodeId, rp: NodeId) -> Result<NodeId> {
        let (v, _) = instance_loss_grad(self.value(r), self.value(rp), false)?;
        Ok(self.push(Op::InstanceLoss, vec![r.0, rp.0], Tensor::scalar(v)))
    }

    pub fn masked_mse(&mut self, recon: NodeId, target: NodeId, mask: &[bool]) -> Result<NodeId> {
        let x = self.value(recon);
        let y = self.value(target);
        if x.shape() != y.shape() || x.shape().len() != 2 || x.shape()[1] != mask.len() {
            return Err(TsvError::Dimension(format!(
                "masked_mse shapes {:?} vs {:?}, mask {}",
                x.shape(),
                y.shape(),
                mask.len()
            )));
        }
        let v = masked_mse_value(x, y, mask);
        Ok(self.push(
            Op::MaskedMse(mask.to_vec()),
            vec![recon.0, target.0],
            Tensor::scalar(v),
        ))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// node; parameters unused by the loss get zero tensors.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(TsvError::Contract(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        match &mut grads[idx] {
            Some(acc) => acc.axpy(1.0, &g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let inv = |i: usize| &self.nodes[node.inputs[i]].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                Self::accumulate(grads, node.inputs[0], g.clone());
                Self::accumulate(grads, node.inputs[1], g.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, node.inputs[0], g.clone());
                Self::accumulate(grads, node.inputs[1], g.scale(-1.0));
            }
            Op::MulElem => {
                Self::accumulate(grads, node.inputs[0], g.mul(inv(1))?);
                Self::accumulate(grads, node.inputs[1], g.mul(inv(0))?);
            }
            Op::Scale(s) => {
                Self::accumulate(grads, node.inputs[0], g.scale(*s));
            }
            Op::LinComb2(w0, w1) => {
                Self::accumulate(grads, node.inputs[0], g.scale(*w0));
                Self::accumulate(grads, node.inputs[1], g.scale(*w1));
            }
            Op::Sum => {
                let s = g.scalar_value();
                Self::accumulate(grads, node.inputs[0], inv(0).map(|_| s));
            }
            Op::MatMul => {
                let (a, b) = (inv(0), inv(1));
                Self::accumulate(grads, node.inputs[0], Tensor::matmul_ex(g, false, b, true)?);
                Self::accumulate(grads, node.inputs[1], Tensor::matmul_ex(a, true, g, false)?);
            }
            Op::BiasAddCols => {
                Self::accumulate(grads, node.inputs[0], g.clone());
                let (c, t) = (g.shape()[0], g.shape()[1]);
                let mut db = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let mut s = 0.0;
                    for j in 0..t {
                        s += g.data()[ch * t + j];
                    }
                    db.data_mut()[ch] = s;
                }
                Self::accumulate(grads, node.inputs[1], db);
            }
            Op::Conv1d { dilation, causal } => {
                let (dx, dk) =
                    conv1d_dilated_backward(inv(0), inv(1), *dilation, *causal, g)?;
                Self::accumulate(grads, node.inputs[0], dx);
                Self::accumulate(grads, node.inputs[1], dk);
            }
            Op::Gelu => {
                let x = inv(0);
                let dg = x
                    .map(gelu_prime)
                    .mul(g)?;
                Self::accumulate(grads, node.inputs[0], dg);
            }
            Op::MaskCols(mask) => {
                let (c, t) = (g.shape()[0], g.shape()[1]);
                let mut dx = g.clone();
                for ch in 0..c {
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            dx.data_mut()[ch * t + j] = 0.0;
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], dx);
            }
            Op::SliceCols { start, end } => {
                let x = inv(0);
                let (c, t) = (x.shape()[0], x.shape()[1]);
                let w = end - start;
                let mut dx = Tensor::zeros(&[c, t]);
                for ch in 0..c {
                    for j in 0..w {
                        dx.data_mut()[ch * t + start + j] = g.data()[ch * w + j];
                    }
                }
                Self::accumulate(grads, node.inputs[0], dx);
            }
            Op::PadLeftCols(pad) => {
                let x = inv(0);
                let (c, t) = (x.shape()[0], x.shape()[1]);
                let mut dx = Tensor::zeros(&[c, t]);
                for ch in 0..c {
                    for j in 0..t {
                        dx.data_mut()[ch * t + j] = g.data()[ch * (t + pad) + pad + j];
                    }
                }
                Self::accumulate(grads, node.inputs[0], dx);
            }
            Op::DropLeftCols(pad) => {
                let x = inv(0);
                let (c, t) = (x.shape()[0], x.shape()[1]);
                let mut dx = Tensor::zeros(&[c, t]);
                for ch in 0..c {
                    for j in *pad..t {
                        dx.data_mut()[ch * t + j] = g.data()[ch * (t - pad) + (j - pad)];
                    }
                }
                Self::accumulate(grads, node.inputs[0], dx);
            }
            Op::StackViews => {
                let (b, t, c) = (
                    node.value.shape()[0],
                    node.value.shape()[1],
                    node.value.shape()[2],
                );
                for bi in 0..b {
                    let mut dx = Tensor::zeros(&[c, t]);
                    for ch in 0..c {
                        for j in 0..t {
                            dx.data_mut()[ch * t + j] = g.data()[(bi * t + j) * c + ch];
                        }
                    }
                    Self::accumulate(grads, node.inputs[bi], dx);
                }
                debug_assert_eq!(node.inputs.len(), b);
            }
            Op::MaxPoolBtc(width) => {
                let x = inv(0);
                let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let t_out = t.div_ceil(*width);
                let mut dx = Tensor::zeros(&[b, t, c]);
                for bi in 0..b {
                    for j in 0..t_out {
                        let lo = j * width;
                        let hi = ((j + 1) * width).min(t);
                        for ch in 0..c {
                            let mut best = lo;
                            for u in lo + 1..hi {
                                if x.at3(bi, u, ch) > x.at3(bi, best, ch) {
                                    best = u;
                                }
                            }
                            dx.data_mut()[(bi * t + best) * c + ch] +=
                                g.data()[(bi * t_out + j) * c + ch];
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], dx);
            }
            Op::MaxPoolCt(width) => {
                let dx = maxpool1d_time_backward(inv(0), *width, g);
                Self::accumulate(grads, node.inputs[0], dx);
            }
            Op::TemporalLoss => {
                let (_, grad_pair) = temporal_loss_grad(inv(0), inv(1), true)?;
                let (dr, drp) = grad_pair.expect("gradients requested");
                let s = g.scalar_value();
                Self::accumulate(grads, node.inputs[0], dr.scale(s));
                Self::accumulate(grads, node.inputs[1], drp.scale(s));
            }
            Op::InstanceLoss => {
                let (_, grad_pair) = instance_loss_grad(inv(0), inv(1), true)?;
                let (dr, drp) = grad_pair.expect("gradients requested");
                let s = g.scalar_value();
                Self::accumulate(grads, node.inputs[0], dr.scale(s));
                Self::accumulate(grads, node.inputs[1], drp.scale(s));
            }
            Op::MaskedMse(mask) => {
                let (recon, target) = (inv(0), inv(1));
                let (d, _t) = (recon.shape()[0], recon.shape()[1]);
                let n_masked = mask.iter().filter(|&&m| m).count();
                if n_masked > 0 {
                    let scale = 2.0 / (d as f64 * n_masked as f64) * g.scalar_value();
                    let mut dr = Tensor::zeros(recon.shape());
                    let t = recon.shape()[1];
                    for ch in 0..d {
                        for (j, &m) in mask.iter().enumerate() {
                            if m {
                                let diff = recon.data()[ch * t + j] - target.data()[ch * t + j];
                                dr.data_mut()[ch * t + j] = scale * diff;
                            }
                        }
                    }
                    Self::accumulate(grads, node.inputs[1], dr.scale(-1.0));
                    Self::accumulate(grads, node.inputs[0], dr);
                }
            }
        }
        Ok(())
    }
}

/// Mean squared error over masked columns only; 0 when nothing is masked.
pub(crate) fn masked_mse_value(recon: &Tensor, target: &Tensor, mask: &[bool]) -> f64 {
    let (d, t) = (recon.shape()[0], recon.shape()[1]);
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for ch in 0..d {
        for (j, &m) in mask.iter().enumerate() {
            if m {
                let diff = recon.data()[ch * t + j] - target.data()[ch * t + j];
                s += diff * diff;
            }
        }
    }
    s / (d as f64 * n_masked as f64)
}

// Tanh-form GELU; exact at 0, which the encoder's residual-identity property
// relies on.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
