//! Reverse-mode autodiff on an append-only tape.
//!
//! Ops evaluate eagerly as they are recorded, so node ids are already in
//! topological order and the backward pass is a single reverse sweep. Values
//! are `Arc`-backed, which makes aliasing ops (stop-gradient) free.
//!
//! The tape also meters activation storage: every recorded value, auxiliary
//! buffer and adjoint counts its elements, except parameter leaves (shared
//! with the persistent store) and stop-gradient aliases. This is the number
//! the memory-scaling checks compare across training layouts.

use crate::error::{PgtError, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    StopGradient { x: NodeId },
    TemporalConv { x: NodeId, w: NodeId, b: NodeId, past: Option<NodeId> },
    PointwiseConv { x: NodeId, w: NodeId, b: NodeId },
    SpatialConv { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    StepNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Tensor<S>, istd: Tensor<S> },
    TemporalMeanPool { x: NodeId },
    TemporalMaxPool { x: NodeId, arg: Vec<usize> },
    GlobalAvgPool { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    SliceFrames { x: NodeId, start: usize },
    Scale { x: NodeId, c: S },
    Add { a: NodeId, b: NodeId },
    AddN { xs: Vec<NodeId> },
    CrossEntropy { logits: NodeId, label: usize, probs: Tensor<S> },
    SumSquares { x: NodeId },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Adjoints from a backward sweep, indexed by node id.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    adj: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Adjoint of `id`, if any gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.adj.get(id).and_then(|a| a.as_ref())
    }

    /// Adjoint of `id`, or a zero tensor of the given shape.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Debug)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    truncation_enabled: bool,
    activation_elems: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), truncation_enabled: true, activation_elems: 0 }
    }

    /// A tape whose stop-gradient nodes pass gradients through. Only used as
    /// a negative control to demonstrate what truncation actually removes.
    pub fn with_truncation(enabled: bool) -> Self {
        Tape { nodes: Vec::new(), truncation_enabled: enabled, activation_elems: 0 }
    }

    pub fn truncation_enabled(&self) -> bool {
        self.truncation_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Elements recorded for activations, auxiliary buffers and adjoints so
    /// far. Parameter leaves, stop-gradient aliases, and leaf adjoints
    /// (gradient accumulators owned by the caller) are excluded.
    pub fn activation_elems(&self) -> usize {
        self.activation_elems
    }

    /// Smallest |v| over all values feeding a relu: the distance to the
    /// nearest activation kink. `None` when the tape holds no relu node.
    /// Finite-difference probes are only trustworthy when this margin
    /// comfortably exceeds the probe step.
    pub fn min_relu_input_margin(&self) -> Option<f64> {
        let mut margin: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.nodes[x].value.data() {
                    let a = v.to_f64_val().abs();
                    margin = Some(margin.map_or(a, |m| m.min(a)));
                }
            }
        }
        margin
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool, is_param: bool) -> NodeId {
        let metered = match (&op, is_param) {
            (_, true) => 0,
            (Op::StopGradient { .. }, _) => 0,
            (Op::StepNorm { mean, istd, .. }, _) => value.numel() + mean.numel() + istd.numel(),
            (Op::TemporalMaxPool { arg, .. }, _) => value.numel() + arg.len(),
            (Op::CrossEntropy { probs, .. }, _) => value.numel() + probs.numel(),
            _ => value.numel(),
        };
        self.activation_elems += metered;
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    /// Input data leaf. `requires_grad` is only needed when the caller wants
    /// the adjoint at this leaf (receptive-field probes, truncation checks).
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad, false)
    }

    /// Parameter leaf; shares storage with the persistent store.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, true, true)
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.clone();
        let needs = if self.truncation_enabled { false } else { self.nodes[x].needs_grad };
        self.push(Op::StopGradient { x }, value, needs, false)
    }

    pub fn temporal_conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        past: Option<NodeId>,
    ) -> Result<NodeId> {
        let value = kernels::temporal_conv_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            past.map(|p| &self.nodes[p].value),
        )?;
        let needs = self.nodes[x].needs_grad
            || self.nodes[w].needs_grad
            || self.nodes[b].needs_grad
            || past.map_or(false, |p| self.nodes[p].needs_grad);
        Ok(self.push(Op::TemporalConv { x, w, b, past }, value, needs, false))
    }

    pub fn pointwise_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::pointwise_conv_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        )?;
        let needs =
            self.nodes[x].needs_grad || self.nodes[w].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(Op::PointwiseConv { x, w, b }, value, needs, false))
    }

    pub fn spatial_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::spatial_conv_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        )?;
        let needs =
            self.nodes[x].needs_grad || self.nodes[w].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(Op::SpatialConv { x, w, b }, value, needs, false))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = kernels::relu_forward(&self.nodes[x].value);
        let needs = self.nodes[x].needs_grad;
        self.push(Op::Relu { x }, value, needs, false)
    }

    pub fn step_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (value, mean, istd) = kernels::step_norm_forward(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        )?;
        let needs = self.nodes[x].needs_grad
            || self.nodes[gamma].needs_grad
            || self.nodes[beta].needs_grad;
        Ok(self.push(Op::StepNorm { x, gamma, beta, mean, istd }, value, needs, false))
    }

    pub fn temporal_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::temporal_mean_pool(&self.nodes[x].value)?;
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(Op::TemporalMeanPool { x }, value, needs, false))
    }

    pub fn temporal_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, arg) = kernels::temporal_max_pool(&self.nodes[x].value)?;
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(Op::TemporalMaxPool { x, arg }, value, needs, false))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::global_avg_pool(&self.nodes[x].value)?;
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(Op::GlobalAvgPool { x }, value, needs, false))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::dense_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        )?;
        let needs =
            self.nodes[x].needs_grad || self.nodes[w].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(Op::Dense { x, w, b }, value, needs, false))
    }

    pub fn slice_frames(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let value = self.nodes[x].value.slice_frames(start, end)?;
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(Op::SliceFrames { x, start }, value, needs, false))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.nodes[x].value.map(|v| c * v);
        let needs = self.nodes[x].needs_grad;
        self.push(Op::Scale { x, c }, value, needs, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(PgtError::shape(format!(
                "add of {:?} and {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let mut value = self.nodes[a].value.clone();
        value.axpy(S::one(), &self.nodes[b].value)?;
        let needs = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(Op::Add { a, b }, value, needs, false))
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| PgtError::contract("add_n over an empty node list"))?;
        let mut value = self.nodes[first].value.clone();
        for &x in &xs[1..] {
            value.axpy(S::one(), &self.nodes[x].value)?;
        }
        let needs = xs.iter().any(|&x| self.nodes[x].needs_grad);
        Ok(self.push(Op::AddN { xs: xs.to_vec() }, value, needs, false))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let (loss, probs) = kernels::cross_entropy_forward(&self.nodes[logits].value, label)?;
        let needs = self.nodes[logits].needs_grad;
        Ok(self.push(
            Op::CrossEntropy { logits, label, probs },
            Tensor::scalar(loss),
            needs,
            false,
        ))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let mut acc = S::zero();
        for &v in self.nodes[x].value.data() {
            acc = acc + v * v;
        }
        let needs = self.nodes[x].needs_grad;
        self.push(Op::SumSquares { x }, Tensor::scalar(acc), needs, false)
    }

    fn accumulate(
        adj: &mut [Option<Tensor<S>>],
        meter: &mut usize,
        nodes: &[Node<S>],
        id: NodeId,
        g: Tensor<S>,
    ) -> Result<()> {
        if !nodes[id].needs_grad {
            return Ok(());
        }
        match adj[id].as_mut() {
            Some(a) => a.axpy(S::one(), &g)?,
            None => {
                // Leaf adjoints are the caller's long-lived buffers (parameter
                // gradients, requested input gradients), not activations.
                if !matches!(nodes[id].op, Op::Leaf) {
                    *meter += g.numel();
                }
                adj[id] = Some(g);
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss` node. Returns the adjoints of every
    /// node a gradient reached (on paths with `needs_grad`).
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(PgtError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        let mut meter = 0usize;
        adj[loss] = Some(Tensor::scalar(S::one()));
        meter += 1;
        for i in (0..=loss).rev() {
            let g = match adj[i].clone() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::StopGradient { x } => {
                    // only reachable when truncation is disabled
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, g)?;
                }
                Op::TemporalConv { x, w, b, past } => {
                    let (dx, dw, db, dpast) = kernels::temporal_conv_backward(
                        &g,
                        &nodes[*x].value,
                        &nodes[*w].value,
                        past.map(|p| &nodes[p].value),
                    )?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *w, dw)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *b, db)?;
                    if let (Some(p), Some(dp)) = (past, dpast) {
                        Self::accumulate(&mut adj, &mut meter, nodes, *p, dp)?;
                    }
                }
                Op::PointwiseConv { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::pointwise_conv_backward(&g, &nodes[*x].value, &nodes[*w].value)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *w, dw)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *b, db)?;
                }
                Op::SpatialConv { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::spatial_conv_backward(&g, &nodes[*x].value, &nodes[*w].value)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *w, dw)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *b, db)?;
                }
                Op::Relu { x } => {
                    let dx = kernels::relu_backward(&g, &nodes[*x].value);
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                }
                Op::StepNorm { x, gamma, beta, mean, istd } => {
                    let (dx, dgamma, dbeta) = kernels::step_norm_backward(
                        &g,
                        &nodes[*x].value,
                        &nodes[*gamma].value,
                        mean,
                        istd,
                    )?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *gamma, dgamma)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *beta, dbeta)?;
                }
                Op::TemporalMeanPool { x } => {
                    let t_len = nodes[*x].value.frames();
                    let dx = kernels::temporal_mean_pool_backward(&g, t_len);
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                }
                Op::TemporalMaxPool { x, arg } => {
                    let t_len = nodes[*x].value.frames();
                    let dx = kernels::temporal_max_pool_backward(&g, arg, t_len);
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                }
                Op::GlobalAvgPool { x } => {
                    let dx = kernels::global_avg_pool_backward(&g, nodes[*x].value.shape());
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::dense_backward(&g, &nodes[*x].value, &nodes[*w].value)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *w, dw)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *b, db)?;
                }
                Op::SliceFrames { x, start } => {
                    let xs = nodes[*x].value.shape().to_vec();
                    let fe: usize = xs[1..].iter().product();
                    let mut dx = vec![S::zero(); nodes[*x].value.numel()];
                    for (k, &gv) in g.data().iter().enumerate() {
                        dx[start * fe + k] = gv;
                    }
                    let dx = Tensor::from_vec(xs, dx)?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                }
                Op::Scale { x, c } => {
                    let dx = g.map(|v| *c * v);
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                }
                Op::Add { a, b } => {
                    Self::accumulate(&mut adj, &mut meter, nodes, *a, g.clone())?;
                    Self::accumulate(&mut adj, &mut meter, nodes, *b, g)?;
                }
                Op::AddN { xs } => {
                    for &x in xs {
                        Self::accumulate(&mut adj, &mut meter, nodes, x, g.clone())?;
                    }
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let dl = kernels::cross_entropy_backward(g.scalar_value()?, probs, *label);
                    Self::accumulate(&mut adj, &mut meter, nodes, *logits, dl)?;
                }
                Op::SumSquares { x } => {
                    let gs = g.scalar_value()?;
                    let two = S::from_f64(2.0);
                    let dx = nodes[*x].value.map(|v| two * gs * v);
                    Self::accumulate(&mut adj, &mut meter, nodes, *x, dx)?;
                }
            }
        }
        self.activation_elems += meter;
        Ok(Gradients { adj })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn stop_gradient_blocks_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 1], &[1.0, 2.0]), true);
        let sg = tape.stop_gradient(x);
        let loss = tape.sum_squares(sg);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(sg).is_none());
    }

    #[test]
    fn stop_gradient_passes_when_truncation_disabled() {
        let mut tape = Tape::<f64>::with_truncation(false);
        let x = tape.leaf(t64(&[2, 1], &[1.0, 2.0]), true);
        let sg = tape.stop_gradient(x);
        let loss = tape.sum_squares(sg);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_squares_gradient_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3, 1], &[1.0, -2.0, 0.5]), true);
        let loss = tape.sum_squares(x);
        assert_eq!(tape.value(loss).data()[0], 1.0 + 4.0 + 0.25);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn slice_backward_scatters_into_place() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]), true);
        let s = tape.slice_frames(x, 1, 3).unwrap();
        let loss = tape.sum_squares(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 4.0, 6.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 1], &[1.0, 3.0]), true);
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, -1.0);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_squares(s);
        // s = x, loss = |x|^2, d/dx = 2x through two branches
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 6.0]);
    }

    #[test]
    fn param_leaves_do_not_count_as_activations() {
        let mut tape = Tape::<f64>::new();
        let before = tape.activation_elems();
        tape.param(Tensor::zeros(vec![64]));
        assert_eq!(tape.activation_elems(), before);
        tape.leaf(Tensor::zeros(vec![64]), false);
        assert_eq!(tape.activation_elems(), before + 64);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t64(&[3], &[0.2, -0.1, 0.4]));
        let loss = tape.cross_entropy(w, 2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(w).unwrap();
        let sum: f64 = g.data().iter().sum();
        assert!(sum.abs() < 1e-12);
        assert!(g.data()[2] < 0.0);
        assert!(g.data()[0] > 0.0 && g.data()[1] > 0.0);
    }
}
