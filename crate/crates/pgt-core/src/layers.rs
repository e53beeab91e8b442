//! Temporal layer semantics: local convolution, the Markov step variants,
//! and the boundary state they carry between steps.
//!
//! A temporal layer in step mode consumes a carried tap as the frame just
//! before its first input frame, and produces a new tap for the next step
//! from its own input stream:
//!
//! * basic: the last input frame of the step;
//! * cumulative: a pool (mean or max) over all input frames of the step;
//! * momentum: a running average of per-step mean aggregates, seeded with
//!   the first step's aggregate.
//!
//! Consumed taps are always wrapped in stop-gradient, so gradients never
//! cross a step boundary while truncation is enabled.

use crate::error::{PgtError, Result};
use crate::kernels;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Mean => "mean",
            PoolKind::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<PoolKind> {
        match s {
            "mean" => Ok(PoolKind::Mean),
            "max" => Ok(PoolKind::Max),
            other => Err(PgtError::config(format!("unknown pool kind `{other}`"))),
        }
    }
}

/// How a temporal layer forms the tap it carries to the next step.
/// `Local` carries nothing: under progressive training the layer sees a zero
/// boundary every step, the ablation of truncation without any carried state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarkovVariant {
    Local,
    Basic,
    Cumulative { pool: PoolKind },
    Momentum { alpha: f64 },
}

impl MarkovVariant {
    pub fn validate(&self) -> Result<()> {
        if let MarkovVariant::Momentum { alpha } = self {
            if !(0.0..=1.0).contains(alpha) || !alpha.is_finite() {
                return Err(PgtError::config(format!(
                    "momentum alpha must be in [0, 1], got {alpha}"
                )));
            }
        }
        Ok(())
    }
}

/// Boundary state one temporal layer carries across a step boundary.
#[derive(Debug, Clone, Default)]
pub struct LayerState<S: Scalar> {
    /// Tap the next step consumes; `None` before the first step.
    pub boundary: Option<Tensor<S>>,
    /// Running aggregate of the momentum variant.
    pub momentum: Option<Tensor<S>>,
}

impl<S: Scalar> LayerState<S> {
    pub fn empty() -> Self {
        LayerState { boundary: None, momentum: None }
    }

    /// Elements held across the boundary, for memory accounting.
    pub fn elems(&self) -> usize {
        self.boundary.as_ref().map_or(0, Tensor::numel)
            + self.momentum.as_ref().map_or(0, Tensor::numel)
    }
}

/// Pool a step's input frames into one frame-shaped aggregate.
pub fn cmco_aggregate<S: Scalar>(step_input: &Tensor<S>, pool: PoolKind) -> Result<Tensor<S>> {
    match pool {
        PoolKind::Mean => kernels::temporal_mean_pool(step_input),
        PoolKind::Max => kernels::temporal_max_pool(step_input).map(|(t, _)| t),
    }
}

/// Momentum update of the running aggregate: `alpha * m + (1 - alpha) * a`,
/// seeded with the first aggregate when there is no previous value.
///
/// The expression is spelled exactly like its tape counterpart (scale, scale,
/// add), so step-by-step and whole-sequence evaluations agree bitwise.
pub fn pmco_update<S: Scalar>(
    prev: Option<&Tensor<S>>,
    aggregate: &Tensor<S>,
    alpha: f64,
) -> Result<Tensor<S>> {
    let m = match prev {
        None => aggregate.clone(),
        Some(m) => {
            if m.shape() != aggregate.shape() {
                return Err(PgtError::shape(format!(
                    "momentum state {:?} vs aggregate {:?}",
                    m.shape(),
                    aggregate.shape()
                )));
            }
            let a = S::from_f64(alpha);
            let one_minus = S::one() - a;
            let data = m
                .data()
                .iter()
                .zip(aggregate.data().iter())
                .map(|(&mv, &av)| a * mv + one_minus * av)
                .collect();
            Tensor::from_vec(m.shape().to_vec(), data)?
        }
    };
    Ok(m)
}

/// Next boundary state of a temporal layer, from the step's input stream.
pub fn step_boundary_update<S: Scalar>(
    variant: MarkovVariant,
    step_input: &Tensor<S>,
    prev: &LayerState<S>,
) -> Result<LayerState<S>> {
    match variant {
        MarkovVariant::Local => Ok(LayerState::empty()),
        MarkovVariant::Basic => {
            let t = step_input.frames();
            if t == 0 {
                return Err(PgtError::domain("boundary update on an empty step"));
            }
            Ok(LayerState { boundary: Some(step_input.frame(t - 1)?), momentum: None })
        }
        MarkovVariant::Cumulative { pool } => Ok(LayerState {
            boundary: Some(cmco_aggregate(step_input, pool)?),
            momentum: None,
        }),
        MarkovVariant::Momentum { alpha } => {
            let a = cmco_aggregate(step_input, PoolKind::Mean)?;
            let m = pmco_update(prev.momentum.as_ref(), &a, alpha)?;
            Ok(LayerState { boundary: Some(m.clone()), momentum: Some(m) })
        }
    }
}

/// Temporal convolution over a whole sequence, zero-padded at both ends.
pub fn local_temporal_conv<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    tape.temporal_conv(x, w, b, None)
}

/// A Markov step convolution recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct MarkovConv {
    pub out: NodeId,
    /// Leaf holding the consumed carried tap, when one was consumed.
    /// Its adjoint is what truncation checks measure.
    pub state_leaf: Option<NodeId>,
}

/// Temporal convolution over one step, consuming a carried boundary tap.
///
/// The tap enters the tape as a detached leaf wrapped in stop-gradient.
/// `probe_state_grad` requests the leaf's adjoint so callers can observe
/// whether any gradient reaches the carried state.
pub fn markov_step_conv<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    boundary: Option<&Tensor<S>>,
    probe_state_grad: bool,
) -> Result<MarkovConv> {
    match boundary {
        None => {
            let out = tape.temporal_conv(x, w, b, None)?;
            Ok(MarkovConv { out, state_leaf: None })
        }
        Some(tap) => {
            let leaf = tape.leaf(tap.clone(), probe_state_grad);
            let stopped = tape.stop_gradient(leaf);
            let out = tape.temporal_conv(x, w, b, Some(stopped))?;
            Ok(MarkovConv { out, state_leaf: Some(leaf) })
        }
    }
}

/// Classification head: global average pool, then an affine map to logits.
pub fn classifier_head<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let pooled = tape.global_avg_pool(x)?;
    tape.dense(pooled, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn markov_step_conv_consumes_carried_tap() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3, 1], &[1.0, 2.0, 3.0]), false);
        let w = tape.param(t64(&[3, 1, 1], &[1.0 / 3.0; 3]));
        let b = tape.param(t64(&[1], &[0.0]));
        let tap = t64(&[1], &[4.0]);
        let mc = markov_step_conv(&mut tape, x, w, b, Some(&tap), true).unwrap();
        let y = tape.value(mc.out);
        let expect = [7.0 / 3.0, 2.0, 5.0 / 3.0];
        for (a, e) in y.data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn carried_state_receives_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3, 1], &[1.0, 2.0, 3.0]), false);
        let w = tape.param(t64(&[3, 1, 1], &[0.5, -0.25, 1.0]));
        let b = tape.param(t64(&[1], &[0.1]));
        let tap = t64(&[1], &[4.0]);
        let mc = markov_step_conv(&mut tape, x, w, b, Some(&tap), true).unwrap();
        let loss = tape.sum_squares(mc.out);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(mc.state_leaf.unwrap()).is_none());
        // the shared weights still get a gradient through the same frames
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn disabled_truncation_leaks_gradient_into_the_tap() {
        let mut tape = Tape::<f64>::with_truncation(false);
        let x = tape.leaf(t64(&[3, 1], &[1.0, 2.0, 3.0]), false);
        let w = tape.param(t64(&[3, 1, 1], &[0.5, -0.25, 1.0]));
        let b = tape.param(t64(&[1], &[0.1]));
        let tap = t64(&[1], &[4.0]);
        let mc = markov_step_conv(&mut tape, x, w, b, Some(&tap), true).unwrap();
        let loss = tape.sum_squares(mc.out);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(mc.state_leaf.unwrap()).unwrap();
        assert!(g.data()[0].abs() > 0.0);
    }

    #[test]
    fn basic_boundary_is_last_input_frame() {
        let x = t64(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let st = step_boundary_update(MarkovVariant::Basic, &x, &LayerState::empty()).unwrap();
        assert_eq!(st.boundary.unwrap().data(), &[7.0, 8.0]);
    }

    #[test]
    fn cumulative_boundary_pools_all_frames() {
        let x = t64(&[3, 1], &[1.0, 5.0, 3.0]);
        let mean = step_boundary_update(
            MarkovVariant::Cumulative { pool: PoolKind::Mean },
            &x,
            &LayerState::empty(),
        )
        .unwrap();
        assert_eq!(mean.boundary.unwrap().data(), &[3.0]);
        let max = step_boundary_update(
            MarkovVariant::Cumulative { pool: PoolKind::Max },
            &x,
            &LayerState::empty(),
        )
        .unwrap();
        assert_eq!(max.boundary.unwrap().data(), &[5.0]);
    }

    #[test]
    fn momentum_boundary_follows_the_recurrence() {
        // step aggregates 1, 2, 4 with alpha = 0.5:
        // after step 1 the state is the seed 1, the tap consumed by step 3
        // is 0.5 * 1 + 0.5 * 2 = 1.5, and the final state is 2.75
        let variant = MarkovVariant::Momentum { alpha: 0.5 };
        let steps = [
            t64(&[2, 1], &[1.0, 1.0]),
            t64(&[2, 1], &[2.0, 2.0]),
            t64(&[2, 1], &[4.0, 4.0]),
        ];
        let mut st = LayerState::empty();
        let mut consumed = Vec::new();
        for x in &steps {
            consumed.push(st.boundary.as_ref().map(|t| t.data()[0]));
            st = step_boundary_update(variant, x, &st).unwrap();
        }
        assert_eq!(consumed, vec![None, Some(1.0), Some(1.5)]);
        assert_eq!(st.boundary.unwrap().data(), &[2.75]);
    }

    #[test]
    fn momentum_alpha_validation() {
        assert!(MarkovVariant::Momentum { alpha: 0.5 }.validate().is_ok());
        assert!(MarkovVariant::Momentum { alpha: -0.1 }.validate().is_err());
        assert!(MarkovVariant::Momentum { alpha: 1.5 }.validate().is_err());
    }
}
