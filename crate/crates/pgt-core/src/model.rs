//! Model description, parameter storage and graph builders.
//!
//! The same parameter store backs three ways of running a network:
//! a local forward over the whole sequence, a Markov step forward that
//! consumes and produces carried boundary state, and a one-pass layout that
//! records every step of a schedule on a single tape with the cross-step
//! taps wired through stop-gradient. Temporal layers share their weights
//! across all of these; nothing is duplicated per mode.

use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{PgtError, Result};
use crate::layers::{
    classifier_head, markov_step_conv, step_boundary_update, LayerState, MarkovVariant, PoolKind,
};
use crate::rng::{stream, STREAM_INIT};
use crate::schedule::ProgressiveSchedule;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Temporal { kernel: usize, variant: MarkovVariant },
    Pointwise,
    Spatial { kernel: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub channels: usize,
    pub norm: bool,
    pub relu: bool,
}

impl LayerSpec {
    pub fn temporal(channels: usize, variant: MarkovVariant) -> Self {
        LayerSpec { kind: LayerKind::Temporal { kernel: 3, variant }, channels, norm: true, relu: true }
    }

    pub fn pointwise(channels: usize) -> Self {
        LayerSpec { kind: LayerKind::Pointwise, channels, norm: true, relu: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Frame shape: `[C]` or `[C, H, W]`.
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() || self.input.len() == 2 || self.input.len() > 3 {
            return Err(PgtError::config(format!(
                "input frame shape must be [C] or [C, H, W], got {:?}",
                self.input
            )));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(PgtError::config("input dimensions must be nonzero"));
        }
        if self.classes < 2 {
            return Err(PgtError::config(format!(
                "need at least two classes, got {}",
                self.classes
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.channels == 0 {
                return Err(PgtError::config(format!("layer {i} has zero channels")));
            }
            match layer.kind {
                LayerKind::Temporal { kernel, variant } => {
                    if kernel % 2 == 0 || kernel < 3 {
                        return Err(PgtError::config(format!(
                            "layer {i}: temporal kernel must be odd and >= 3, got {kernel}"
                        )));
                    }
                    variant.validate()?;
                }
                LayerKind::Spatial { kernel } => {
                    if kernel % 2 == 0 || kernel < 3 {
                        return Err(PgtError::config(format!(
                            "layer {i}: spatial kernel must be odd and >= 3, got {kernel}"
                        )));
                    }
                    if self.input.len() != 3 {
                        return Err(PgtError::config(format!(
                            "layer {i}: spatial convolution needs [C, H, W] input"
                        )));
                    }
                }
                LayerKind::Pointwise => {}
            }
        }
        Ok(())
    }

    /// Output channels after the last layer.
    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(self.input[0], |l| l.channels)
    }

    /// Canonical one-line-per-field form; the digest and the config writer
    /// both derive from this.
    pub fn canonical_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        let input: Vec<String> = self.input.iter().map(|d| d.to_string()).collect();
        lines.push(format!("input={}", input.join(",")));
        lines.push(format!("classes={}", self.classes));
        for (i, layer) in self.layers.iter().enumerate() {
            let kind = match layer.kind {
                LayerKind::Temporal { kernel, variant } => {
                    let v = match variant {
                        MarkovVariant::Local => "local".to_string(),
                        MarkovVariant::Basic => "basic".to_string(),
                        MarkovVariant::Cumulative { pool } => format!("cumulative:{}", pool.name()),
                        MarkovVariant::Momentum { alpha } => format!("momentum:{alpha}"),
                    };
                    format!("temporal kernel={kernel} variant={v}")
                }
                LayerKind::Pointwise => "pointwise".to_string(),
                LayerKind::Spatial { kernel } => format!("spatial kernel={kernel}"),
            };
            lines.push(format!(
                "layer.{i}={kind} channels={} norm={} relu={}",
                layer.channels, layer.norm as u8, layer.relu as u8
            ));
        }
        lines
    }

    /// SHA-256 over the canonical form; checkpoints refuse to load when the
    /// digest of the stored model differs from the one being restored into.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for line in self.canonical_lines() {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Named parameters in declaration order, with their gradient accumulators.
///
/// Gradients live here rather than on tape nodes so that accumulation across
/// progressive steps survives the disposal of each step's tape.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn declare(&mut self, name: &str, value: Tensor<S>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(PgtError::contract(format!("parameter `{name}` declared twice")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        let idx = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), value, grad });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<S> {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry<S> {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad.fill(S::zero());
        }
    }

    /// Add `grads[i]` into each bound parameter's accumulator.
    pub fn accumulate(&mut self, bindings: &[TapeBinding], grads: &crate::tape::Gradients<S>) -> Result<()> {
        for b in bindings {
            if let Some(g) = grads.get(b.node) {
                self.entries[b.param_index].grad.axpy(S::one(), g)?;
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Where a parameter entered a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeBinding {
    pub param_index: usize,
    pub node: NodeId,
}

/// Lazily binds store entries to tape leaves, once per parameter per tape.
struct Binder {
    nodes: Vec<Option<NodeId>>,
    bindings: Vec<TapeBinding>,
}

impl Binder {
    fn new(n: usize) -> Self {
        Binder { nodes: vec![None; n], bindings: Vec::new() }
    }

    fn node<S: Scalar>(&mut self, store: &ParamStore<S>, tape: &mut Tape<S>, idx: usize) -> NodeId {
        if let Some(n) = self.nodes[idx] {
            return n;
        }
        let n = tape.param(store.entry(idx).value.clone());
        self.nodes[idx] = Some(n);
        self.bindings.push(TapeBinding { param_index: idx, node: n });
        n
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    w: usize,
    b: usize,
    norm: Option<(usize, usize)>,
}

/// Carried boundary states, one slot per layer (empty for layers that carry
/// nothing).
#[derive(Debug, Clone)]
pub struct MarkovState<S: Scalar> {
    pub layers: Vec<LayerState<S>>,
}

impl<S: Scalar> MarkovState<S> {
    pub fn initial(n_layers: usize) -> Self {
        MarkovState { layers: (0..n_layers).map(|_| LayerState::empty()).collect() }
    }

    /// Elements held across a step boundary, for memory accounting.
    pub fn elems(&self) -> usize {
        self.layers.iter().map(LayerState::elems).sum()
    }
}

/// Output of a whole-sequence or single-step forward.
pub struct ForwardOut {
    /// Last layer's sequence features, before pooling.
    pub features: NodeId,
    pub logits: NodeId,
    pub bindings: Vec<TapeBinding>,
}

/// Output of a Markov step forward.
pub struct MarkovStepOut<S: Scalar> {
    pub features: NodeId,
    pub logits: NodeId,
    pub bindings: Vec<TapeBinding>,
    pub new_state: MarkovState<S>,
    /// Tape leaves holding the consumed taps, per layer, when probing.
    pub state_leaves: Vec<Option<NodeId>>,
}

/// Output of the one-pass layout: every step of a schedule on one tape.
pub struct OnePassOut {
    pub step_features: Vec<NodeId>,
    pub step_logits: Vec<NodeId>,
    pub bindings: Vec<TapeBinding>,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub spec: ModelSpec,
    pub store: ParamStore<S>,
    layer_params: Vec<LayerParams>,
    head_w: usize,
    head_b: usize,
}

impl<S: Scalar> Model<S> {
    /// Build a model with deterministic uniform init: weights in
    /// +/- 1/sqrt(fan_in), biases zero, norm scales one.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(seed, STREAM_INIT);
        let mut store = ParamStore::new();
        let mut layer_params = Vec::new();
        let mut c_in = spec.input[0];
        for (i, layer) in spec.layers.iter().enumerate() {
            let c_out = layer.channels;
            let (w_shape, fan_in) = match layer.kind {
                LayerKind::Temporal { kernel, .. } => (vec![kernel, c_in, c_out], kernel * c_in),
                LayerKind::Pointwise => (vec![c_in, c_out], c_in),
                LayerKind::Spatial { kernel } => {
                    (vec![kernel, kernel, c_in, c_out], kernel * kernel * c_in)
                }
            };
            let w = store.declare(&format!("layer{i}.w"), init_uniform(&mut rng, w_shape, fan_in))?;
            let b = store.declare(&format!("layer{i}.b"), Tensor::zeros(vec![c_out]))?;
            let norm = if layer.norm {
                let gamma = store.declare(&format!("layer{i}.gamma"), Tensor::full(vec![c_out], S::one()))?;
                let beta = store.declare(&format!("layer{i}.beta"), Tensor::zeros(vec![c_out]))?;
                Some((gamma, beta))
            } else {
                None
            };
            layer_params.push(LayerParams { w, b, norm });
            c_in = c_out;
        }
        let head_w = store.declare("head.w", init_uniform(&mut rng, vec![c_in, spec.classes], c_in))?;
        let head_b = store.declare("head.b", Tensor::zeros(vec![spec.classes]))?;
        Ok(Model { spec, store, layer_params, head_w, head_b })
    }

    /// Rebuild a model around externally produced parameter values
    /// (checkpoint restore). Shapes must match the spec's declarations.
    pub fn from_values(spec: ModelSpec, values: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let reference: Model<S> = Model::new(spec.clone(), 0)?;
        if values.len() != reference.store.len() {
            return Err(PgtError::checkpoint(format!(
                "expected {} parameters, got {}",
                reference.store.len(),
                values.len()
            )));
        }
        let mut store = ParamStore::new();
        for (entry, (name, value)) in reference.store.entries().iter().zip(values) {
            if entry.name != name {
                return Err(PgtError::checkpoint(format!(
                    "parameter order mismatch: expected `{}`, got `{name}`",
                    entry.name
                )));
            }
            if entry.value.shape() != value.shape() {
                return Err(PgtError::checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    entry.value.shape()
                )));
            }
            store.declare(&name, value)?;
        }
        Ok(Model {
            spec,
            store,
            layer_params: reference.layer_params,
            head_w: reference.head_w,
            head_b: reference.head_b,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.spec.layers.len()
    }

    /// Whole-sequence forward with every temporal layer in local mode
    /// (zero padding at both sequence ends).
    pub fn forward_local(&self, tape: &mut Tape<S>, x: NodeId) -> Result<ForwardOut> {
        let mut binder = Binder::new(self.store.len());
        let mut h = x;
        for (layer, params) in self.spec.layers.iter().zip(&self.layer_params) {
            let w = binder.node(&self.store, tape, params.w);
            let b = binder.node(&self.store, tape, params.b);
            h = match layer.kind {
                LayerKind::Temporal { .. } => tape.temporal_conv(h, w, b, None)?,
                LayerKind::Pointwise => tape.pointwise_conv(h, w, b)?,
                LayerKind::Spatial { .. } => tape.spatial_conv(h, w, b)?,
            };
            h = self.norm_relu(tape, &mut binder, layer, params, h)?;
        }
        let (logits, features) = self.head(tape, &mut binder, h)?;
        Ok(ForwardOut { features, logits, bindings: binder.bindings })
    }

    /// One progressive step: consume `state`, produce the next state.
    ///
    /// `probe_state_grad` exposes each consumed tap as a gradient-tracked
    /// leaf so truncation can be verified from the outside.
    pub fn forward_markov_step(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        state: &MarkovState<S>,
        probe_state_grad: bool,
    ) -> Result<MarkovStepOut<S>> {
        if state.layers.len() != self.n_layers() {
            return Err(PgtError::contract(format!(
                "state has {} layer slots, model has {}",
                state.layers.len(),
                self.n_layers()
            )));
        }
        let mut binder = Binder::new(self.store.len());
        let mut new_state = MarkovState::initial(self.n_layers());
        let mut state_leaves = vec![None; self.n_layers()];
        let mut h = x;
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.layer_params).enumerate() {
            let w = binder.node(&self.store, tape, params.w);
            let b = binder.node(&self.store, tape, params.b);
            h = match layer.kind {
                LayerKind::Temporal { variant, .. } => {
                    let step_input = tape.value(h).clone();
                    let mc = markov_step_conv(
                        tape,
                        h,
                        w,
                        b,
                        state.layers[i].boundary.as_ref(),
                        probe_state_grad,
                    )?;
                    new_state.layers[i] =
                        step_boundary_update(variant, &step_input, &state.layers[i])?;
                    state_leaves[i] = mc.state_leaf;
                    mc.out
                }
                LayerKind::Pointwise => tape.pointwise_conv(h, w, b)?,
                LayerKind::Spatial { .. } => tape.spatial_conv(h, w, b)?,
            };
            h = self.norm_relu(tape, &mut binder, layer, params, h)?;
        }
        let (logits, features) = self.head(tape, &mut binder, h)?;
        Ok(MarkovStepOut {
            features,
            logits,
            bindings: binder.bindings,
            new_state,
            state_leaves,
        })
    }

    /// Every step of `schedule` recorded on one tape, cross-step taps wired
    /// from the live graph through stop-gradient. Arithmetic is identical to
    /// running [`Model::forward_markov_step`] per step, but because the taps
    /// stay connected, disabling truncation on the tape lets gradients flow
    /// across step boundaries; this is the reference layout the step-by-step
    /// path is checked against.
    pub fn forward_onepass(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        schedule: &ProgressiveSchedule,
    ) -> Result<OnePassOut> {
        let frames = tape.value(x).frames();
        if frames != schedule.total_frames {
            return Err(PgtError::schedule(format!(
                "input has {frames} frames, schedule covers {}",
                schedule.total_frames
            )));
        }
        let mut binder = Binder::new(self.store.len());
        let mut hs: Vec<NodeId> = schedule
            .ranges
            .iter()
            .map(|&(s, e)| tape.slice_frames(x, s, e))
            .collect::<Result<_>>()?;
        let t_prime = schedule.t_prime;
        for (layer, params) in self.spec.layers.iter().zip(&self.layer_params) {
            let w = binder.node(&self.store, tape, params.w);
            let b = binder.node(&self.store, tape, params.b);
            match layer.kind {
                LayerKind::Temporal { variant, .. } => {
                    let mut taps: Vec<Option<NodeId>> = Vec::with_capacity(hs.len());
                    let mut momentum: Option<NodeId> = None;
                    let mut outs = Vec::with_capacity(hs.len());
                    for (p, &hp) in hs.iter().enumerate() {
                        let carried = if p == 0 { None } else { taps[p - 1] };
                        let past = match carried {
                            None => None,
                            Some(t) => Some(tape.stop_gradient(t)),
                        };
                        outs.push(tape.temporal_conv(hp, w, b, past)?);
                        let tap = match variant {
                            MarkovVariant::Local => None,
                            MarkovVariant::Basic => {
                                Some(tape.slice_frames(hp, t_prime - 1, t_prime)?)
                            }
                            MarkovVariant::Cumulative { pool: PoolKind::Mean } => {
                                Some(tape.temporal_mean_pool(hp)?)
                            }
                            MarkovVariant::Cumulative { pool: PoolKind::Max } => {
                                Some(tape.temporal_max_pool(hp)?)
                            }
                            MarkovVariant::Momentum { alpha } => {
                                let a_p = tape.temporal_mean_pool(hp)?;
                                let m_p = match momentum {
                                    None => a_p,
                                    Some(m) => {
                                        let alpha_s = S::from_f64(alpha);
                                        let s1 = tape.scale(m, alpha_s);
                                        let s2 = tape.scale(a_p, S::one() - alpha_s);
                                        tape.add(s1, s2)?
                                    }
                                };
                                momentum = Some(m_p);
                                Some(m_p)
                            }
                        };
                        taps.push(tap);
                    }
                    hs = outs;
                }
                LayerKind::Pointwise => {
                    for hp in hs.iter_mut() {
                        *hp = tape.pointwise_conv(*hp, w, b)?;
                    }
                }
                LayerKind::Spatial { .. } => {
                    for hp in hs.iter_mut() {
                        *hp = tape.spatial_conv(*hp, w, b)?;
                    }
                }
            }
            for hp in hs.iter_mut() {
                *hp = self.norm_relu(tape, &mut binder, layer, params, *hp)?;
            }
        }
        let mut step_logits = Vec::with_capacity(hs.len());
        for &hp in &hs {
            let (logits, _) = self.head(tape, &mut binder, hp)?;
            step_logits.push(logits);
        }
        Ok(OnePassOut { step_features: hs, step_logits, bindings: binder.bindings })
    }

    fn norm_relu(
        &self,
        tape: &mut Tape<S>,
        binder: &mut Binder,
        layer: &LayerSpec,
        params: &LayerParams,
        mut h: NodeId,
    ) -> Result<NodeId> {
        if let Some((gamma, beta)) = params.norm {
            let g = binder.node(&self.store, tape, gamma);
            let bb = binder.node(&self.store, tape, beta);
            h = tape.step_norm(h, g, bb)?;
        }
        if layer.relu {
            h = tape.relu(h);
        }
        Ok(h)
    }

    fn head(&self, tape: &mut Tape<S>, binder: &mut Binder, features: NodeId) -> Result<(NodeId, NodeId)> {
        let w = binder.node(&self.store, tape, self.head_w);
        let b = binder.node(&self.store, tape, self.head_b);
        let logits = classifier_head(tape, features, w, b)?;
        Ok((logits, features))
    }
}

fn init_uniform<S: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;

    fn toy_spec(variant: MarkovVariant) -> ModelSpec {
        ModelSpec {
            input: vec![2],
            classes: 3,
            layers: vec![LayerSpec::temporal(4, variant), LayerSpec::temporal(3, variant)],
        }
    }

    fn ramp(t: usize, c: usize) -> Tensor<f64> {
        let data = (0..t * c).map(|i| (i as f64) * 0.1 - 0.7).collect();
        Tensor::from_vec(vec![t, c], data).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::<f64>::new(toy_spec(MarkovVariant::Basic), 7).unwrap();
        let b = Model::<f64>::new(toy_spec(MarkovVariant::Basic), 7).unwrap();
        let c = Model::<f64>::new(toy_spec(MarkovVariant::Basic), 8).unwrap();
        for (ea, eb) in a.store.entries().iter().zip(b.store.entries()) {
            assert!(ea.value.bit_eq(&eb.value), "{} differs across same-seed inits", ea.name);
        }
        let w0 = &a.store.get("layer0.w").unwrap().value;
        let w0c = &c.store.get("layer0.w").unwrap().value;
        assert!(!w0.bit_eq(w0c));
    }

    #[test]
    fn forward_shapes_and_param_names() {
        let model = Model::<f64>::new(toy_spec(MarkovVariant::Basic), 1).unwrap();
        assert_eq!(
            model.store.entries().iter().map(|e| e.name.as_str()).collect::<Vec<_>>(),
            vec![
                "layer0.w", "layer0.b", "layer0.gamma", "layer0.beta",
                "layer1.w", "layer1.b", "layer1.gamma", "layer1.beta",
                "head.w", "head.b",
            ]
        );
        let mut tape = Tape::new();
        let x = tape.leaf(ramp(6, 2), false);
        let out = model.forward_local(&mut tape, x).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[3]);
        assert_eq!(tape.value(out.features).shape(), &[6, 3]);
        // one binding per distinct parameter
        assert_eq!(out.bindings.len(), model.store.len());
    }

    #[test]
    fn single_step_markov_equals_local_forward() {
        let model = Model::<f64>::new(toy_spec(MarkovVariant::Momentum { alpha: 0.5 }), 3).unwrap();
        let x = ramp(8, 2);

        let mut t1 = Tape::new();
        let x1 = t1.leaf(x.clone(), false);
        let local = model.forward_local(&mut t1, x1).unwrap();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(x, false);
        let state = MarkovState::initial(model.n_layers());
        let step = model.forward_markov_step(&mut t2, x2, &state, false).unwrap();

        assert!(t1.value(local.logits).bit_eq(t2.value(step.logits)));
        assert!(t1.value(local.features).bit_eq(t2.value(step.features)));
    }

    #[test]
    fn step_by_step_matches_onepass_layout_bitwise() {
        for variant in [
            MarkovVariant::Local,
            MarkovVariant::Basic,
            MarkovVariant::Cumulative { pool: PoolKind::Mean },
            MarkovVariant::Cumulative { pool: PoolKind::Max },
            MarkovVariant::Momentum { alpha: 0.5 },
        ] {
            let model = Model::<f64>::new(toy_spec(variant), 11).unwrap();
            let schedule = make_schedule(4, 3).unwrap();
            let x = ramp(schedule.total_frames, 2);

            let mut one = Tape::new();
            let xo = one.leaf(x.clone(), false);
            let onepass = model.forward_onepass(&mut one, xo, &schedule).unwrap();

            let mut state = MarkovState::initial(model.n_layers());
            for (p, &(s, e)) in schedule.ranges.iter().enumerate() {
                let mut tape = Tape::new();
                let xs = tape.leaf(x.slice_frames(s, e).unwrap(), false);
                let step = model.forward_markov_step(&mut tape, xs, &state, false).unwrap();
                state = step.new_state;
                assert!(
                    tape.value(step.logits).bit_eq(one.value(onepass.step_logits[p])),
                    "step {p} logits diverge for {variant:?}"
                );
            }
        }
    }

    #[test]
    fn digest_tracks_spec_changes() {
        let a = toy_spec(MarkovVariant::Basic).digest();
        let b = toy_spec(MarkovVariant::Basic).digest();
        let c = toy_spec(MarkovVariant::Momentum { alpha: 0.5 }).digest();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut spec = toy_spec(MarkovVariant::Basic);
        spec.classes = 4;
        assert_ne!(a, spec.digest());
    }

    #[test]
    fn from_values_round_trips_and_rejects_mismatch() {
        let model = Model::<f32>::new(toy_spec(MarkovVariant::Basic), 9).unwrap();
        let values: Vec<_> = model
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        let restored = Model::from_values(model.spec.clone(), values.clone()).unwrap();
        for (a, b) in model.store.entries().iter().zip(restored.store.entries()) {
            assert!(a.value.bit_eq(&b.value));
        }
        let mut bad = values;
        bad.swap(0, 1);
        assert!(Model::from_values(model.spec.clone(), bad).is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_shapes() {
        let mut spec = toy_spec(MarkovVariant::Basic);
        spec.classes = 1;
        assert!(spec.validate().is_err());
        let mut spec = toy_spec(MarkovVariant::Basic);
        spec.layers[0].kind = LayerKind::Temporal { kernel: 4, variant: MarkovVariant::Basic };
        assert!(spec.validate().is_err());
        let mut spec = toy_spec(MarkovVariant::Basic);
        spec.layers[0].kind = LayerKind::Spatial { kernel: 3 };
        assert!(spec.validate().is_err(), "spatial layer needs [C, H, W] input");
    }
}
