//! Training: progressive and clip/whole-sequence baselines, SGD with
//! momentum, and the warmup + cosine learning-rate schedule.
//!
//! Progressive training runs one backward per step and accumulates gradients
//! in the parameter store; the optimizer sees one update per batch whose
//! gradient covers every step of every sequence in it. Each step's tape is
//! dropped before the next step starts, so activation memory peaks at the
//! size of one step regardless of sequence length.

use std::f64::consts::PI;

use rand::seq::SliceRandom;

use crate::error::{PgtError, Result};
use crate::model::{MarkovState, Model};
use crate::rng::{epoch_stream, STREAM_BATCH, STREAM_FIT, STREAM_SCHEDULE};
use crate::schedule::{dpr_sample, fit_sequence, make_schedule, DprMode, ProgressiveSchedule};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// How per-step losses combine into a sequence loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepLossMode {
    /// Average over steps; sequence weight is independent of step count.
    Mean,
    /// Sum over steps; longer schedules weigh more.
    Sum,
}

impl StepLossMode {
    pub fn name(self) -> &'static str {
        match self {
            StepLossMode::Mean => "mean",
            StepLossMode::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<StepLossMode> {
        match s {
            "mean" => Ok(StepLossMode::Mean),
            "sum" => Ok(StepLossMode::Sum),
            other => Err(PgtError::config(format!("unknown step loss mode `{other}`"))),
        }
    }
}

/// Training layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Steps over the full sequence with carried state and truncation.
    Progressive,
    /// One random step-length clip per sequence per epoch, local forward.
    Clip,
    /// The full sequence in one local forward (no steps, no carried state).
    Integrated,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Progressive => "progressive",
            TrainMode::Clip => "clip",
            TrainMode::Integrated => "integrated",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "progressive" => Ok(TrainMode::Progressive),
            "clip" => Ok(TrainMode::Clip),
            "integrated" => Ok(TrainMode::Integrated),
            other => Err(PgtError::config(format!("unknown train mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub step_loss: StepLossMode,
    pub t_prime: usize,
    pub num_steps: usize,
    pub dpr: DprMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 16,
            grad_clip: None,
            step_loss: StepLossMode::Mean,
            t_prime: 8,
            num_steps: 5,
            dpr: DprMode::Off,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PgtError::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PgtError::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(PgtError::config("weight decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(PgtError::config("batch size must be nonzero"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(PgtError::config(format!(
                "warmup ({}) exceeds total epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(PgtError::config("grad clip must be positive"));
            }
        }
        make_schedule(self.t_prime, self.num_steps)?;
        Ok(())
    }

    pub fn base_schedule(&self) -> Result<ProgressiveSchedule> {
        make_schedule(self.t_prime, self.num_steps)
    }
}

/// Learning rate for `epoch` (0-based): a linear ramp from a tenth of the
/// base rate up to it over the warmup, then half-period cosine decay to zero.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let lr = cfg.lr;
    if epoch < cfg.warmup_epochs {
        let frac = epoch as f64 / cfg.warmup_epochs as f64;
        return lr * (0.1 + 0.9 * frac);
    }
    let span = (cfg.epochs.saturating_sub(cfg.warmup_epochs)).max(1) as f64;
    let progress = (epoch - cfg.warmup_epochs) as f64 / span;
    lr * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
}

/// SGD with classical momentum and coupled weight decay:
/// `v <- m * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<S: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(model: &Model<S>, momentum: f64, weight_decay: f64) -> Self {
        let velocities = model
            .store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape().to_vec()))
            .collect();
        Sgd { momentum, weight_decay, velocities }
    }

    pub fn velocities(&self) -> &[Tensor<S>] {
        &self.velocities
    }

    /// Restore optimizer state (checkpoint resume). Shapes must match.
    pub fn restore_velocities(&mut self, velocities: Vec<Tensor<S>>) -> Result<()> {
        if velocities.len() != self.velocities.len() {
            return Err(PgtError::checkpoint(format!(
                "expected {} velocity tensors, got {}",
                self.velocities.len(),
                velocities.len()
            )));
        }
        for (have, got) in self.velocities.iter().zip(&velocities) {
            if have.shape() != got.shape() {
                return Err(PgtError::checkpoint(format!(
                    "velocity shape {:?} does not match parameter shape {:?}",
                    got.shape(),
                    have.shape()
                )));
            }
        }
        self.velocities = velocities;
        Ok(())
    }

    /// Global gradient norm across all parameters, in f64.
    pub fn grad_norm(model: &Model<S>) -> f64 {
        let mut acc = 0.0f64;
        for e in model.store.entries() {
            for &g in e.grad.data() {
                let g = g.to_f64_val();
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    /// One update from the accumulated gradients. `grad_scale` folds the
    /// batch average in; clipping applies to the scaled gradient's global
    /// norm before weight decay.
    pub fn step(
        &mut self,
        model: &mut Model<S>,
        lr: f64,
        grad_scale: f64,
        clip: Option<f64>,
    ) -> Result<()> {
        let mut scale = grad_scale;
        if let Some(c) = clip {
            let norm = Self::grad_norm(model) * grad_scale;
            if norm > c {
                scale *= c / norm;
            }
        }
        let lr_s = S::from_f64(lr);
        let m_s = S::from_f64(self.momentum);
        let wd_s = S::from_f64(self.weight_decay);
        let scale_s = S::from_f64(scale);
        for (idx, v) in self.velocities.iter_mut().enumerate() {
            let entry = model.store.entry_mut(idx);
            let vd = v.data_mut();
            let pd = entry.value.data_mut();
            for ((v_i, p_i), &g_i) in vd.iter_mut().zip(pd.iter_mut()).zip(entry.grad.data()) {
                let g = scale_s * g_i + wd_s * *p_i;
                *v_i = m_s * *v_i + g;
                *p_i = *p_i - lr_s * *v_i;
            }
        }
        Ok(())
    }
}

/// Labeled sequences with a shared class count.
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub sequences: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self, model: &Model<S>) -> Result<()> {
        if self.sequences.len() != self.labels.len() {
            return Err(PgtError::contract(format!(
                "{} sequences vs {} labels",
                self.sequences.len(),
                self.labels.len()
            )));
        }
        if self.classes != model.spec.classes {
            return Err(PgtError::contract(format!(
                "dataset has {} classes, model {}",
                self.classes, model.spec.classes
            )));
        }
        for (i, x) in self.sequences.iter().enumerate() {
            if x.frame_shape() != model.spec.input {
                return Err(PgtError::shape(format!(
                    "sequence {i} frame shape {:?} does not match model input {:?}",
                    x.frame_shape(),
                    model.spec.input
                )));
            }
        }
        Ok(())
    }
}

/// What one sequence contributed to the accumulated gradient.
#[derive(Debug, Clone)]
pub struct VideoRun {
    /// Combined loss over the sequence (per the step loss mode).
    pub loss: f64,
    pub step_losses: Vec<f64>,
    /// Peak tape elements plus carried state, over the steps.
    pub peak_activation_elems: usize,
}

/// Run one sequence progressively, accumulating parameter gradients.
///
/// The caller owns gradient zeroing; calling this for several sequences in a
/// row accumulates a batch gradient.
pub fn progressive_accumulate<S: Scalar>(
    model: &mut Model<S>,
    x: &Tensor<S>,
    label: usize,
    schedule: &ProgressiveSchedule,
    step_loss: StepLossMode,
) -> Result<VideoRun> {
    if x.frames() != schedule.total_frames {
        return Err(PgtError::schedule(format!(
            "sequence has {} frames, schedule covers {}",
            x.frames(),
            schedule.total_frames
        )));
    }
    let loss_scale = match step_loss {
        StepLossMode::Mean => 1.0 / schedule.num_steps as f64,
        StepLossMode::Sum => 1.0,
    };
    let mut state = MarkovState::initial(model.n_layers());
    let mut step_losses = Vec::with_capacity(schedule.num_steps);
    let mut peak = 0usize;
    for &(s, e) in &schedule.ranges {
        let mut tape = Tape::new();
        let xs = tape.leaf(x.slice_frames(s, e)?, false);
        let out = model.forward_markov_step(&mut tape, xs, &state, false)?;
        let ce = tape.cross_entropy(out.logits, label)?;
        let loss = tape.scale(ce, S::from_f64(loss_scale));
        let grads = tape.backward(loss)?;
        model.store.accumulate(&out.bindings, &grads)?;
        step_losses.push(tape.value(ce).scalar_value()?.to_f64_val());
        peak = peak.max(tape.activation_elems() + state.elems() + out.new_state.elems());
        state = out.new_state;
    }
    let loss = match step_loss {
        StepLossMode::Mean => step_losses.iter().sum::<f64>() / step_losses.len() as f64,
        StepLossMode::Sum => step_losses.iter().sum(),
    };
    Ok(VideoRun { loss, step_losses, peak_activation_elems: peak })
}

/// Run one sequence in a single local forward, accumulating gradients.
pub fn integrated_accumulate<S: Scalar>(
    model: &mut Model<S>,
    x: &Tensor<S>,
    label: usize,
) -> Result<VideoRun> {
    let mut tape = Tape::new();
    let xs = tape.leaf(x.clone(), false);
    let out = model.forward_local(&mut tape, xs)?;
    let ce = tape.cross_entropy(out.logits, label)?;
    let grads = tape.backward(ce)?;
    model.store.accumulate(&out.bindings, &grads)?;
    let loss = tape.value(ce).scalar_value()?.to_f64_val();
    Ok(VideoRun {
        loss,
        step_losses: vec![loss],
        peak_activation_elems: tape.activation_elems(),
    })
}

/// Per-epoch metrics.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean sequence loss over the epoch.
    pub loss: f64,
    /// Mean loss per step position (progressive mode with a fixed schedule).
    pub step_losses: Option<Vec<f64>>,
    pub peak_activation_elems: usize,
}

/// Train for epochs `[from, to)`, calling `on_epoch` after each one.
///
/// Epoch draws come from streams keyed by (seed, epoch), so training can be
/// resumed at any epoch boundary and reproduce exactly the run that never
/// stopped.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut Sgd<S>,
    data: &Dataset<S>,
    cfg: &TrainConfig,
    mode: TrainMode,
    from_epoch: usize,
    to_epoch: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<()> {
    cfg.validate()?;
    data.validate(model)?;
    if data.is_empty() {
        return Err(PgtError::domain("cannot train on an empty dataset"));
    }
    for epoch in from_epoch..to_epoch {
        let stats = train_epoch(model, opt, data, cfg, mode, epoch)?;
        on_epoch(&stats);
    }
    Ok(())
}

/// One epoch of training.
pub fn train_epoch<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut Sgd<S>,
    data: &Dataset<S>,
    cfg: &TrainConfig,
    mode: TrainMode,
    epoch: usize,
) -> Result<EpochStats> {
    let lr = lr_at(cfg, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch_rng = epoch_stream(cfg.seed, STREAM_BATCH, epoch);
    order.shuffle(&mut batch_rng);
    let mut fit_rng = epoch_stream(cfg.seed, STREAM_FIT, epoch);
    let mut dpr_rng = epoch_stream(cfg.seed, STREAM_SCHEDULE, epoch);

    let base = cfg.base_schedule()?;
    let fixed_steps = mode == TrainMode::Progressive && cfg.dpr == DprMode::Off;
    let mut loss_sum = 0.0;
    let mut step_loss_sums = vec![0.0; if fixed_steps { cfg.num_steps } else { 0 }];
    let mut peak = 0usize;

    for batch in order.chunks(cfg.batch_size) {
        model.store.zero_grads();
        for &i in batch {
            let x = &data.sequences[i];
            let label = data.labels[i];
            let run = match mode {
                TrainMode::Progressive => {
                    let schedule = match cfg.dpr {
                        DprMode::Off => base.clone(),
                        m => dpr_sample(m, cfg.t_prime, base.total_frames, &mut dpr_rng)?,
                    };
                    let fitted = fit_sequence(x, schedule.total_frames, &mut fit_rng)?;
                    progressive_accumulate(model, &fitted, label, &schedule, cfg.step_loss)?
                }
                TrainMode::Clip => {
                    let clip = fit_sequence(x, cfg.t_prime, &mut fit_rng)?;
                    integrated_accumulate(model, &clip, label)?
                }
                TrainMode::Integrated => integrated_accumulate(model, x, label)?,
            };
            loss_sum += run.loss;
            if fixed_steps {
                for (acc, l) in step_loss_sums.iter_mut().zip(&run.step_losses) {
                    *acc += l;
                }
            }
            peak = peak.max(run.peak_activation_elems);
        }
        opt.step(model, lr, 1.0 / batch.len() as f64, cfg.grad_clip)?;
    }

    let n = data.len() as f64;
    Ok(EpochStats {
        epoch,
        lr,
        loss: loss_sum / n,
        step_losses: fixed_steps
            .then(|| step_loss_sums.iter().map(|s| s / n).collect()),
        peak_activation_elems: peak,
    })
}

/// Deterministic evaluation-time crop used by clip-style inference: the
/// centered window of `len` frames.
pub fn center_clip<S: Scalar>(x: &Tensor<S>, len: usize) -> Result<Tensor<S>> {
    let t = x.frames();
    if t <= len {
        let mut rng = NoRandom;
        return fit_sequence(x, len, &mut rng);
    }
    let start = (t - len) / 2;
    x.slice_frames(start, start + len)
}

/// RNG that must never be asked for randomness; used where a code path is
/// statically known not to draw (cyclic extension, identity fits).
struct NoRandom;

impl rand::RngCore for NoRandom {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic path drew randomness")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic path drew randomness")
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        let _ = dest;
        unreachable!("deterministic path drew randomness")
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        let _ = dest;
        unreachable!("deterministic path drew randomness")
    }
}
