//! Inference modes, receptive-field probes and equivalence checks.
//!
//! Long sequences can be classified three ways: one local forward over
//! everything, a step-by-step replay with carried state (matching how a
//! progressively trained model saw its data), or a handful of fixed-length
//! views whose logits are averaged. The replay and the one-pass layout are
//! arithmetic twins, which is what the equivalence check exercises.

use crate::error::{PgtError, Result};
use crate::model::{MarkovState, Model};
use crate::schedule::{make_schedule, steps_for, ProgressiveSchedule};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::train::{center_clip, Dataset};

/// How per-step or per-view logits combine into one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitAggregate {
    Mean,
    Max,
}

impl LogitAggregate {
    pub fn name(self) -> &'static str {
        match self {
            LogitAggregate::Mean => "mean",
            LogitAggregate::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<LogitAggregate> {
        match s {
            "mean" => Ok(LogitAggregate::Mean),
            "max" => Ok(LogitAggregate::Max),
            other => Err(PgtError::config(format!("unknown aggregate `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InferenceMode {
    /// Local forward over the whole sequence.
    OrigLong,
    /// Step-by-step replay with carried state; per-step logits aggregated.
    PgLong { t_prime: usize, aggregate: LogitAggregate },
    /// Evenly spaced fixed-length views, mean logits.
    MultiView { t_prime: usize, views: usize },
}

fn aggregate_logits<S: Scalar>(parts: &[Tensor<S>], how: LogitAggregate) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| PgtError::contract("aggregating zero logit sets"))?;
    let mut out = first.data().to_vec();
    match how {
        LogitAggregate::Mean => {
            for p in &parts[1..] {
                for (o, &v) in out.iter_mut().zip(p.data()) {
                    *o = *o + v;
                }
            }
            let inv = S::one() / S::from_f64(parts.len() as f64);
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        LogitAggregate::Max => {
            for p in &parts[1..] {
                for (o, &v) in out.iter_mut().zip(p.data()) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(first.shape().to_vec(), out)
}

/// Classify one sequence. Returns the logits.
pub fn infer<S: Scalar>(model: &Model<S>, x: &Tensor<S>, mode: InferenceMode) -> Result<Tensor<S>> {
    match mode {
        InferenceMode::OrigLong => {
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone(), false);
            let out = model.forward_local(&mut tape, xn)?;
            Ok(tape.value(out.logits).clone())
        }
        InferenceMode::PgLong { t_prime, aggregate } => {
            let p = steps_for(t_prime, x.frames());
            let schedule = make_schedule(t_prime, p)?;
            let fitted = center_clip(x, schedule.total_frames)?;
            let mut state = MarkovState::initial(model.n_layers());
            let mut step_logits = Vec::with_capacity(p);
            for &(s, e) in &schedule.ranges {
                let mut tape = Tape::new();
                let xs = tape.leaf(fitted.slice_frames(s, e)?, false);
                let out = model.forward_markov_step(&mut tape, xs, &state, false)?;
                step_logits.push(tape.value(out.logits).clone());
                state = out.new_state;
            }
            aggregate_logits(&step_logits, aggregate)
        }
        InferenceMode::MultiView { t_prime, views } => {
            if views == 0 {
                return Err(PgtError::config("multi-view inference needs at least one view"));
            }
            let t = x.frames();
            let mut view_logits = Vec::with_capacity(views);
            let starts: Vec<usize> = if t <= t_prime || views == 1 {
                vec![0]
            } else {
                (0..views)
                    .map(|i| (i as f64 * (t - t_prime) as f64 / (views - 1) as f64).round() as usize)
                    .collect()
            };
            for start in starts {
                let clip = if t <= t_prime {
                    center_clip(x, t_prime)?
                } else {
                    x.slice_frames(start, start + t_prime)?
                };
                let mut tape = Tape::new();
                let xn = tape.leaf(clip, false);
                let out = model.forward_local(&mut tape, xn)?;
                view_logits.push(tape.value(out.logits).clone());
            }
            aggregate_logits(&view_logits, LogitAggregate::Mean)
        }
    }
}

/// Fraction of sequences whose argmax logit matches the label.
pub fn accuracy<S: Scalar>(model: &Model<S>, data: &Dataset<S>, mode: InferenceMode) -> Result<f64> {
    if data.is_empty() {
        return Err(PgtError::domain("accuracy over an empty dataset"));
    }
    let mut hits = 0usize;
    for (x, &label) in data.sequences.iter().zip(&data.labels) {
        let logits = infer(model, x, mode)?;
        if argmax(&logits) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

pub fn argmax<S: Scalar>(logits: &Tensor<S>) -> usize {
    let mut best = 0usize;
    let d = logits.data();
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    best
}

/// Largest |difference| between step-by-step replay and the one-pass layout,
/// over every step's features and logits.
pub fn forward_equivalence_gap<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    schedule: &ProgressiveSchedule,
) -> Result<f64> {
    let mut one = Tape::new();
    let xo = one.leaf(x.clone(), false);
    let onepass = model.forward_onepass(&mut one, xo, schedule)?;

    let mut state = MarkovState::initial(model.n_layers());
    let mut gap = 0.0f64;
    for (p, &(s, e)) in schedule.ranges.iter().enumerate() {
        let mut tape = Tape::new();
        let xs = tape.leaf(x.slice_frames(s, e)?, false);
        let out = model.forward_markov_step(&mut tape, xs, &state, false)?;
        gap = gap.max(
            tape.value(out.logits)
                .max_abs_diff(one.value(onepass.step_logits[p]))?,
        );
        gap = gap.max(
            tape.value(out.features)
                .max_abs_diff(one.value(onepass.step_features[p]))?,
        );
        state = out.new_state;
    }
    Ok(gap)
}

/// Effective receptive field of one frame's output features with respect to
/// every input frame.
#[derive(Debug, Clone)]
pub struct ErfProfile {
    /// Per input frame: L2 magnitude of the input gradient, scaled so the
    /// largest frame is 1. All zeros if no gradient reaches the input.
    pub magnitudes: Vec<f64>,
    /// Frames at or above the threshold.
    pub width: usize,
    pub threshold: f64,
    pub target_frame: usize,
}

/// Backward probe: squared L2 norm of the last layer's features at
/// `target_frame`, differentiated with respect to the input frames, local
/// forward over the whole sequence.
pub fn compute_erf<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    target_frame: usize,
    threshold: f64,
) -> Result<ErfProfile> {
    let t = x.frames();
    if target_frame >= t {
        return Err(PgtError::domain(format!(
            "target frame {target_frame} out of range for {t} frames"
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(PgtError::config(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone(), true);
    let out = model.forward_local(&mut tape, xn)?;
    let target = tape.slice_frames(out.features, target_frame, target_frame + 1)?;
    let loss = tape.sum_squares(target);
    let grads = tape.backward(loss)?;
    let gx = grads.get_or_zeros(xn, x.shape());

    let fe = x.frame_numel();
    let gd = gx.data();
    let mut magnitudes: Vec<f64> = (0..t)
        .map(|f| {
            gd[f * fe..(f + 1) * fe]
                .iter()
                .map(|&v| {
                    let v = v.to_f64_val();
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let peak = magnitudes.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for m in magnitudes.iter_mut() {
            *m /= peak;
        }
    }
    let width = magnitudes.iter().filter(|&&m| m >= threshold && peak > 0.0).count();
    Ok(ErfProfile { magnitudes, width, threshold, target_frame })
}

/// Mean receptive-field width over several sequences; single-sequence widths
/// are noisy for trained models, the average is the stable observable.
pub fn mean_erf_width<S: Scalar>(
    model: &Model<S>,
    xs: &[Tensor<S>],
    target_frame: usize,
    threshold: f64,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(PgtError::domain("receptive field probe needs sequences"));
    }
    let mut total = 0usize;
    for x in xs {
        total += compute_erf(model, x, target_frame, threshold)?.width;
    }
    Ok(total as f64 / xs.len() as f64)
}
