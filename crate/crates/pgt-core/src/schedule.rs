//! Progressive schedules: how a long sequence splits into training steps.
//!
//! A schedule with step length `T'` and `P` steps covers `T = (T' - 1) * P + 1`
//! frames; consecutive steps overlap by exactly one frame, which is the frame
//! the carried boundary state refers to.
//!
//! Dynamic regularization varies `T'` per sample: a draw picks the step
//! length from a small choice set around the base value, re-derives the step
//! count so the covered length stays near the base length, and the sequence
//! is then cropped or cyclically extended to fit.

use rand::Rng;

use crate::error::{PgtError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressiveSchedule {
    pub t_prime: usize,
    pub num_steps: usize,
    pub total_frames: usize,
    /// Half-open frame ranges, one per step, overlapping by one frame.
    pub ranges: Vec<(usize, usize)>,
}

/// Build the schedule for `p` steps of length `t_prime`.
pub fn make_schedule(t_prime: usize, p: usize) -> Result<ProgressiveSchedule> {
    if t_prime < 2 {
        return Err(PgtError::schedule(format!(
            "step length must be at least 2, got {t_prime}"
        )));
    }
    if p < 1 {
        return Err(PgtError::schedule("schedule needs at least one step"));
    }
    let total_frames = (t_prime - 1) * p + 1;
    let ranges = (0..p)
        .map(|i| {
            let s = i * (t_prime - 1);
            (s, s + t_prime)
        })
        .collect();
    Ok(ProgressiveSchedule { t_prime, num_steps: p, total_frames, ranges })
}

/// Dynamic step-length regularization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DprMode {
    Off,
    /// Step length varies around the base: {0.75, 1.0, 1.25} x base.
    A,
    /// Step length varies below the base: {0.5, 0.75, 1.0} x base.
    B,
}

impl DprMode {
    pub fn name(self) -> &'static str {
        match self {
            DprMode::Off => "off",
            DprMode::A => "a",
            DprMode::B => "b",
        }
    }

    pub fn parse(s: &str) -> Result<DprMode> {
        match s {
            "off" => Ok(DprMode::Off),
            "a" => Ok(DprMode::A),
            "b" => Ok(DprMode::B),
            other => Err(PgtError::config(format!("unknown dpr mode `{other}`"))),
        }
    }

    fn factors(self) -> Option<[f64; 3]> {
        match self {
            DprMode::Off => None,
            DprMode::A => Some([0.75, 1.0, 1.25]),
            DprMode::B => Some([0.5, 0.75, 1.0]),
        }
    }

    /// The step lengths a draw can produce, rounded half away from zero.
    /// Errors if any candidate falls below the minimum usable length.
    pub fn candidates(self, t_prime_base: usize) -> Result<Vec<usize>> {
        let factors = match self.factors() {
            None => return Ok(vec![t_prime_base]),
            Some(f) => f,
        };
        let mut out = Vec::with_capacity(3);
        for f in factors {
            let t = (f * t_prime_base as f64).round() as usize;
            if t < 2 {
                return Err(PgtError::schedule(format!(
                    "base step length {t_prime_base} yields candidate {t} below 2"
                )));
            }
            out.push(t);
        }
        Ok(out)
    }
}

/// Step count for a drawn step length, keeping the covered frames close to
/// the base length: the nearest integer to `(t_base - 1) / (t_prime - 1)`,
/// never below one step.
pub fn steps_for(t_prime: usize, t_base: usize) -> usize {
    let p = ((t_base as f64 - 1.0) / (t_prime as f64 - 1.0)).round() as usize;
    p.max(1)
}

/// One regularization draw: a schedule whose covered length deviates from
/// `t_base` by at most `t_prime - 1` frames.
pub fn dpr_sample<R: Rng>(
    mode: DprMode,
    t_prime_base: usize,
    t_base: usize,
    rng: &mut R,
) -> Result<ProgressiveSchedule> {
    let candidates = mode.candidates(t_prime_base)?;
    let t_prime = if candidates.len() == 1 {
        candidates[0]
    } else {
        candidates[rng.gen_range(0..candidates.len())]
    };
    make_schedule(t_prime, steps_for(t_prime, t_base))
}

/// Fit a sequence to exactly `target` frames: identity when it already fits,
/// cyclic extension when too short, a uniformly placed contiguous crop when
/// too long.
pub fn fit_sequence<S: Scalar, R: Rng>(
    x: &Tensor<S>,
    target: usize,
    rng: &mut R,
) -> Result<Tensor<S>> {
    let t = x.frames();
    if t == 0 || target == 0 {
        return Err(PgtError::domain("cannot fit an empty sequence"));
    }
    if t == target {
        return Ok(x.clone());
    }
    if t > target {
        let start = rng.gen_range(0..=t - target);
        return x.slice_frames(start, start + target);
    }
    let fe = x.frame_numel();
    let xd = x.data();
    let mut data = Vec::with_capacity(target * fe);
    for i in 0..target {
        let src = i % t;
        data.extend_from_slice(&xd[src * fe..(src + 1) * fe]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = target;
    Tensor::from_vec(shape, data)
}
