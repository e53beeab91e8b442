//! Runnable invariant suite over small random models.
//!
//! Each check returns a [`CheckReport`] with a stable id so failures can be
//! named precisely. The suite is deterministic in the seed. The
//! `break_truncation` hook disables stop-gradient in the one-pass layout and
//! exists so the truncation check can be seen to fail when truncation is
//! actually broken.

use rand::Rng;

use crate::error::{PgtError, Result};
use crate::eval::{forward_equivalence_gap, infer, InferenceMode, LogitAggregate};
use crate::fd::{central_diff, max_rel_err};
use crate::layers::{MarkovVariant, PoolKind};
use crate::model::{LayerSpec, MarkovState, Model, ModelSpec};
use crate::rng::{stream, STREAM_VERIFY};
use crate::schedule::{dpr_sample, make_schedule, steps_for, DprMode, ProgressiveSchedule};
use crate::tape::Tape;
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::train::{integrated_accumulate, progressive_accumulate, StepLossMode};

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Disable stop-gradient in the one-pass layout (negative control).
    pub break_truncation: bool,
    /// Random models drawn for the forward-equivalence check.
    pub equivalence_models: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, break_truncation: false, equivalence_models: 12 }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub id: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

/// Forward agreement tolerance between the step-by-step and one-pass layouts.
pub fn equivalence_tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F64 => 1e-10,
        Dtype::F32 => 1e-5,
    }
}

fn random_variant<R: Rng>(rng: &mut R, allow_local: bool) -> MarkovVariant {
    let lo = if allow_local { 0 } else { 1 };
    match rng.gen_range(lo..5) {
        0 => MarkovVariant::Local,
        1 => MarkovVariant::Basic,
        2 => MarkovVariant::Cumulative { pool: PoolKind::Mean },
        3 => MarkovVariant::Cumulative { pool: PoolKind::Max },
        _ => MarkovVariant::Momentum { alpha: [0.3, 0.5, 0.7][rng.gen_range(0..3)] },
    }
}

fn random_spec<R: Rng>(rng: &mut R, allow_local: bool) -> ModelSpec {
    let n_layers = rng.gen_range(1..=4);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut layer = LayerSpec::temporal(rng.gen_range(3..=16), random_variant(rng, allow_local));
        layer.norm = rng.gen_bool(0.7);
        layer.relu = rng.gen_bool(0.8);
        layers.push(layer);
    }
    ModelSpec { input: vec![rng.gen_range(2..=5)], classes: rng.gen_range(2..=6), layers }
}

/// A random stack of one to four temporal layers (any operator variant,
/// channels up to 16).
pub fn random_model_spec<R: Rng>(rng: &mut R) -> ModelSpec {
    random_spec(rng, true)
}

/// Like [`random_model_spec`], but every layer carries a boundary tap, so
/// truncation checks cannot pass vacuously.
pub fn random_tap_model_spec<R: Rng>(rng: &mut R) -> ModelSpec {
    random_spec(rng, false)
}

/// Uniform values in +/- 1.
pub fn random_sequence<S: Scalar, R: Rng>(
    rng: &mut R,
    frames: usize,
    frame_shape: &[usize],
) -> Result<Tensor<S>> {
    let mut shape = vec![frames];
    shape.extend_from_slice(frame_shape);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(rng.gen_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data)
}

fn flat_params<S: Scalar>(model: &Model<S>) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.store.total_elems());
    for e in model.store.entries() {
        out.extend(e.value.data().iter().map(|v| v.to_f64_val()));
    }
    out
}

fn flat_grads<S: Scalar>(model: &Model<S>) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.store.total_elems());
    for e in model.store.entries() {
        out.extend(e.grad.data().iter().map(|v| v.to_f64_val()));
    }
    out
}

fn set_flat_params<S: Scalar>(model: &mut Model<S>, flat: &[f64]) -> Result<()> {
    if flat.len() != model.store.total_elems() {
        return Err(PgtError::contract("flat parameter vector has the wrong length"));
    }
    let mut off = 0;
    for i in 0..model.store.len() {
        let e = model.store.entry_mut(i);
        let n = e.value.numel();
        let data: Vec<S> = flat[off..off + n].iter().map(|&v| S::from_f64(v)).collect();
        e.value = Tensor::from_vec(e.value.shape().to_vec(), data)?;
        off += n;
    }
    Ok(())
}

/// The state each progressive step consumes, from one clean replay.
fn consumed_states<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    schedule: &ProgressiveSchedule,
) -> Result<Vec<MarkovState<S>>> {
    let mut consumed = Vec::with_capacity(schedule.num_steps);
    let mut state = MarkovState::initial(model.n_layers());
    for &(s, e) in &schedule.ranges {
        let mut tape = Tape::new();
        let xs = tape.leaf(x.slice_frames(s, e)?, false);
        let out = model.forward_markov_step(&mut tape, xs, &state, false)?;
        consumed.push(state);
        state = out.new_state;
    }
    Ok(consumed)
}

pub fn run_suite<S: Scalar>(opts: &VerifyOptions) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_forward_equivalence::<S>(opts)?,
        check_truncation::<S>(opts)?,
        check_gradient_oracle(opts)?,
        check_schedule_bounds(opts)?,
        check_memory_scaling::<S>(opts)?,
        check_degenerate_identity(opts)?,
    ])
}

/// Step-by-step replay and the one-pass layout produce the same forward
/// values on random models.
fn check_forward_equivalence<S: Scalar>(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut rng = stream(opts.seed, STREAM_VERIFY);
    let mut worst = 0.0f64;
    for _ in 0..opts.equivalence_models {
        let spec = random_model_spec(&mut rng);
        let model = Model::<S>::new(spec, rng.gen())?;
        let t_prime = [2usize, 4, 8][rng.gen_range(0..3)];
        let schedule = make_schedule(t_prime, rng.gen_range(1..=5))?;
        let x = random_sequence::<S, _>(&mut rng, schedule.total_frames, &model.spec.input)?;
        let gap = forward_equivalence_gap(&model, &x, &schedule)?;
        if !gap.is_finite() {
            return Err(PgtError::numeric("forward equivalence gap is not finite"));
        }
        worst = worst.max(gap);
    }
    let tol = equivalence_tolerance(S::DTYPE);
    Ok(CheckReport {
        id: "forward-equivalence",
        passed: worst <= tol,
        detail: format!(
            "max forward gap {worst:.3e} over {} random models, tolerance {tol:.0e}",
            opts.equivalence_models
        ),
    })
}

/// Gradient into every carried state is exactly zero, and each step's loss
/// produces exactly the parameter gradients of that step replayed alone.
fn check_truncation<S: Scalar>(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut rng = stream(opts.seed ^ 0x2b, STREAM_VERIFY);
    let mut worst_leak = 0.0f64;
    let mut isolation_ok = true;
    let runs = 6;
    for _ in 0..runs {
        let spec = random_tap_model_spec(&mut rng);
        let model = Model::<S>::new(spec, rng.gen())?;
        let t_prime = [2usize, 4, 8][rng.gen_range(0..3)];
        let schedule = make_schedule(t_prime, rng.gen_range(2..=4))?;
        let x = random_sequence::<S, _>(&mut rng, schedule.total_frames, &model.spec.input)?;
        let label = rng.gen_range(0..model.spec.classes);

        // Probe leak: loss of the last step, gradient into every state leaf.
        let mut tape = Tape::with_truncation(!opts.break_truncation);
        let mut state = MarkovState::initial(model.n_layers());
        let mut leaves = Vec::new();
        let mut last_logits = 0;
        for &(s, e) in &schedule.ranges {
            let xs = tape.leaf(x.slice_frames(s, e)?, false);
            let out = model.forward_markov_step(&mut tape, xs, &state, true)?;
            leaves.extend(out.state_leaves.iter().flatten().copied());
            last_logits = out.logits;
            state = out.new_state;
        }
        let loss = tape.cross_entropy(last_logits, label)?;
        let grads = tape.backward(loss)?;
        for leaf in leaves {
            if let Some(g) = grads.get(leaf) {
                worst_leak = worst_leak.max(g.max_abs());
            }
        }

        // Isolation: per-step loss on the one-pass layout vs the step alone.
        let mut onepass = Tape::with_truncation(!opts.break_truncation);
        let xs = onepass.leaf(x.clone(), false);
        let one = model.forward_onepass(&mut onepass, xs, &schedule)?;
        let consumed = consumed_states(&model, &x, &schedule)?;
        for (p, &(s, e)) in schedule.ranges.iter().enumerate() {
            let ce = onepass.cross_entropy(one.step_logits[p], label)?;
            let g_one = onepass.backward(ce)?;

            let mut solo = Tape::new();
            let xp = solo.leaf(x.slice_frames(s, e)?, false);
            let out = model.forward_markov_step(&mut solo, xp, &consumed[p], false)?;
            let ce_solo = solo.cross_entropy(out.logits, label)?;
            let g_solo = solo.backward(ce_solo)?;

            for (b_one, b_solo) in one.bindings.iter().zip(&out.bindings) {
                let a = g_one.get(b_one.node);
                let b = g_solo.get(b_solo.node);
                match (a, b) {
                    (None, None) => {}
                    (Some(a), Some(b)) if a.bit_eq(b) => {}
                    _ => isolation_ok = false,
                }
            }
        }
    }
    let passed = worst_leak == 0.0 && isolation_ok;
    Ok(CheckReport {
        id: "truncation-isolation",
        passed,
        detail: format!(
            "max gradient into carried state {worst_leak:.3e} over {runs} runs; per-step \
             gradients {} the isolated replay",
            if isolation_ok { "match" } else { "DIFFER from" }
        ),
    })
}

/// Minimum kink distance over a progressive replay (infinite when the model
/// has no relu).
fn relu_margin<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    schedule: &ProgressiveSchedule,
) -> Result<f64> {
    let mut state = MarkovState::initial(model.n_layers());
    let mut worst = f64::INFINITY;
    for &(s, e) in &schedule.ranges {
        let mut tape = Tape::new();
        let xs = tape.leaf(x.slice_frames(s, e)?, false);
        let out = model.forward_markov_step(&mut tape, xs, &state, false)?;
        worst = worst.min(tape.min_relu_input_margin().unwrap_or(f64::INFINITY));
        state = out.new_state;
    }
    Ok(worst)
}

/// Accumulated progressive gradients against central finite differences of
/// the total loss with carried states frozen (always f64).
fn check_gradient_oracle(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut rng = stream(opts.seed ^ 0x9d, STREAM_VERIFY);
    let mut worst = 0.0f64;
    let eps = 1e-5;
    let variants = [
        MarkovVariant::Basic,
        MarkovVariant::Cumulative { pool: PoolKind::Max },
        MarkovVariant::Momentum { alpha: 0.5 },
    ];
    for variant in variants {
        let spec = ModelSpec {
            input: vec![2],
            classes: 3,
            layers: vec![LayerSpec::temporal(3, variant), LayerSpec::temporal(4, variant)],
        };
        let mut model = Model::<f64>::new(spec, rng.gen())?;
        let schedule = make_schedule(4, 3)?;
        let label = rng.gen_range(0..3);

        // The difference quotient is only meaningful on one smooth branch;
        // draw inputs until every relu sits well clear of its kink.
        let mut x = random_sequence::<f64, _>(&mut rng, schedule.total_frames, &model.spec.input)?;
        let mut tries = 0;
        while relu_margin(&model, &x, &schedule)? < 100.0 * eps {
            tries += 1;
            if tries > 50 {
                return Err(PgtError::numeric("no kink-free probe sequence found"));
            }
            x = random_sequence::<f64, _>(&mut rng, schedule.total_frames, &model.spec.input)?;
        }

        model.store.zero_grads();
        progressive_accumulate(&mut model, &x, label, &schedule, StepLossMode::Sum)?;
        let analytic = flat_grads(&model);

        let frozen = consumed_states(&model, &x, &schedule)?;
        let base = flat_params(&model);
        let mut probe = model.clone();
        let numeric = central_diff(
            |flat| {
                set_flat_params(&mut probe, flat)?;
                let mut total = 0.0;
                for (p, &(s, e)) in schedule.ranges.iter().enumerate() {
                    let mut tape = Tape::new();
                    let xs = tape.leaf(x.slice_frames(s, e)?, false);
                    let out = probe.forward_markov_step(&mut tape, xs, &frozen[p], false)?;
                    let ce = tape.cross_entropy(out.logits, label)?;
                    total += tape.value(ce).scalar_value()?.to_f64_val();
                }
                Ok(total)
            },
            &base,
            eps,
        )?;
        // Floor at 1e-5: near-zero coordinates must agree to 1e-10 absolute,
        // which sits above the difference quotient's cancellation noise.
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-5));
    }
    Ok(CheckReport {
        id: "gradient-oracle",
        passed: worst <= 1e-5,
        detail: format!("max relative error vs finite differences {worst:.3e}, tolerance 1e-5"),
    })
}

/// Schedules tile with one-frame overlap and regularized draws stay within
/// one step of the base length.
fn check_schedule_bounds(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut ok = true;
    for t_prime in [2usize, 4, 8, 16] {
        for p in 1..=6 {
            let s = make_schedule(t_prime, p)?;
            ok &= s.ranges[0].0 == 0;
            ok &= s.ranges.last().unwrap().1 == s.total_frames;
            ok &= s.total_frames == (t_prime - 1) * p + 1;
            for w in s.ranges.windows(2) {
                ok &= w[1].0 == w[0].1 - 1;
            }
            for &(a, b) in &s.ranges {
                ok &= b - a == t_prime;
            }
        }
    }
    let spot = make_schedule(8, 5)?;
    ok &= spot.total_frames == 36;
    ok &= steps_for(8, 36) == 5 && steps_for(4, 37) == 12;

    let mut rng = stream(opts.seed ^ 0x3c, STREAM_VERIFY);
    let draws = 300;
    let mut worst_dev = 0usize;
    for mode in [DprMode::A, DprMode::B] {
        let candidates = mode.candidates(8)?;
        for _ in 0..draws {
            let s = dpr_sample(mode, 8, 36, &mut rng)?;
            ok &= candidates.contains(&s.t_prime);
            let dev = s.total_frames.abs_diff(36);
            ok &= dev <= s.t_prime - 1;
            worst_dev = worst_dev.max(dev);
        }
    }
    Ok(CheckReport {
        id: "schedule-bounds",
        passed: ok,
        detail: format!(
            "tiling exact for 24 geometries; {} draws per mode, worst length deviation {worst_dev}",
            draws
        ),
    })
}

/// Progressive peak activations stay flat in the step count; integrated
/// activations grow linearly with sequence length.
fn check_memory_scaling<S: Scalar>(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut rng = stream(opts.seed ^ 0x77, STREAM_VERIFY);
    let spec = ModelSpec {
        input: vec![3],
        classes: 4,
        layers: vec![
            LayerSpec::temporal(8, MarkovVariant::Momentum { alpha: 0.5 }),
            LayerSpec::temporal(8, MarkovVariant::Momentum { alpha: 0.5 }),
        ],
    };
    let mut model = Model::<S>::new(spec, 5)?;

    let mut peaks = Vec::new();
    for p in [2usize, 4, 8] {
        let schedule = make_schedule(8, p)?;
        let x = random_sequence::<S, _>(&mut rng, schedule.total_frames, &model.spec.input)?;
        model.store.zero_grads();
        let run = progressive_accumulate(&mut model, &x, 0, &schedule, StepLossMode::Mean)?;
        peaks.push(run.peak_activation_elems);
    }
    let (lo, hi) = (*peaks.iter().min().unwrap(), *peaks.iter().max().unwrap());
    let spread = (hi - lo) as f64 / lo as f64;

    let mut integrated_elems = |t: usize| -> Result<usize> {
        let x = random_sequence::<S, _>(&mut rng, t, &model.spec.input)?;
        model.store.zero_grads();
        Ok(integrated_accumulate(&mut model, &x, 0)?.peak_activation_elems)
    };
    let ratio = integrated_elems(64)? as f64 / integrated_elems(16)? as f64;

    Ok(CheckReport {
        id: "memory-scaling",
        passed: spread <= 0.10 && (ratio - 4.0).abs() <= 0.4,
        detail: format!(
            "progressive peak spread {:.1}% across P in {{2,4,8}}; integrated 64/16 ratio {ratio:.2}",
            spread * 100.0
        ),
    })
}

/// A one-step schedule reproduces integrated training bit for bit, and
/// one-step progressive inference reproduces the local forward (f64).
fn check_degenerate_identity(opts: &VerifyOptions) -> Result<CheckReport> {
    let mut rng = stream(opts.seed ^ 0xe1, STREAM_VERIFY);
    let spec = random_tap_model_spec(&mut rng);
    let base = Model::<f64>::new(spec, rng.gen())?;
    let t_prime = 6;
    let x = random_sequence::<f64, _>(&mut rng, t_prime, &base.spec.input)?;
    let label = rng.gen_range(0..base.spec.classes);

    let mut prog = base.clone();
    prog.store.zero_grads();
    let run_p = progressive_accumulate(&mut prog, &x, label, &make_schedule(t_prime, 1)?, StepLossMode::Mean)?;
    let mut integ = base.clone();
    integ.store.zero_grads();
    let run_i = integrated_accumulate(&mut integ, &x, label)?;

    let mut ok = run_p.loss.to_bits() == run_i.loss.to_bits();
    for (a, b) in prog.store.entries().iter().zip(integ.store.entries()) {
        ok &= a.grad.bit_eq(&b.grad);
    }

    let pg = infer(&base, &x, InferenceMode::PgLong { t_prime, aggregate: LogitAggregate::Mean })?;
    let orig = infer(&base, &x, InferenceMode::OrigLong)?;
    ok &= pg.bit_eq(&orig);

    Ok(CheckReport {
        id: "degenerate-identity",
        passed: ok,
        detail: if ok {
            "P=1 loss, gradients, and inference bit-identical to the integrated path".to_string()
        } else {
            "P=1 progressive and integrated paths differ".to_string()
        },
    })
}
