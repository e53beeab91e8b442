//! Synthetic sequences with genuinely long-range structure.
//!
//! Each sequence carries two channel-coded markers: an early symbol and a
//! late one, separated by far more frames than a short clip (or a shallow
//! stack of temporal kernels) can span. The labeling rule decides how much
//! of that separation matters:
//!
//! * `pair`: the label is the (early, late) combination;
//! * `mod-sum`: the label is the sum of both symbols modulo the alphabet,
//!   so either marker alone carries no information about the label;
//! * `late-only`: the label is the late symbol, a control task any clip model
//!   covering the late window can solve.

use rand::Rng;

use crate::error::{PgtError, Result};
use crate::rng::{stream, STREAM_DATA};
use crate::tensor::{Scalar, Tensor};
use crate::train::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskRule {
    Pair,
    ModSum,
    LateOnly,
}

impl TaskRule {
    pub fn name(self) -> &'static str {
        match self {
            TaskRule::Pair => "pair",
            TaskRule::ModSum => "mod-sum",
            TaskRule::LateOnly => "late-only",
        }
    }

    pub fn parse(s: &str) -> Result<TaskRule> {
        match s {
            "pair" => Ok(TaskRule::Pair),
            "mod-sum" => Ok(TaskRule::ModSum),
            "late-only" => Ok(TaskRule::LateOnly),
            other => Err(PgtError::config(format!("unknown task rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub frames: usize,
    pub channels: usize,
    /// Alphabet size for each marker.
    pub symbols: usize,
    pub rule: TaskRule,
    pub early_window: (usize, usize),
    pub late_window: (usize, usize),
    pub amplitude: f64,
    /// Standard deviation of the additive Gaussian background.
    pub noise: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            frames: 36,
            channels: 4,
            symbols: 4,
            rule: TaskRule::Pair,
            early_window: (4, 8),
            late_window: (28, 32),
            amplitude: 3.0,
            noise: 0.25,
        }
    }
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        match self.rule {
            TaskRule::Pair => self.symbols * self.symbols,
            TaskRule::ModSum | TaskRule::LateOnly => self.symbols,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols < 2 {
            return Err(PgtError::config("need an alphabet of at least two symbols"));
        }
        if self.channels < self.symbols {
            return Err(PgtError::config(format!(
                "{} channels cannot encode {} symbols",
                self.channels, self.symbols
            )));
        }
        for (name, (a, b)) in [("early", self.early_window), ("late", self.late_window)] {
            if a >= b || b > self.frames {
                return Err(PgtError::config(format!(
                    "{name} window [{a}, {b}) out of range for {} frames",
                    self.frames
                )));
            }
        }
        if self.early_window.1 > self.late_window.0 {
            return Err(PgtError::config("marker windows must not overlap"));
        }
        if !(self.amplitude > 0.0) || self.noise < 0.0 {
            return Err(PgtError::config("amplitude must be positive, noise nonnegative"));
        }
        Ok(())
    }

    /// The label for a pair of marker symbols.
    pub fn label_of(&self, early: usize, late: usize) -> usize {
        match self.rule {
            TaskRule::Pair => early * self.symbols + late,
            TaskRule::ModSum => (early + late) % self.symbols,
            TaskRule::LateOnly => late,
        }
    }

    /// Marker symbols for the n-th sample of a class-balanced sweep. The
    /// class cycles with `n`; the free symbol is drawn from `rng`.
    fn symbols_for<R: Rng>(&self, n: usize, rng: &mut R) -> (usize, usize) {
        let k = self.symbols;
        let class = n % self.classes();
        match self.rule {
            TaskRule::Pair => (class / k, class % k),
            TaskRule::ModSum => {
                let early = rng.gen_range(0..k);
                let late = (class + k - early) % k;
                (early, late)
            }
            TaskRule::LateOnly => (rng.gen_range(0..k), class),
        }
    }
}

/// Box-Muller draw from N(0, 1).
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a class-balanced dataset (balanced up to remainder when `n` is
/// not a multiple of the class count). Deterministic in `seed`.
pub fn gen_dataset<S: Scalar>(task: &SyntheticTask, n: usize, seed: u64) -> Result<Dataset<S>> {
    task.validate()?;
    if n == 0 {
        return Err(PgtError::domain("cannot generate an empty dataset"));
    }
    let mut rng = stream(seed, STREAM_DATA);
    let mut sequences = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let (t, c) = (task.frames, task.channels);
    for i in 0..n {
        let (early, late) = task.symbols_for(i, &mut rng);
        let mut data = vec![0.0f64; t * c];
        for v in data.iter_mut() {
            *v = task.noise * standard_normal(&mut rng);
        }
        for f in task.early_window.0..task.early_window.1 {
            data[f * c + early] += task.amplitude;
        }
        for f in task.late_window.0..task.late_window.1 {
            data[f * c + late] += task.amplitude;
        }
        let seq = data.into_iter().map(S::from_f64).collect();
        sequences.push(Tensor::from_vec(vec![t, c], seq)?);
        labels.push(task.label_of(early, late));
    }
    Ok(Dataset { sequences, labels, classes: task.classes() })
}

/// Split off the first `n` samples (generation already interleaves classes,
/// so both halves stay balanced).
pub fn split<S: Scalar>(data: Dataset<S>, n: usize) -> Result<(Dataset<S>, Dataset<S>)> {
    if n == 0 || n >= data.len() {
        return Err(PgtError::domain(format!(
            "split point {n} outside dataset of {}",
            data.len()
        )));
    }
    let classes = data.classes;
    let mut seq_a = data.sequences;
    let seq_b = seq_a.split_off(n);
    let mut lab_a = data.labels;
    let lab_b = lab_a.split_off(n);
    Ok((
        Dataset { sequences: seq_a, labels: lab_a, classes },
        Dataset { sequences: seq_b, labels: lab_b, classes },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasets_are_balanced_and_deterministic() {
        let task = SyntheticTask::default();
        let a = gen_dataset::<f64>(&task, 64, 3).unwrap();
        let b = gen_dataset::<f64>(&task, 64, 3).unwrap();
        let mut counts = vec![0usize; task.classes()];
        for (&l, (sa, sb)) in a.labels.iter().zip(a.sequences.iter().zip(&b.sequences)) {
            counts[l] += 1;
            assert!(sa.bit_eq(sb));
        }
        for &c in &counts {
            assert_eq!(c, 64 / task.classes());
        }
        let c = gen_dataset::<f64>(&task, 64, 4).unwrap();
        assert!(!a.sequences[0].bit_eq(&c.sequences[0]));
    }

    #[test]
    fn markers_land_in_their_windows() {
        let task = SyntheticTask { rule: TaskRule::Pair, ..SyntheticTask::default() };
        let data = gen_dataset::<f64>(&task, 16, 5).unwrap();
        let k = task.symbols;
        for (x, &label) in data.sequences.iter().zip(&data.labels) {
            let (early, late) = (label / k, label % k);
            let d = x.data();
            let c = task.channels;
            let mean_over = |win: (usize, usize), ch: usize| {
                (win.0..win.1).map(|f| d[f * c + ch]).sum::<f64>() / (win.1 - win.0) as f64
            };
            assert!(mean_over(task.early_window, early) > task.amplitude * 0.5);
            assert!(mean_over(task.late_window, late) > task.amplitude * 0.5);
            // a channel not carrying either marker stays at noise level
            let free = (0..c).find(|&ch| ch != early && ch != late).unwrap();
            assert!(mean_over(task.early_window, free).abs() < task.amplitude * 0.5);
        }
    }

    #[test]
    fn mod_sum_labels_follow_the_rule() {
        let task = SyntheticTask { rule: TaskRule::ModSum, ..SyntheticTask::default() };
        for early in 0..task.symbols {
            for late in 0..task.symbols {
                assert_eq!(task.label_of(early, late), (early + late) % task.symbols);
            }
        }
    }

    #[test]
    fn split_preserves_order_and_counts() {
        let task = SyntheticTask::default();
        let data = gen_dataset::<f64>(&task, 48, 7).unwrap();
        let first_label = data.labels[0];
        let (train, test) = split(data, 32).unwrap();
        assert_eq!(train.len(), 32);
        assert_eq!(test.len(), 16);
        assert_eq!(train.labels[0], first_label);
    }

    #[test]
    fn validation_rejects_bad_windows() {
        let mut task = SyntheticTask::default();
        task.late_window = (6, 10);
        assert!(task.validate().is_err(), "overlapping windows");
        let mut task = SyntheticTask::default();
        task.early_window = (30, 40);
        assert!(task.validate().is_err(), "window past the end");
        let mut task = SyntheticTask::default();
        task.channels = 2;
        assert!(task.validate().is_err(), "alphabet larger than channels");
    }
}
