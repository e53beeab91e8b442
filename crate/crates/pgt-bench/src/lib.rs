//! Shared setup for the timing benchmarks: one representative model and
//! sequence geometry, so the training and inference benches measure the same
//! workload the synthetic task trains.

use pgt_core::rng::{stream, STREAM_VERIFY};
use pgt_core::verify::random_sequence;
use pgt_core::{LayerSpec, MarkovVariant, Model, ModelSpec, Scalar, Tensor};

pub const T_PRIME: usize = 8;
pub const NUM_STEPS: usize = 5;
pub const TOTAL_FRAMES: usize = (T_PRIME - 1) * NUM_STEPS + 1;

pub fn bench_model<S: Scalar>() -> Model<S> {
    let variant = MarkovVariant::Momentum { alpha: 0.5 };
    let spec = ModelSpec {
        input: vec![4],
        classes: 16,
        layers: vec![
            LayerSpec::temporal(12, variant),
            LayerSpec::temporal(12, variant),
            LayerSpec::temporal(12, variant),
        ],
    };
    Model::new(spec, 0).unwrap()
}

pub fn bench_sequence<S: Scalar>(frames: usize) -> Tensor<S> {
    let mut rng = stream(1, STREAM_VERIFY);
    random_sequence::<S, _>(&mut rng, frames, &[4]).unwrap()
}
