#![allow(dead_code)]

use histokt::nn::{Batch, ModelSpec, StageSpec, Targets};
use histokt::rng::Stream;
use histokt::Tensor;

/// Two-stage residual net small enough for finite differences.
pub fn tiny_spec(classes: usize) -> ModelSpec {
    ModelSpec {
        input: (6, 6, 3),
        stem: 4,
        stages: vec![
            StageSpec { channels: 4, blocks: 1, stride: 1 },
            StageSpec { channels: 6, blocks: 1, stride: 2 },
        ],
        class_count: classes,
    }
}

pub fn random_batch<T: histokt::Scalar>(spec: &ModelSpec, n: usize, seed: u64) -> Batch<T> {
    let (h, w, c) = spec.input;
    let mut rng = Stream::new(seed, &[Stream::tag("test-batch")]);
    let data = (0..n * h * w * c).map(|_| T::from_f64_lossy(rng.uniform())).collect();
    let labels = (0..n).map(|_| rng.below(spec.class_count as u64) as usize).collect();
    Batch::new(
        Tensor::new(vec![n, h, w, c], data).unwrap(),
        Targets::Single { classes: spec.class_count, labels },
    )
    .unwrap()
}
