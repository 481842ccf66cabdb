//! Seeded inputs shared by the benchmarks.

use dq_core::calib::{calibrate_model, CalibrationSource, Objective, RunningHistogram};
use dq_core::distill::{
    ptq_quantize_model, student_def, teacher_def, to_fp16, DistilledModel, Normalization, QuantState, Scheme,
    StudentNet,
};
use dq_core::model::Network;
use dq_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Side length of the benchmark images.
pub const IMAGE_SIZE: usize = 32;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Histogram of a Gaussian body with a sparse heavy tail.
pub fn activation_histogram(bins: usize, seed: u64) -> RunningHistogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Normal::new(0.0f32, 1.0).expect("std");
    let values: Vec<f32> = (0..100_000)
        .map(|i| {
            let v = body.sample(&mut rng).abs();
            if i % 1000 == 0 {
                v * 8.0
            } else {
                v
            }
        })
        .collect();
    let mut h = RunningHistogram::new(bins);
    h.observe_values(&values).expect("finite values");
    h
}

/// Scores with anomalies shifted upwards; about a tenth are positive.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f32>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.1))).collect();
    let scores = labels.iter().map(|&l| rng.random_range(0.0..1.0) + 0.5 * f32::from(l)).collect();
    (scores, labels)
}

/// Untrained single-student model at full precision.
pub fn fp32_model(seed: u64) -> DistilledModel {
    let t = Network::init(teacher_def(1), seed);
    let s = Network::init(student_def(Scheme::Stfpm, &t.def), seed + 1);
    DistilledModel::new(
        t,
        vec![StudentNet::Float(s)],
        Scheme::Stfpm,
        QuantState::Fp32,
        Normalization::default(),
        [1, IMAGE_SIZE, IMAGE_SIZE],
    )
    .expect("matching architectures")
}

/// The fp32, fp16 and int8 variants of [`fp32_model`].
pub fn precision_variants(seed: u64) -> Vec<(&'static str, DistilledModel)> {
    let fp32 = fp32_model(seed);
    let source = CalibrationSource::RandomNormal {
        mean: 0.0,
        std: 1.0,
        n_batches: 4,
        batch_shape: [4, 1, IMAGE_SIZE, IMAGE_SIZE],
        seed,
    };
    let plan = calibrate_model(&fp32, &source, Objective::Entropy, 8).expect("calibration");
    let int8 = ptq_quantize_model(&fp32, &plan).expect("plan covers the student");
    let fp16 = to_fp16(&fp32).expect("fp32 student");
    vec![("fp32", fp32), ("fp16", fp16), ("int8", int8)]
}
