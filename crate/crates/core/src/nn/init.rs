//! Seeded weight initializers.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// He (Kaiming) normal for conv weights: std = sqrt(2 / fan_in).
pub fn conv_he(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    k: usize,
) -> Array4<f32> {
    let std = (2.0 / (in_c * k * k) as f32).sqrt();
    Array4::from_shape_fn((out_c, in_c, k, k), |_| gauss(rng) * std)
}

/// Normal with explicit std; layout `[a, b, k, k]` (used for both conv and
/// transpose-conv weights in the GAN, which conventionally use std 0.02).
pub fn conv_normal(
    rng: &mut ChaCha8Rng,
    a: usize,
    b: usize,
    k: usize,
    std: f32,
) -> Array4<f32> {
    Array4::from_shape_fn((a, b, k, k), |_| gauss(rng) * std)
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear weights and biases.
pub fn linear_uniform(rng: &mut ChaCha8Rng, out_f: usize, in_f: usize) -> (Array2<f32>, Array1<f32>) {
    let bound = 1.0 / (in_f as f32).sqrt();
    let w = Array2::from_shape_fn((out_f, in_f), |_| rng.gen_range(-bound..bound));
    let b = Array1::from_shape_fn(out_f, |_| rng.gen_range(-bound..bound));
    (w, b)
}

/// One standard Gaussian draw (Box-Muller).
pub fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(1e-9f32..1.0);
    let u2: f32 = rng.gen_range(0.0f32..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}
