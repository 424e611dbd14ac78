//! Pixel-domain to model-space conversion.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::ImageTensor;

/// Per-channel affine normalization applied by a model to pixel-domain
/// input: `x_model = (x_pixel - mean[c]) / std[c]`.
///
/// Attacks never see model space; gradients are reported back in pixel
/// units by chain rule (a division by `std[c]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormalizationSpec {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Self {
        assert_eq!(mean.len(), std.len());
        assert!(std.iter().all(|&s| s > 0.0), "std must be positive");
        NormalizationSpec { mean, std }
    }

    /// Identity: model space equals pixel space.
    pub fn identity(channels: usize) -> Self {
        NormalizationSpec {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Symmetric scaling of `[0, 255]` onto `[-1, 1]`, the default for all
    /// models in this toolkit.
    pub fn symmetric(channels: usize) -> Self {
        NormalizationSpec {
            mean: vec![127.5; channels],
            std: vec![127.5; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalize a `[B, C, H, W]` pixel batch in place.
    pub fn apply_batch(&self, batch: &mut Array4<f32>) {
        for (c, mut lane) in batch.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            lane.mapv_inplace(|v| (v - m) / s);
        }
    }

    /// Chain rule back to pixel units: scales channel `c` of a model-space
    /// gradient by `1 / std[c]`.
    pub fn grad_to_pixel(&self, grad: &mut Array4<f32>) {
        for (c, mut lane) in grad.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let s = self.std[c];
            lane.mapv_inplace(|v| v / s);
        }
    }
}

/// Convert a pixel-domain image into the model's normalized input space.
pub fn to_model_space(img: &ImageTensor, norm: &NormalizationSpec) -> Array3<f32> {
    let mut out = img.pixels().clone();
    for (c, mut lane) in out.axis_iter_mut(ndarray::Axis(0)).enumerate() {
        let (m, s) = (norm.mean[c], norm.std[c]);
        lane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Inverse of [`to_model_space`]. Does not clamp; callers own the range
/// invariant when constructing an [`ImageTensor`] from the result.
pub fn from_model_space(normalized: &Array3<f32>, norm: &NormalizationSpec) -> Array3<f32> {
    let mut out = normalized.clone();
    for (c, mut lane) in out.axis_iter_mut(ndarray::Axis(0)).enumerate() {
        let (m, s) = (norm.mean[c], norm.std[c]);
        lane.mapv_inplace(|v| v * s + m);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn identity_norm_is_identity() {
        let img = ImageTensor::uniform(3, 2, 2, 0.0).unwrap();
        let norm = NormalizationSpec::identity(3);
        let m = to_model_space(&img, &norm);
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_maps_255_to_one() {
        let img = ImageTensor::uniform(3, 1, 1, 255.0).unwrap();
        let norm = NormalizationSpec::symmetric(3);
        let m = to_model_space(&img, &norm);
        // (255 - 127.5) / 127.5 = 1.0
        assert!(m.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn round_trip_within_1e6(vals in proptest::collection::vec(0.0f32..=255.0, 12)) {
            let arr = Array3::from_shape_vec((3, 2, 2), vals).unwrap();
            let img = ImageTensor::new(arr).unwrap();
            let norm = NormalizationSpec::new(vec![120.0, 0.0, 33.3], vec![64.0, 1.0, 3.7]);
            let back = from_model_space(&to_model_space(&img, &norm), &norm);
            for (a, b) in img.pixels().iter().zip(back.iter()) {
                prop_assert!((a - b).abs() < 1e-6 * 255.0_f32.max(1.0));
            }
        }
    }
}
