//! Dataset ingestion, pixel-domain image types, and image persistence.
//!
//! Images live in the pixel domain: `f32` arrays with every element in
//! `[0, 255]`, laid out `[channels, height, width]`. This is the domain all
//! inversion attacks operate in; conversion to a model's normalized input
//! space happens inside the classifier via [`NormalizationSpec`].

mod io;
mod loader;
mod norm;
pub mod synth;

pub use io::{decode_result_filename, load_image, result_filename, save_image};
pub use loader::{downscale_avg, load_dataset, LoadOptions};
pub use norm::{from_model_space, to_model_space, NormalizationSpec};

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

/// Number of classes in the CIFAR-like datasets this toolkit targets.
pub const NUM_CLASSES: usize = 10;

/// Which half of the dataset a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
        }
    }
}

/// A single image in the pixel domain.
///
/// Layout is `[C, H, W]` and every element must be within `[0, 255]`. The
/// constructor enforces the range; attack steps that clip to the range may
/// use [`ImageTensor::from_clipped`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f32>);

impl ImageTensor {
    /// Wrap an array, rejecting any out-of-range element.
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 255.0)
        {
            return Err(Error::PixelRange { value, index });
        }
        Ok(ImageTensor(pixels))
    }

    /// Clamp into `[0, 255]` and wrap. Used by optimization steps whose
    /// update rule already ends in a clip.
    pub fn from_clipped(mut pixels: Array3<f32>) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 255.0));
        ImageTensor(pixels)
    }

    /// Uniform image with every pixel set to `value`.
    pub fn uniform(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.0
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.0.dim();
        (d.0, d.1, d.2)
    }

    /// Euclidean distance to another image of the same shape, in pixel units.
    pub fn l2_distance(&self, other: &ImageTensor) -> Result<f32> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                actual: format!("{:?}", other.shape()),
            });
        }
        let sum: f64 = self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(sum.sqrt() as f32)
    }

    /// Stack images into a `[B, C, H, W]` batch.
    pub fn batch(images: &[ImageTensor]) -> Array4<f32> {
        assert!(!images.is_empty(), "cannot batch zero images");
        let (c, h, w) = images[0].shape();
        let mut out = Array4::zeros((images.len(), c, h, w));
        for (i, img) in images.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i).assign(img.pixels());
        }
        out
    }
}

/// A labeled image collection with its split tag and source-index
/// bookkeeping (used to prove shadow/target disjointness without pixel
/// comparisons).
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<u8>,
    pub split: Split,
    /// Index of each record in its source archive, for disjointness checks.
    pub source_indices: Vec<u32>,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Vec<u8>,
        split: Split,
        source_indices: Vec<u32>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != source_indices.len() {
            return Err(Error::config(format!(
                "dataset fields disagree on length: {} images, {} labels, {} indices",
                images.len(),
                labels.len(),
                source_indices.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= NUM_CLASSES) {
            return Err(Error::ClassId {
                class_id: bad as usize,
                num_classes: NUM_CLASSES,
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            split,
            source_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(C, H, W)` of the images, or `None` when empty.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|i| i.shape())
    }

    /// Indices of all records carrying `class_id`.
    pub fn indices_of_class(&self, class_id: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Shadow data: same distribution as the target model's training set but
/// disjoint from it. The toolkit uses the validation split, mirroring a
/// realistic attacker who holds out-of-set samples.
#[derive(Debug, Clone)]
pub struct ShadowDataset(LabeledDataset);

impl ShadowDataset {
    /// Designate a validation-split dataset as shadow data. The target
    /// model trains on the train split, so disjointness holds by split tag.
    pub fn from_validation(ds: LabeledDataset) -> Result<Self> {
        if ds.split != Split::Validation {
            return Err(Error::config(
                "shadow data must come from the validation split",
            ));
        }
        Ok(ShadowDataset(ds))
    }

    pub fn dataset(&self) -> &LabeledDataset {
        &self.0
    }

    /// True when no (split, source index) pair is shared with `target_train`.
    pub fn disjoint_from(&self, target_train: &LabeledDataset) -> bool {
        self.0.split != target_train.split
            || !self
                .0
                .source_indices
                .iter()
                .any(|i| target_train.source_indices.contains(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_tensor_rejects_out_of_range() {
        let mut a = Array3::zeros((3, 4, 4));
        a[[0, 0, 0]] = 256.0;
        assert!(matches!(
            ImageTensor::new(a),
            Err(Error::PixelRange { .. })
        ));
        let mut b = Array3::zeros((3, 4, 4));
        b[[2, 3, 3]] = -0.5;
        assert!(ImageTensor::new(b).is_err());
    }

    #[test]
    fn from_clipped_lands_in_range() {
        let mut a = Array3::from_elem((1, 2, 2), 300.0f32);
        a[[0, 0, 0]] = -40.0;
        let img = ImageTensor::from_clipped(a);
        assert_eq!(img.pixels()[[0, 0, 0]], 0.0);
        assert_eq!(img.pixels()[[0, 1, 1]], 255.0);
    }

    #[test]
    fn l2_distance_single_pixel() {
        let a = ImageTensor::uniform(3, 2, 2, 100.0).unwrap();
        let mut p = a.pixels().clone();
        p[[0, 0, 0]] += 10.0;
        let b = ImageTensor::new(p).unwrap();
        assert!((a.l2_distance(&b).unwrap() - 10.0).abs() < 1e-6);
        assert_eq!(a.l2_distance(&a).unwrap(), 0.0);
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let img = ImageTensor::uniform(3, 2, 2, 0.0).unwrap();
        let err = LabeledDataset::new(vec![img], vec![10], Split::Train, vec![0]);
        assert!(matches!(err, Err(Error::ClassId { .. })));
    }

    #[test]
    fn shadow_disjointness_is_by_split_tag() {
        let img = ImageTensor::uniform(3, 2, 2, 0.0).unwrap();
        let train =
            LabeledDataset::new(vec![img.clone()], vec![0], Split::Train, vec![5]).unwrap();
        let val =
            LabeledDataset::new(vec![img.clone()], vec![0], Split::Validation, vec![5]).unwrap();
        let shadow = ShadowDataset::from_validation(val).unwrap();
        assert!(shadow.disjoint_from(&train));
        let not_val = LabeledDataset::new(vec![img], vec![0], Split::Train, vec![5]).unwrap();
        assert!(ShadowDataset::from_validation(not_val).is_err());
    }
}
