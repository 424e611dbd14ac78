//! Model inversion attacks: plain gradient ascent on a class activation,
//! multi-scale (octave) ascent with gradient normalization and a smoothness
//! penalty, and a shadow-data-constrained conditional GAN.

pub mod deepdream;
pub mod gan;
pub mod pgd;

pub use deepdream::{build_octave_pyramid, dream_step, invert_class_multiscale, DreamConfig};
pub use pgd::{invert_class, invert_from_seed_image, pgd_step, PgdInversionConfig};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{save_image, ImageTensor};
use crate::error::{Error, Result};

/// How the attack image is initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    /// Homogeneous image; 128 is the default gray.
    Gray { value: f32 },
    /// Pixelwise uniform noise centered on `mean` with half-width
    /// `amplitude`, clipped to the pixel range. Larger amplitudes yield more
    /// varied but less structured reconstructions.
    Random { mean: f32, amplitude: f32 },
    /// Start from a provided image (see `invert_from_seed_image`).
    SeedImage,
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Gray { value: 128.0 }
    }
}

/// Outcome of one inversion run: the reconstruction plus its optimization
/// trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionResult {
    pub attack_id: String,
    pub model_id: String,
    pub target_class: u8,
    pub seed: u64,
    /// (iteration, target-class activation at that iterate); iteration 0 is
    /// the initial image. Filled when trajectory recording is enabled.
    pub trajectory: Vec<(u32, f32)>,
    /// First iteration at which the iterate is classified as the target
    /// class, or None if that never happened.
    pub iterations_to_target: Option<u32>,
    pub final_activation: f32,
    /// Learning rate actually used (logged because it may be auto-calibrated).
    pub lr_used: f32,
    /// Smoothness weight actually used (multi-scale attack only).
    pub lambda_tv_used: Option<f32>,
    /// L2 distance from the seed image (seeded runs only).
    pub seed_displacement: Option<f32>,
    pub iterations_run: u32,
    #[serde(skip)]
    pub final_image: Option<ImageTensor>,
}

impl InversionResult {
    /// Persist the reconstruction as a PNG plus a JSON sidecar with the
    /// trajectory and run parameters.
    pub fn persist(&self, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let img = self
            .final_image
            .as_ref()
            .ok_or_else(|| Error::Empty("inversion result holds no image".into()))?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = crate::data::result_filename(
            &self.model_id,
            &self.attack_id,
            self.target_class,
            self.seed,
        );
        let png = dir.join(&name);
        save_image(img, &png)?;
        let sidecar = png.with_extension("json");
        let body = serde_json::to_vec_pretty(self)?;
        std::fs::write(&sidecar, body).map_err(|e| Error::io(&sidecar, e))?;
        Ok((png, sidecar))
    }

    /// Highest activation seen along the trajectory (init included).
    pub fn max_trajectory_activation(&self) -> Option<f32> {
        self.trajectory
            .iter()
            .map(|&(_, a)| a)
            .fold(None, |acc, v| Some(acc.map_or(v, |m: f32| m.max(v))))
    }
}

/// Build the initial image for an attack.
pub(crate) fn init_image(
    init: &InitMode,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<ImageTensor> {
    match init {
        InitMode::Gray { value } => {
            if !(0.0..=255.0).contains(value) {
                return Err(Error::config(format!("gray value {value} outside [0,255]")));
            }
            ImageTensor::uniform(channels, height, width, *value)
        }
        InitMode::Random { mean, amplitude } => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let arr = ndarray::Array3::from_shape_fn((channels, height, width), |_| {
                (mean + rng.gen_range(-*amplitude..=*amplitude)).clamp(0.0, 255.0)
            });
            ImageTensor::new(arr)
        }
        InitMode::SeedImage => Err(Error::config(
            "seed-image init requires invert_from_seed_image",
        )),
    }
}
