//! Lossless image persistence (PNG) and the artifact filename scheme.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

use super::ImageTensor;

/// Save as 8-bit RGB PNG, rounding to the nearest integer pixel value.
/// Out-of-range arrays never reach this function: `ImageTensor` enforces the
/// range at construction.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            expected: "3 channels".into(),
            actual: format!("{c} channels"),
        });
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    let px = img.pixels();
    for y in 0..h {
        for x in 0..w {
            let rgb = [
                px[[0, y, x]].round() as u8,
                px[[1, y, x]].round() as u8,
                px[[2, y, x]].round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    buf.save(path).map_err(Error::Image)
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut arr = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            arr[[c, y as usize, x as usize]] = p.0[c] as f32;
        }
    }
    ImageTensor::new(arr)
}

/// Canonical artifact filename: `{model_id}__{attack_id}__c{class}__s{seed}.png`.
pub fn result_filename(model_id: &str, attack_id: &str, class_id: u8, seed: u64) -> String {
    format!("{model_id}__{attack_id}__c{class_id}__s{seed}.png")
}

/// Parse a filename produced by [`result_filename`].
pub fn decode_result_filename(name: &str) -> Option<(String, String, u8, u64)> {
    let stem = name.strip_suffix(".png")?;
    let parts: Vec<&str> = stem.split("__").collect();
    if parts.len() != 4 {
        return None;
    }
    let class_id = parts[2].strip_prefix('c')?.parse().ok()?;
    let seed = parts[3].strip_prefix('s')?.parse().ok()?;
    Some((parts[0].to_string(), parts[1].to_string(), class_id, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn png_round_trip_after_rounding() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let arr = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0f32..255.0));
        let img = ImageTensor::new(arr).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels().iter()) {
            assert_eq!(a.round(), *b);
        }
    }

    #[test]
    fn uniform_gray_decodes_uniform() {
        let img = ImageTensor::uniform(3, 4, 4, 128.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.pixels().iter().all(|&v| v == 128.0));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let img = ImageTensor::uniform(3, 4, 4, 1.0).unwrap();
        let err = save_image(&img, Path::new("/nonexistent-dir/x.png"));
        assert!(err.is_err());
    }

    #[test]
    fn filename_encodes_and_decodes() {
        let name = result_filename("atm-desk", "pgd", 3, 17);
        assert_eq!(
            decode_result_filename(&name),
            Some(("atm-desk".into(), "pgd".into(), 3, 17))
        );
    }
}
