//! Reader for the CIFAR-10 binary archive layout.
//!
//! Each record is `1 + C*H*W` bytes: a label byte followed by channel-major
//! pixel planes. Train data lives in `data_batch_*.bin`, validation data in
//! `test_batch.bin`. The synthetic generator in [`super::synth`] materializes
//! the same layout, so one reader covers both sources.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{ImageTensor, LabeledDataset, Split};

const CHANNELS: usize = 3;
const SIDE: usize = 32;
const RECORD_BYTES: usize = 1 + CHANNELS * SIDE * SIDE;

/// Options for [`load_dataset`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Keep only this many records, sampled without replacement under
    /// `seed`. `None` keeps everything.
    pub subset_size: Option<usize>,
    /// Spatial downscale factor (average pooling). Must divide 32.
    pub downscale: Option<usize>,
    /// Seed for subset sampling.
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            subset_size: None,
            downscale: None,
            seed: 0,
        }
    }
}

/// Load one split from `source_dir`, which must hold the CIFAR-10 binary
/// layout (or the synthetic cache, which is byte-compatible).
pub fn load_dataset(source_dir: &Path, split: Split, opts: &LoadOptions) -> Result<LabeledDataset> {
    let files = split_files(source_dir, split)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut source_indices = Vec::new();
    let mut next_index = 0u32;
    for file in &files {
        read_batch_file(file, &mut images, &mut labels, &mut source_indices, &mut next_index)?;
    }

    if let Some(n) = opts.subset_size {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
        order.shuffle(&mut rng);
        order.truncate(n.min(images.len()));
        order.sort_unstable();
        images = order.iter().map(|&i| images[i].clone()).collect();
        labels = order.iter().map(|&i| labels[i]).collect();
        source_indices = order.iter().map(|&i| source_indices[i]).collect();
    }

    if let Some(f) = opts.downscale {
        if f > 1 {
            if SIDE % f != 0 {
                return Err(Error::config(format!("downscale factor {f} must divide {SIDE}")));
            }
            images = images.iter().map(|img| downscale_avg(img, f)).collect();
        }
    }

    LabeledDataset::new(images, labels, split, source_indices)
}

fn split_files(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    match split {
        Split::Train => {
            let mut found: Vec<PathBuf> = Vec::new();
            let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.starts_with("data_batch_") && name.ends_with(".bin") {
                    found.push(entry.path());
                }
            }
            found.sort();
            if found.is_empty() {
                return Err(Error::Ingestion {
                    path: dir.to_path_buf(),
                    reason: "no data_batch_*.bin files found".into(),
                });
            }
            Ok(found)
        }
        Split::Validation => {
            let p = dir.join("test_batch.bin");
            if !p.exists() {
                return Err(Error::Ingestion {
                    path: p,
                    reason: "missing test_batch.bin".into(),
                });
            }
            Ok(vec![p])
        }
    }
}

fn read_batch_file(
    path: &Path,
    images: &mut Vec<ImageTensor>,
    labels: &mut Vec<u8>,
    source_indices: &mut Vec<u32>,
    next_index: &mut u32,
) -> Result<()> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.is_empty() || raw.len() % RECORD_BYTES != 0 {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!(
                "file size {} is not a positive multiple of the {}-byte record",
                raw.len(),
                RECORD_BYTES
            ),
        });
    }
    for record in raw.chunks_exact(RECORD_BYTES) {
        let label = record[0];
        if label as usize >= super::NUM_CLASSES {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                reason: format!("label {label} out of range"),
            });
        }
        let mut arr = Array3::zeros((CHANNELS, SIDE, SIDE));
        for c in 0..CHANNELS {
            for h in 0..SIDE {
                for w in 0..SIDE {
                    arr[[c, h, w]] = record[1 + c * SIDE * SIDE + h * SIDE + w] as f32;
                }
            }
        }
        images.push(ImageTensor::new(arr).expect("u8 pixels are in range"));
        labels.push(label);
        source_indices.push(*next_index);
        *next_index += 1;
    }
    Ok(())
}

/// Average-pool by an integer factor. Exact for inputs whose side the
/// factor divides, and keeps pixels inside [0, 255].
pub fn downscale_avg(img: &ImageTensor, factor: usize) -> ImageTensor {
    let (c, h, w) = img.shape();
    assert!(h % factor == 0 && w % factor == 0);
    let (oh, ow) = (h / factor, w / factor);
    let src = img.pixels();
    let mut out = Array3::zeros((c, oh, ow));
    let inv = 1.0 / (factor * factor) as f32;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[[ch, y * factor + dy, x * factor + dx]];
                    }
                }
                out[[ch, y, x]] = acc * inv;
            }
        }
    }
    ImageTensor::new(out).expect("average of in-range pixels is in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;

    #[test]
    fn empty_dir_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), Split::Train, &LoadOptions::default());
        assert!(matches!(err, Err(Error::Ingestion { .. })));
    }

    #[test]
    fn corrupt_file_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("data_batch_1.bin");
        fs::write(&bad, [0u8; 100]).unwrap();
        match load_dataset(dir.path(), Split::Train, &LoadOptions::default()) {
            Err(Error::Ingestion { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn round_trips_synthetic_cache() {
        let dir = tempfile::tempdir().unwrap();
        synth::materialize(dir.path(), 40, 20, 9).unwrap();
        let train = load_dataset(dir.path(), Split::Train, &LoadOptions::default()).unwrap();
        let val = load_dataset(dir.path(), Split::Validation, &LoadOptions::default()).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(val.len(), 20);
        assert_eq!(train.image_shape(), Some((3, 32, 32)));
        // all pixels in range by construction of ImageTensor
    }

    #[test]
    fn subset_is_deterministic_under_seed() {
        let dir = tempfile::tempdir().unwrap();
        synth::materialize(dir.path(), 50, 10, 3).unwrap();
        let opts = LoadOptions {
            subset_size: Some(8),
            downscale: None,
            seed: 42,
        };
        let a = load_dataset(dir.path(), Split::Train, &opts).unwrap();
        let b = load_dataset(dir.path(), Split::Train, &opts).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a.source_indices, b.source_indices);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn downscale_halves_resolution() {
        let dir = tempfile::tempdir().unwrap();
        synth::materialize(dir.path(), 10, 5, 3).unwrap();
        let opts = LoadOptions {
            subset_size: Some(4),
            downscale: Some(2),
            seed: 0,
        };
        let ds = load_dataset(dir.path(), Split::Train, &opts).unwrap();
        assert_eq!(ds.image_shape(), Some((3, 16, 16)));
    }

    #[test]
    fn downscale_of_uniform_is_exact() {
        let img = ImageTensor::uniform(3, 8, 8, 77.0).unwrap();
        let down = downscale_avg(&img, 2);
        assert!(down.pixels().iter().all(|&v| (v - 77.0).abs() < 1e-6));
    }
}
