//! Procedural CIFAR-shaped dataset.
//!
//! Ten classes of 32x32x3 images, each a drawn foreground shape over a
//! gradient background with per-sample jitter in position, scale, palette,
//! and additive noise. Classes share palettes so shape carries most of the
//! signal; the noise floor keeps the task honest for small models.
//!
//! [`materialize`] writes the exact binary archive layout the loader reads,
//! so synthetic data and a real archive are interchangeable downstream.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{ImageTensor, LabeledDataset, Split};

const SIDE: usize = 32;

/// Deterministically generate record `index` of a split. Records are
/// independent of generation order, so any subset is reproducible.
pub fn generate_record(seed: u64, split: Split, index: u32) -> (ImageTensor, u8) {
    let split_tag = match split {
        Split::Train => 0x7424,
        Split::Validation => 0x76a1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(split_tag)
            .wrapping_add(index as u64),
    );
    let label = (index % 10) as u8;
    let img = draw(label, &mut rng);
    (img, label)
}

/// Generate a balanced in-memory split without touching disk.
pub fn generate_split(seed: u64, split: Split, count: usize) -> LabeledDataset {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut sources = Vec::with_capacity(count);
    for i in 0..count as u32 {
        let (img, label) = generate_record(seed, split, i);
        images.push(img);
        labels.push(label);
        sources.push(i);
    }
    LabeledDataset::new(images, labels, split, sources).expect("generator output is consistent")
}

/// Write `n_train` + `n_val` records into `dir` using the binary archive
/// layout (`data_batch_*.bin`, `test_batch.bin`, 3073-byte records).
pub fn materialize(dir: &Path, n_train: usize, n_val: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = 0usize;
    let mut file_no = 1;
    while written < n_train {
        let count = (n_train - written).min(10_000);
        let path = dir.join(format!("data_batch_{file_no}.bin"));
        write_records(&path, seed, Split::Train, written as u32, count)?;
        written += count;
        file_no += 1;
    }
    write_records(&dir.join("test_batch.bin"), seed, Split::Validation, 0, n_val)?;
    Ok(())
}

fn write_records(path: &Path, seed: u64, split: Split, start: u32, count: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(count * (1 + 3 * SIDE * SIDE));
    for i in 0..count as u32 {
        let (img, label) = generate_record(seed, split, start + i);
        buf.push(label);
        for v in img.pixels().iter() {
            buf.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ---- drawing ----------------------------------------------------------

fn draw(label: u8, rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut img = Array3::<f32>::zeros((3, SIDE, SIDE));

    // Background: linear gradient between two palette colors at a random angle.
    let bg_a = palette_color(rng);
    let bg_b = palette_color(rng);
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    for y in 0..SIDE {
        for x in 0..SIDE {
            let t = ((x as f32 * dx + y as f32 * dy) / SIDE as f32 + 1.0) / 2.0;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                img[[c, y, x]] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
            }
        }
    }

    // Foreground: class shape with class-biased hue plus jitter.
    let fg = class_color(label, rng);
    let cx = rng.gen_range(10.0..22.0);
    let cy = rng.gen_range(10.0..22.0);
    let r = rng.gen_range(6.0..11.0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let u = x as f32 - cx;
            let v = y as f32 - cy;
            let cover = shape_coverage(label, u, v, r);
            if cover > 0.0 {
                for c in 0..3 {
                    img[[c, y, x]] = img[[c, y, x]] * (1.0 - cover) + fg[c] * cover;
                }
            }
        }
    }

    // Additive noise.
    let sigma = rng.gen_range(6.0..14.0);
    for v in img.iter_mut() {
        let n: f32 = sample_gauss(rng) * sigma;
        *v = (*v + n).clamp(0.0, 255.0);
    }
    // Quantize to u8 so in-memory generation equals the disk round trip.
    img.mapv_inplace(|v| v.round().clamp(0.0, 255.0));
    ImageTensor::new(img).expect("clamped")
}

/// Coverage in [0, 1] of the class shape at offset (u, v) from its center,
/// with soft edges (half-pixel feather) so shapes survive downscaling.
fn shape_coverage(label: u8, u: f32, v: f32, r: f32) -> f32 {
    let soft = |d: f32| (0.5 - d).clamp(0.0, 1.0); // d = signed distance, px
    match label {
        // filled disc
        0 => soft((u * u + v * v).sqrt() - r),
        // square outline
        1 => {
            let d = u.abs().max(v.abs());
            soft((d - r).abs() - 1.6)
        }
        // triangle (flat bottom)
        2 => {
            let inside = v <= r * 0.8 && v >= -r && u.abs() <= (v + r) * 0.6;
            if inside {
                1.0
            } else {
                0.0
            }
        }
        // horizontal stripes
        3 => {
            if (u * u + v * v).sqrt() <= r + 2.0 && ((v / 3.0).floor() as i32).rem_euclid(2) == 0 {
                1.0
            } else {
                0.0
            }
        }
        // vertical bars
        4 => {
            if (u * u + v * v).sqrt() <= r + 2.0 && ((u / 3.0).floor() as i32).rem_euclid(2) == 0 {
                1.0
            } else {
                0.0
            }
        }
        // ring
        5 => soft(((u * u + v * v).sqrt() - r).abs() - 1.8),
        // plus sign
        6 => {
            let arm = r * 0.4;
            if (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r) {
                1.0
            } else {
                0.0
            }
        }
        // diamond
        7 => soft(u.abs() + v.abs() - r),
        // dot grid
        8 => {
            let gu = (u / 4.5).round() * 4.5 - u;
            let gv = (v / 4.5).round() * 4.5 - v;
            if (u * u + v * v).sqrt() <= r + 2.0 {
                soft((gu * gu + gv * gv).sqrt() - 1.7)
            } else {
                0.0
            }
        }
        // diagonal band
        _ => soft((u + v).abs() / std::f32::consts::SQRT_2 - r * 0.35),
    }
}

fn palette_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 8] = [
        [40.0, 60.0, 140.0],
        [150.0, 170.0, 200.0],
        [60.0, 120.0, 70.0],
        [180.0, 150.0, 90.0],
        [90.0, 90.0, 90.0],
        [200.0, 200.0, 210.0],
        [120.0, 70.0, 50.0],
        [30.0, 30.0, 45.0],
    ];
    let base = PALETTE[rng.gen_range(0..PALETTE.len())];
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (base[c] + rng.gen_range(-25.0..25.0)).clamp(0.0, 255.0);
    }
    out
}

fn class_color(label: u8, rng: &mut ChaCha8Rng) -> [f32; 3] {
    // Base hues repeat across classes (5 hues for 10 classes) so color alone
    // cannot separate them.
    const HUES: [[f32; 3]; 5] = [
        [220.0, 60.0, 50.0],
        [60.0, 200.0, 80.0],
        [70.0, 90.0, 220.0],
        [230.0, 210.0, 70.0],
        [200.0, 90.0, 200.0],
    ];
    let base = HUES[(label % 5) as usize];
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (base[c] + rng.gen_range(-40.0..40.0)).clamp(0.0, 255.0);
    }
    out
}

fn sample_gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; one draw per call keeps the stream simple.
    let u1: f32 = rng.gen_range(1e-7..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_order_independent() {
        let (a, la) = generate_record(7, Split::Train, 123);
        let (b, lb) = generate_record(7, Split::Train, 123);
        assert_eq!(a.pixels(), b.pixels());
        assert_eq!(la, lb);
    }

    #[test]
    fn splits_differ() {
        let (a, _) = generate_record(7, Split::Train, 5);
        let (b, _) = generate_record(7, Split::Validation, 5);
        assert_ne!(a.pixels(), b.pixels());
    }

    #[test]
    fn labels_are_balanced() {
        let ds = generate_split(1, Split::Train, 100);
        for class in 0..10u8 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == class).count(), 10);
        }
    }

    #[test]
    fn memory_matches_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        materialize(dir.path(), 20, 10, 11).unwrap();
        let from_disk = crate::data::load_dataset(
            dir.path(),
            Split::Train,
            &crate::data::LoadOptions::default(),
        )
        .unwrap();
        let in_memory = generate_split(11, Split::Train, 20);
        for i in 0..20 {
            assert_eq!(from_disk.images[i].pixels(), in_memory.images[i].pixels());
            assert_eq!(from_disk.labels[i], in_memory.labels[i]);
        }
    }
}
