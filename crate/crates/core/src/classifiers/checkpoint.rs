//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u32 header length, JSON header
//! (kind, architecture, normalization, regime, seed, epochs, tensor shapes),
//! then raw little-endian f32 payload — parameters first, buffers second,
//! both in visitation order. A version mismatch is an explicit error, never
//! a silent reinterpretation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::data::NormalizationSpec;
use crate::error::{Error, Result};

use super::{build_model, ArchitectureConfig, ClassifierModel, RegimeTag};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"IVBCKPT\0";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    arch: ArchitectureConfig,
    norm: NormalizationSpec,
    regime: RegimeTag,
    epochs: u32,
    seed: u64,
    shapes: Vec<Vec<usize>>,
}

pub fn save_checkpoint(model: &mut ClassifierModel, path: &Path) -> Result<()> {
    let mut shapes = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut collect = |arr: &ArrayD<f32>| {
        shapes.push(arr.shape().to_vec());
        for v in arr.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    model.visit_params(&mut |p| collect(&p.value));
    model.visit_buffers(&mut |b| collect(b));

    let header = Header {
        kind: "classifier".into(),
        arch: model.arch.clone(),
        norm: model.norm.clone(),
        regime: model.regime,
        epochs: model.epochs_trained,
        seed: model.seed,
        shapes,
    };
    write_container(path, &serde_json::to_vec(&header)?, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierModel> {
    let (header_bytes, payload) = read_container(path)?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| {
        Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: format!("bad header: {e}"),
        }
    })?;
    if header.kind != "classifier" {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: format!("expected classifier checkpoint, found kind `{}`", header.kind),
        });
    }
    let mut model = build_model(&header.arch, header.norm.clone(), header.seed).map_err(|_| {
        Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: "architecture cannot be rebuilt from config".into(),
        }
    })?;
    model.regime = header.regime;
    model.epochs_trained = header.epochs;

    let mut floats = payload.chunks_exact(4).map(|b| {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    });
    let mut shape_iter = header.shapes.iter();
    let mut fill = |arr: &mut ArrayD<f32>| -> std::result::Result<(), String> {
        let shape = shape_iter
            .next()
            .ok_or_else(|| "fewer tensors than model expects".to_string())?;
        if shape != arr.shape() {
            return Err(format!(
                "tensor shape mismatch: checkpoint {:?} vs model {:?}",
                shape,
                arr.shape()
            ));
        }
        for v in arr.iter_mut() {
            *v = floats.next().ok_or_else(|| "payload truncated".to_string())?;
        }
        Ok(())
    };
    let mut fail: Option<String> = None;
    model.visit_params(&mut |p| {
        if fail.is_none() {
            if let Err(e) = fill(&mut p.value) {
                fail = Some(e);
            }
        }
    });
    model.visit_buffers(&mut |b| {
        if fail.is_none() {
            if let Err(e) = fill(b) {
                fail = Some(e);
            }
        }
    });
    if let Some(reason) = fail {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason,
        });
    }
    Ok(model)
}

/// Write the raw container. Shared by classifier and generator checkpoints.
pub fn write_container(path: &Path, header_json: &[u8], payload: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(header_json).map_err(|e| Error::io(path, e))?;
    f.write_all(payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() < 16 || &raw[..8] != MAGIC {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes([raw[8], raw[9], raw[10], raw[11]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes([raw[12], raw[13], raw[14], raw[15]]) as usize;
    if raw.len() < 16 + hlen {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: "truncated header".into(),
        });
    }
    let header = raw[16..16 + hlen].to_vec();
    let payload = raw[16 + hlen..].to_vec();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageTensor;

    #[test]
    fn round_trip_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = build_model(
            &ArchitectureConfig::wide_resnet(10, 1, 16),
            NormalizationSpec::symmetric(3),
            42,
        )
        .unwrap();
        m.epochs_trained = 10;
        m.regime = RegimeTag::Atm;
        save_checkpoint(&mut m, &path).unwrap();
        let mut back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epochs_trained, 10);
        assert_eq!(back.regime, RegimeTag::Atm);
        assert_eq!(back.seed, 42);

        for i in 0..8u32 {
            let img = crate::data::downscale_avg(
                &crate::data::synth::generate_record(5, crate::data::Split::Train, i).0,
                2,
            );
            let a = m.forward_logits(&img);
            let b = back.forward_logits(&img);
            for k in 0..10 {
                assert!((a[k] - b[k]).abs() < 1e-6, "logit drift after round trip");
            }
        }
        let _ = ImageTensor::uniform(3, 2, 2, 0.0);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let mut raw = Vec::new();
        raw.extend_from_slice(MAGIC);
        raw.extend_from_slice(&99u32.to_le_bytes());
        raw.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, raw).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointVersion { found, .. }) => assert_eq!(found, 99),
            Err(other) => panic!("expected version error, got {other:?}"),
            Ok(_) => panic!("expected version error, got a model"),
        }
    }

    #[test]
    fn garbage_is_corrupt_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointCorrupt { .. })
        ));
    }
}
