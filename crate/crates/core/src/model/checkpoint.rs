//! Weight persistence.
//!
//! File layout: the magic `NVS1` (4 bytes), a little-endian u32 byte length,
//! that many bytes of UTF-8 JSON metadata (format version, model spec, epoch,
//! validation loss, and an ordered tensor directory of name/shape/offset),
//! then the tensor payloads as little-endian 32-bit floats concatenated in
//! directory order. Offsets are byte positions inside the payload region.
//! Writes go through a temporary file in the target directory followed by a
//! rename, so a crash never leaves a half-written checkpoint behind.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adapt_first_layer, build_model, AssemblySpec, ModelAssembly, ModelError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NVS1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub spec: AssemblySpec,
    pub epoch: u64,
    pub val_loss: f32,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes the assembly to `path`. Identical weights and metadata
/// produce byte-identical files.
pub fn save_checkpoint(
    model: &ModelAssembly,
    path: &Path,
    epoch: u64,
    val_loss: f32,
) -> Result<(), ModelError> {
    if !val_loss.is_finite() {
        return Err(ModelError::Format(format!(
            "refusing to record non-finite validation loss {val_loss}"
        )));
    }
    let params = model.params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, tensor) in &params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += 4 * tensor.numel() as u64;
    }
    let meta = CheckpointMeta {
        version: FORMAT_VERSION,
        spec: model.spec().clone(),
        epoch,
        val_loss,
        tensors,
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(8 + meta_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (_, tensor) in &params {
        for &v in tensor.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, &out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_payload(payload: &[u8], entry: &TensorEntry) -> Result<Vec<f32>, ModelError> {
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + 4 * numel;
    if end > payload.len() {
        return Err(ModelError::Format(format!(
            "payload truncated: tensor `{}` needs bytes {start}..{end} but only {} are present",
            entry.name,
            payload.len()
        )));
    }
    Ok(payload[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// True when the stored spec differs from the expected one only by the CNN
/// input channel count going from 3 to 1, which is healed by summing the
/// first convolution's channel slices.
fn adaptable(stored: &AssemblySpec, expected: &AssemblySpec) -> bool {
    match (&stored.cnn, &expected.cnn) {
        (Some(s), Some(e)) if s.in_channels == 3 && e.in_channels == 1 => {
            let mut relabeled = stored.clone();
            relabeled.cnn.as_mut().expect("cnn present").in_channels = 1;
            relabeled == *expected
        }
        _ => false,
    }
}

/// Reads a checkpoint and reconstructs the model it describes. `expected`
/// must match the stored spec, except that a model saved with 3 input
/// channels may be loaded for 1-channel use; its first convolution is
/// adapted automatically. Any other disagreement is an error naming the
/// offending tensor or spec field, and nothing partial is returned.
pub fn load_checkpoint(
    path: &Path,
    expected: &AssemblySpec,
) -> Result<(ModelAssembly, CheckpointMeta), ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(ModelError::Format(format!(
            "file is {} bytes, too short for the header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(ModelError::Format("bad magic, not a weights file".into()));
    }
    let meta_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if 8 + meta_len > bytes.len() {
        return Err(ModelError::Format(format!(
            "metadata block claims {meta_len} bytes but the file holds {}",
            bytes.len() - 8
        )));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[8..8 + meta_len])?;
    if meta.version != FORMAT_VERSION {
        return Err(ModelError::Format(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            meta.version
        )));
    }
    let adapt = if meta.spec == *expected {
        false
    } else if adaptable(&meta.spec, expected) {
        true
    } else {
        return Err(ModelError::SpecMismatch(describe_mismatch(&meta.spec, expected)));
    };
    let payload = &bytes[8 + meta_len..];

    let model = build_model(expected, &mut ChaCha8Rng::seed_from_u64(0))?;
    let registry = model.params();
    if meta.tensors.len() != registry.len() {
        return Err(ModelError::Format(format!(
            "directory lists {} tensors but the model has {}",
            meta.tensors.len(),
            registry.len()
        )));
    }
    // Stage every tensor before touching the model so failures leave
    // nothing half-loaded.
    let mut staged: Vec<(String, Vec<f32>)> = Vec::with_capacity(registry.len());
    for (entry, (name, param)) in meta.tensors.iter().zip(&registry) {
        if entry.name != *name {
            return Err(ModelError::Format(format!(
                "directory entry `{}` where `{name}` was expected",
                entry.name
            )));
        }
        let values = read_payload(payload, entry)?;
        if adapt && name == "cnn.block0.weight" {
            let stored = Tensor::new(&entry.shape, values, false)
                .map_err(ModelError::Tensor)?;
            let adapted = adapt_first_layer(&stored)?;
            if adapted.shape() != param.shape() {
                return Err(ModelError::TensorMismatch {
                    name: name.clone(),
                    expected: param.shape().to_vec(),
                    found: adapted.shape().to_vec(),
                });
            }
            staged.push((name.clone(), adapted.to_vec()));
        } else {
            if entry.shape != param.shape() {
                return Err(ModelError::TensorMismatch {
                    name: name.clone(),
                    expected: param.shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
            staged.push((name.clone(), values));
        }
    }
    for (name, values) in staged {
        model.set_param(&name, &values)?;
    }
    Ok((model, meta))
}

fn describe_mismatch(stored: &AssemblySpec, expected: &AssemblySpec) -> String {
    if stored.task != expected.task {
        return format!("stored task {} vs requested {}", stored.task, expected.task);
    }
    if stored.label_specs != expected.label_specs {
        return "stored label set differs from the requested one".into();
    }
    if stored.modality != expected.modality {
        return "stored modality differs from the requested one".into();
    }
    if stored.mlp != expected.mlp {
        return "stored mlp spec differs from the requested one".into();
    }
    "stored cnn spec differs from the requested one".into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{LabelSpec, Task};
    use crate::tensor::{Mode, Tensor};
    use crate::model::{CnnSpec, MlpSpec, Modality};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> AssemblySpec {
        AssemblySpec {
            task: Task::Classification,
            label_specs: vec![LabelSpec::classification("y", 3)],
            modality: Modality::Both,
            mlp: Some(MlpSpec { input_width: 2, hidden: vec![4], dropout: 0.0 }),
            cnn: Some(CnnSpec { in_channels: 1, depth: 2, base_channels: 4 }),
        }
    }

    fn build(seed: u64) -> ModelAssembly {
        build_model(&spec(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let model = build(3);
        let a = dir.path().join("a.nvs");
        let b = dir.path().join("b.nvs");
        save_checkpoint(&model, &a, 7, 0.25).unwrap();
        save_checkpoint(&model, &b, 7, 0.25).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = build(11);
        let path = dir.path().join("w.nvs");
        save_checkpoint(&model, &path, 4, 1.5).unwrap();
        let (loaded, meta) = load_checkpoint(&path, &spec()).unwrap();
        assert_eq!(meta.epoch, 4);
        assert_eq!(meta.val_loss, 1.5);
        for ((n1, p1), (n2, p2)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(n1, n2);
            let a = p1.to_vec();
            let b = p2.to_vec();
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{n1}");
            }
        }
        // Resaving the loaded model reproduces the file byte for byte.
        let again = dir.path().join("w2.nvs");
        save_checkpoint(&loaded, &again, 4, 1.5).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn loaded_model_forward_matches_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = build(5);
        let path = dir.path().join("w.nvs");
        save_checkpoint(&model, &path, 1, 0.5).unwrap();
        let (loaded, _) = load_checkpoint(&path, &spec()).unwrap();
        let images = Tensor::new(&[2, 1, 8, 8], vec![0.3; 2 * 64], false).unwrap();
        let tabular = Tensor::new(&[2, 2], vec![0.1, 0.9, -0.4, 0.2], false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = model.forward(Some(&images), Some(&tabular), Mode::Eval, &mut rng, None).unwrap();
        let b = loaded.forward(Some(&images), Some(&tabular), Mode::Eval, &mut rng, None).unwrap();
        for (x, y) in a[0].to_vec().iter().zip(b[0].to_vec().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn truncated_files_error_out() {
        let dir = tempfile::tempdir().unwrap();
        let model = build(2);
        let path = dir.path().join("w.nvs");
        save_checkpoint(&model, &path, 1, 0.5).unwrap();
        let full = fs::read(&path).unwrap();
        for cut in [0, 3, 7, 20, full.len() - 1] {
            let stub = dir.path().join("cut.nvs");
            fs::write(&stub, &full[..cut]).unwrap();
            let err = load_checkpoint(&stub, &spec());
            assert!(err.is_err(), "cut at {cut} should not load");
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.nvs");
        fs::write(&path, b"PNG0aaaaaaaaaaaaaaaa").unwrap();
        let err = load_checkpoint(&path, &spec()).unwrap_err();
        assert!(matches!(err, ModelError::Format(_)));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = build(2);
        let path = dir.path().join("w.nvs");
        save_checkpoint(&model, &path, 1, 0.5).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let meta_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let mut meta: CheckpointMeta = serde_json::from_slice(&bytes[8..8 + meta_len]).unwrap();
        meta.version = 9;
        let new_meta = serde_json::to_vec(&meta).unwrap();
        let mut rebuilt = Vec::new();
        rebuilt.extend_from_slice(&bytes[0..4]);
        rebuilt.extend_from_slice(&(new_meta.len() as u32).to_le_bytes());
        rebuilt.extend_from_slice(&new_meta);
        rebuilt.extend_from_slice(&bytes[8 + meta_len..]);
        bytes = rebuilt;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, &spec()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn spec_disagreement_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let model = build(2);
        let path = dir.path().join("w.nvs");
        save_checkpoint(&model, &path, 1, 0.5).unwrap();
        let mut other = spec();
        other.mlp.as_mut().unwrap().hidden = vec![8];
        let err = load_checkpoint(&path, &other).unwrap_err();
        assert!(matches!(err, ModelError::SpecMismatch(_)));
    }

    #[test]
    fn rgb_checkpoint_loads_for_grayscale_use() {
        let dir = tempfile::tempdir().unwrap();
        let mut rgb = spec();
        rgb.cnn.as_mut().unwrap().in_channels = 3;
        let model = build_model(&rgb, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let path = dir.path().join("w.nvs");
        save_checkpoint(&model, &path, 2, 0.75).unwrap();

        let (loaded, _) = load_checkpoint(&path, &spec()).unwrap();
        let first = loaded
            .params()
            .into_iter()
            .find(|(n, _)| n == "cnn.block0.weight")
            .unwrap()
            .1;
        assert_eq!(first.shape(), &[4, 1, 3, 3]);
        let original = model
            .params()
            .into_iter()
            .find(|(n, _)| n == "cnn.block0.weight")
            .unwrap()
            .1;
        let adapted = adapt_first_layer(&original).unwrap();
        assert_eq!(adapted.to_vec(), first.to_vec());
        // Deeper blocks transfer untouched.
        let stored_b1 = model.params().into_iter().find(|(n, _)| n == "cnn.block1.weight").unwrap().1;
        let loaded_b1 = loaded.params().into_iter().find(|(n, _)| n == "cnn.block1.weight").unwrap().1;
        assert_eq!(stored_b1.to_vec(), loaded_b1.to_vec());
    }

    #[test]
    fn grayscale_checkpoint_does_not_load_for_rgb_use() {
        let dir = tempfile::tempdir().unwrap();
        let model = build(2);
        let path = dir.path().join("w.nvs");
        save_checkpoint(&model, &path, 1, 0.5).unwrap();
        let mut rgb = spec();
        rgb.cnn.as_mut().unwrap().in_channels = 3;
        assert!(load_checkpoint(&path, &rgb).is_err());
    }

    #[test]
    fn non_finite_val_loss_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let model = build(2);
        let path = dir.path().join("w.nvs");
        assert!(save_checkpoint(&model, &path, 1, f32::NAN).is_err());
        assert!(!path.exists());
    }
}
