//! Model weight checkpoints (`SSCW`): a magic, a format version, and a flat
//! list of named tensors with explicit dims, written atomically.
//!
//! Byte layout, little-endian throughout:
//! `"SSCW"`, `u32` version, `u32` tensor count, then per tensor:
//! `u16` name length, the UTF-8 name, `u8` rank, `u32` dim per rank,
//! and the `f32` data in flat layout.

use crate::error::{Error, Result};
use crate::formats::{check_magic, write_atomic, Cursor, FORMAT_VERSION};
use crate::network::SscModel;
use std::path::Path;

const SSCW_MAGIC: &[u8; 4] = b"SSCW";

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes entries and writes them atomically.
pub fn save_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(SSCW_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::invalid("save_checkpoint", format!("bad tensor name {:?}", e.name)));
        }
        if e.dims.is_empty() || e.dims.len() > u8::MAX as usize {
            return Err(Error::invalid("save_checkpoint", format!("{:?} has rank {}", e.name, e.dims.len())));
        }
        let count: usize = e.dims.iter().product();
        if count != e.data.len() {
            return Err(Error::shape(
                format!("checkpoint tensor {:?}", e.name),
                format!("{count} elements for dims {:?}", e.dims),
                e.data.len().to_string(),
            ));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor::new(&bytes, path);
    check_magic(&mut c, SSCW_MAGIC)?;
    let count = c.u32("tensor count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::parse(path, c.position() as u64, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u8("rank")? as usize;
        if rank == 0 {
            return Err(Error::parse(path, c.position() as u64, format!("tensor {name:?} has rank 0")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = c.u32("dim")? as usize;
            elements = elements.saturating_mul(d as u64);
            dims.push(d);
        }
        if elements == 0 || elements * 4 > c.remaining() as u64 {
            return Err(Error::parse(
                path,
                c.position() as u64,
                format!("tensor {name:?} dims {dims:?} do not fit the file"),
            ));
        }
        let raw = c.take(elements as usize * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(CheckpointEntry { name, dims, data });
    }
    if c.remaining() != 0 {
        return Err(Error::parse(path, c.position() as u64, "trailing bytes after last tensor"));
    }
    Ok(entries)
}

/// Snapshots every parameter of a model, stream-prefixed for two-stream
/// models, in canonical order.
pub fn model_entries(model: &SscModel) -> Vec<CheckpointEntry> {
    let mut entries = Vec::new();
    for (graph, prefix) in model.graphs().into_iter().zip(model.stream_prefixes()) {
        graph.visit_parameters(|name, dims, data| {
            entries.push(CheckpointEntry {
                name: format!("{prefix}{name}"),
                dims: dims.to_vec(),
                data: data.to_vec(),
            });
        });
    }
    entries
}

/// Loads entries into a model. Names, order-insensitive, must match the
/// model's parameter set exactly, with identical dims.
pub fn apply_entries(model: &mut SscModel, entries: &[CheckpointEntry]) -> Result<()> {
    let mut used = vec![false; entries.len()];
    let prefixes: Vec<&'static str> = model.stream_prefixes();
    let mut missing: Option<String> = None;
    let mut total = 0usize;
    for (graph, prefix) in model.graphs_mut().into_iter().zip(prefixes) {
        graph.visit_parameters_mut(|name, dims, data| {
            if missing.is_some() {
                return;
            }
            total += 1;
            let full = format!("{prefix}{name}");
            match entries.iter().position(|e| e.name == full) {
                None => missing = Some(format!("checkpoint lacks tensor {full:?}")),
                Some(i) => {
                    let e = &entries[i];
                    if e.dims != dims || e.data.len() != data.len() {
                        missing = Some(format!(
                            "tensor {full:?} dims {:?} do not match the model's {:?}",
                            e.dims, dims
                        ));
                    } else {
                        used[i] = true;
                        data.copy_from_slice(&e.data);
                    }
                }
            }
        });
    }
    if let Some(why) = missing {
        return Err(Error::invalid("apply_entries", why));
    }
    if total != entries.len() {
        let extra: Vec<&str> = entries
            .iter()
            .zip(&used)
            .filter(|(_, &u)| !u)
            .map(|(e, _)| e.name.as_str())
            .collect();
        return Err(Error::invalid(
            "apply_entries",
            format!("checkpoint has {} tensors the model does not: {extra:?}", extra.len()),
        ));
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &SscModel) -> Result<()> {
    save_checkpoint(path, &model_entries(model))
}

pub fn load_into_model(path: &Path, model: &mut SscModel) -> Result<()> {
    let entries = load_checkpoint(path)?;
    apply_entries(model, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_default_model, FusionMode, SEMANTIC_INPUT};
    use crate::preset::ScalePreset;
    use crate::tensor::Tensor;
    use crate::volume::EncodingScheme;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn toy_model() -> SscModel {
        let mut model = build_default_model(
            &EncodingScheme::three_channel(),
            FusionMode::None,
            &ScalePreset::Toy.widths(),
        )
        .unwrap();
        let mut k = 0.0f32;
        for g in model.graphs_mut() {
            g.visit_parameters_mut(|_, _, data| {
                for v in data {
                    k += 1.0;
                    *v = (k * 0.013).sin() * 0.1;
                }
            });
        }
        model
    }

    #[test]
    fn roundtrip_restores_every_parameter_bit_for_bit() {
        let dir = tmp();
        let path = dir.path().join("model.sscw");
        let model = toy_model();
        save_model(&path, &model).unwrap();
        let mut fresh = build_default_model(
            &EncodingScheme::three_channel(),
            FusionMode::None,
            &ScalePreset::Toy.widths(),
        )
        .unwrap();
        load_into_model(&path, &mut fresh).unwrap();
        assert_eq!(model_entries(&model), model_entries(&fresh));
        // And a forward pass through the restored model is bit-identical.
        let x = Tensor::from_fn([3, 8, 8, 8], |c, [x, y, z]| ((c + x + y + z) % 5) as f32 * 0.2);
        let a = model.predict_probabilities(&[(SEMANTIC_INPUT, &x)]).unwrap();
        let b = fresh.predict_probabilities(&[(SEMANTIC_INPUT, &x)]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn second_save_of_identical_weights_is_byte_identical() {
        let dir = tmp();
        let a = dir.path().join("a.sscw");
        let b = dir.path().join("b.sscw");
        let model = toy_model();
        save_model(&a, &model).unwrap();
        save_model(&b, &model).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("model.sscw");
        save_model(&path, &toy_model()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tmp();
        let path = dir.path().join("model.sscw");
        save_model(&path, &toy_model()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("model.sscw");
        save_model(&path, &toy_model()).unwrap();
        // One-hot input changes the stem's input channel count.
        let mut other = build_default_model(
            &EncodingScheme::one_hot(),
            FusionMode::None,
            &ScalePreset::Toy.widths(),
        )
        .unwrap();
        let err = load_into_model(&path, &mut other).unwrap_err();
        assert!(err.to_string().contains("stem.weight"));
    }

    #[test]
    fn extra_tensors_are_rejected() {
        let dir = tmp();
        let path = dir.path().join("model.sscw");
        let model = toy_model();
        let mut entries = model_entries(&model);
        entries.push(CheckpointEntry { name: "ghost".into(), dims: vec![2], data: vec![0.0, 1.0] });
        save_checkpoint(&path, &entries).unwrap();
        let mut fresh = build_default_model(
            &EncodingScheme::three_channel(),
            FusionMode::None,
            &ScalePreset::Toy.widths(),
        )
        .unwrap();
        let err = load_into_model(&path, &mut fresh).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn two_stream_names_carry_stream_prefixes() {
        let model = build_default_model(
            &EncodingScheme::three_channel(),
            FusionMode::Late,
            &ScalePreset::Toy.widths(),
        )
        .unwrap();
        let entries = model_entries(&model);
        assert!(entries.iter().any(|e| e.name == "semantic/stem.weight"));
        assert!(entries.iter().any(|e| e.name == "tsdf/stem.weight"));
        assert_eq!(
            entries.iter().map(|e| e.data.len()).sum::<usize>(),
            model.param_count()
        );
    }
}
