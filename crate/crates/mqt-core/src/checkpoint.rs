//! Checkpoints: a flat binary of named fp64 parameter arrays next to a JSON
//! manifest recording name, shape, and byte offset per array, plus the model
//! configuration and task needed to rebuild and evaluate the model.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::TaskSpec;
use crate::vlm::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub params: Vec<ParamEntry>,
}

fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

fn json_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

/// Serialized checkpoint bytes: (manifest JSON, parameter binary).
pub fn to_bytes(model: &Model, task: &TaskSpec) -> (Vec<u8>, Vec<u8>) {
    let mut bin: Vec<u8> = Vec::new();
    let mut params = Vec::new();
    model.for_each_param(&mut |name, t| {
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            byte_offset: bin.len() as u64,
        });
        for v in t.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        model: model.cfg,
        task: *task,
        params,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    (json, bin)
}

/// Write `<stem>.bin` and `<stem>.json`.
pub fn save(model: &Model, task: &TaskSpec, stem: &Path) -> Result<()> {
    let (json, bin) = to_bytes(model, task);
    std::fs::File::create(bin_path(stem))?.write_all(&bin)?;
    std::fs::File::create(json_path(stem))?.write_all(&json)?;
    Ok(())
}

/// Load a checkpoint saved by [`save`]. Accepts the stem, the `.bin`, or the
/// `.json` path.
pub fn load(path: &Path) -> Result<(Model, TaskSpec)> {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let manifest_bytes = std::fs::read(json_path(&stem)).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", json_path(&stem).display()))
    })?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let bin = std::fs::read(bin_path(&stem))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", bin_path(&stem).display())))?;

    let mut model = Model::init(manifest.model, 0)?;
    let mut remaining: std::collections::HashSet<String> =
        model.param_names().into_iter().collect();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + numel * 8;
        if end > bin.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {} overruns the binary payload",
                entry.name
            )));
        }
        let values: Vec<f64> = bin[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut hit = false;
        model.with_param_mut(&entry.name, &mut |t| {
            hit = true;
            if t.shape() == entry.shape.as_slice() {
                t.data_mut().copy_from_slice(&values);
            }
        });
        if !hit {
            return Err(Error::Checkpoint(format!(
                "manifest names unknown parameter {}",
                entry.name
            )));
        }
        let expected_shape = model.param(&entry.name).unwrap().shape().to_vec();
        if expected_shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                entry.name, entry.shape, expected_shape
            )));
        }
        remaining.remove(&entry.name);
    }
    if !remaining.is_empty() {
        let mut names: Vec<String> = remaining.into_iter().collect();
        names.sort();
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing parameters: {}",
            names.join(", ")
        )));
    }
    Ok((model, manifest.task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    fn spec() -> TaskSpec {
        let mut s = TaskSpec::new(TaskKind::DetailLocate, 7);
        s.image_size = 12;
        s.answer_classes = 4;
        s
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let model = Model::init(ModelConfig::reduced(), 5).unwrap();
        save(&model, &spec(), &stem).unwrap();
        let (loaded, task) = load(&stem).unwrap();
        assert_eq!(task.name, TaskKind::DetailLocate);

        let digest = |m: &Model| {
            let mut v = Vec::new();
            m.for_each_param(&mut |_, t| v.extend(t.data().iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(digest(&model), digest(&loaded));
        // accepts .bin and .json paths too
        assert!(load(&stem.with_extension("bin")).is_ok());
        assert!(load(&stem.with_extension("json")).is_ok());
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let model = Model::init(ModelConfig::reduced(), 6).unwrap();
        let (j1, b1) = to_bytes(&model, &spec());
        let (j2, b2) = to_bytes(&model, &spec());
        assert_eq!(j1, j2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn version_field_is_mandatory_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let model = Model::init(ModelConfig::reduced(), 8).unwrap();
        save(&model, &spec(), &stem).unwrap();

        let manifest_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        assert!(text.contains("\"version\""));
        let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
        std::fs::write(&manifest_path, bumped).unwrap();
        let err = load(&stem).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let model = Model::init(ModelConfig::reduced(), 9).unwrap();
        save(&model, &spec(), &stem).unwrap();
        let bin = std::fs::read(stem.with_extension("bin")).unwrap();
        std::fs::write(stem.with_extension("bin"), &bin[..bin.len() / 2]).unwrap();
        assert!(matches!(load(&stem), Err(Error::Checkpoint(_))));
    }
}
