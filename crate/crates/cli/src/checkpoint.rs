//! `NCADIFF1` checkpoint files.
//!
//! ```text
//! "NCADIFF1" | manifest length: u64 LE | manifest JSON | payload (f32 LE)
//! ```
//!
//! The manifest holds `{format, metadata, payload_bytes, tensors: [{name, shape, dtype,
//! byte_offset}]}`; offsets are relative to the start of the payload and tile it exactly.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use diffnca_core::optim::{Adam, Ema, TrainState};
use diffnca_core::{Model, Tensor};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"NCADIFF1";
const FORMAT: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{}: not a checkpoint (missing NCADIFF header)", path.display())]
    NotCheckpoint { path: PathBuf },
    #[error("{}: unsupported checkpoint version `{found}`, this build reads NCADIFF1", path.display())]
    VersionMismatch { path: PathBuf, found: String },
    #[error("{}: corrupt manifest: {detail}", path.display())]
    CorruptManifest { path: PathBuf, detail: String },
    #[error("{}: truncated payload: expected {expected} bytes, found {found}", path.display())]
    TruncatedPayload { path: PathBuf, expected: u64, found: u64 },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    metadata: Value,
    payload_bytes: u64,
    tensors: Vec<TensorEntry>,
}

/// Raw file contents: metadata plus named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes next to `path` and renames into place, so readers never see a partial file.
pub fn write_tensor_file(path: &Path, metadata: &Value, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
        });
        offset += 4 * t.len() as u64;
    }
    let manifest = Manifest {
        format: FORMAT,
        metadata: metadata.clone(),
        payload_bytes: offset,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let corrupt = |detail: String| CheckpointError::CorruptManifest {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 || &bytes[..7] != b"NCADIFF" {
        return Err(CheckpointError::NotCheckpoint {
            path: path.to_path_buf(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::VersionMismatch {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < 16 {
        return Err(corrupt("header ends before the manifest length".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.len() - 16;
    if len > body {
        return Err(corrupt(format!(
            "manifest length {len} exceeds the {body} bytes that follow"
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| corrupt(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::VersionMismatch {
            path: path.to_path_buf(),
            found: format!("manifest format {}", manifest.format),
        });
    }
    let payload = &bytes[16 + len..];
    let mut expected = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(corrupt(format!("{}: dtype `{}` is not f32", e.name, e.dtype)));
        }
        if e.byte_offset != expected {
            return Err(corrupt(format!(
                "{}: offset {} but the previous tensor ends at {expected}",
                e.name, e.byte_offset
            )));
        }
        expected += 4 * e.shape.iter().product::<usize>() as u64;
    }
    if expected != manifest.payload_bytes {
        return Err(corrupt(format!(
            "tensors cover {expected} bytes but payload_bytes is {}",
            manifest.payload_bytes
        )));
    }
    let found = payload.len() as u64;
    if found < expected {
        return Err(CheckpointError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(corrupt(format!(
            "{} trailing bytes after the payload",
            found - expected
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let start = e.byte_offset as usize;
        let n: usize = e.shape.iter().product();
        let data = payload[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&e.shape, data).map_err(|err| corrupt(err.to_string()))?;
        tensors.push((e.name, t));
    }
    Ok(TensorFile {
        metadata: manifest.metadata,
        tensors,
    })
}

pub fn file_sha256(path: &Path) -> std::result::Result<String, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Training state plus the run that produced it. The random state needs no storage:
/// every draw comes from a stream keyed by `(train.seed, step)`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState<f32>,
}

const SECTIONS: [&str; 4] = ["model", "ema", "adam.m", "adam.v"];

pub fn save_checkpoint(path: &Path, config: &RunConfig, state: &TrainState<f32>) -> Result<()> {
    let metadata = serde_json::json!({
        "config": config.to_json(),
        "step": state.step,
        "rng": { "seed": config.train.seed, "next_step": state.step },
    });
    let names = state.model.tensor_names();
    let models = [&state.model, &state.ema.shadow, &state.adam.m, &state.adam.v];
    let mut tensors = Vec::new();
    for (section, m) in SECTIONS.iter().zip(models) {
        for (name, t) in names.iter().zip(m.tensors()) {
            tensors.push((format!("{section}.{name}"), t));
        }
    }
    write_tensor_file(path, &metadata, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = read_tensor_file(path)?;
    let corrupt = |detail: String| CheckpointError::CorruptManifest {
        path: path.to_path_buf(),
        detail,
    };
    let config: RunConfig = serde_json::from_value(file.metadata["config"].clone())
        .map_err(|e| corrupt(format!("metadata.config: {e}")))?;
    let step = file.metadata["step"]
        .as_u64()
        .ok_or_else(|| corrupt("metadata.step missing".into()))?;
    let template = Model::<f32>::new(config.model_config(), 0).map_err(|e| corrupt(e.to_string()))?;
    let names = template.tensor_names();
    let mut lookup: std::collections::HashMap<String, Tensor<f32>> = file.tensors.into_iter().collect();
    let mut take = |section: &str| -> Result<Model<f32>> {
        let mut m = template.zeros_like();
        for (name, slot) in names.iter().zip(m.tensors_mut()) {
            let key = format!("{section}.{name}");
            let t = lookup
                .remove(&key)
                .ok_or_else(|| corrupt(format!("missing tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(corrupt(format!(
                    "{key}: shape {:?}, config needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(m)
    };
    let model = take("model")?;
    let ema = take("ema")?;
    let m = take("adam.m")?;
    let v = take("adam.v")?;
    if let Some(extra) = lookup.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    let state = TrainState {
        model,
        adam: Adam { m, v },
        ema: Ema {
            shadow: ema,
            decay: config.train.ema_decay,
        },
        step,
    };
    Ok(Checkpoint { config, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_state() -> (RunConfig, TrainState<f32>) {
        let mut config = RunConfig::preset("desk").unwrap();
        config.c = 8;
        config.h = 8;
        config.embed_hidden = 4;
        config.cond_hidden = 2;
        let model = Model::<f32>::new(config.model_config(), 3).unwrap();
        let mut state = TrainState::new(model, &config.train_config());
        state.step = 42;
        for (i, t) in state.adam.v.tensors_mut().into_iter().enumerate() {
            t.fill(i as f32 * 0.5 - 3.25);
        }
        (config, state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let (config, state) = sample_state();
        save_checkpoint(&path, &config, &state).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, config);
        assert_eq!(back.state, state);
        // no temp file left behind
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn damaged_files_fail_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let (config, state) = sample_state();
        save_checkpoint(&path, &config, &state).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(&cut) {
            Err(CheckpointError::TruncatedPayload { expected, found, .. }) => assert_eq!(expected - found, 4),
            other => panic!("{other:?}"),
        }

        let mut v2 = bytes.clone();
        v2[7] = b'2';
        let p = dir.path().join("v2.ckpt");
        std::fs::write(&p, &v2).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::VersionMismatch { .. })
        ));

        let mut bad = bytes.clone();
        bad[20] = b'#';
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::CorruptManifest { .. })
        ));

        let p = dir.path().join("png.ckpt");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\n0000").unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::NotCheckpoint { .. })
        ));
    }

    #[test]
    fn offsets_tile_the_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let a = Tensor::from_vec(&[2, 3], vec![1.0f32, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![f32::MAX]).unwrap();
        write_tensor_file(
            &path,
            &serde_json::json!({"k": 1}),
            &[("a".into(), &a), ("b".into(), &b)],
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(manifest["tensors"][1]["byte_offset"], 24);
        assert_eq!(manifest["payload_bytes"], 28);
        assert_eq!(bytes.len(), 16 + len + 28);
        let back = read_tensor_file(&path).unwrap();
        assert_eq!(back.tensors[0].1.data()[5].to_bits(), (-0.0f32).to_bits());
        assert_eq!(back.tensors[1].1, b);
    }
}
