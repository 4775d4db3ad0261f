//! On-disk parameter store: `manifest.json` plus a little-endian `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub metadata: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn write_checkpoint<'a>(
    dir: &Path,
    metadata: serde_json::Value,
    params: impl IntoIterator<Item = (String, &'a Tensor)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in params {
        for &x in t.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
        entries.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            precision: t.precision(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        metadata,
        params: entries,
    };
    fs::write(dir.join(PAYLOAD_FILE), payload)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    let err = |message: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        message,
    };
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| err(e.to_string()))?)
            .map_err(|e| err(e.to_string()))?;
    if manifest.format != FORMAT_VERSION {
        return Err(err(format!(
            "format {} unsupported (expected {FORMAT_VERSION})",
            manifest.format
        )));
    }
    let payload = fs::read(dir.join(PAYLOAD_FILE)).map_err(|e| err(e.to_string()))?;
    let mut out = BTreeMap::new();
    for e in manifest.params {
        let end = (e.offset + e.len) * 4;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(err(format!("entry `{}` is inconsistent with the payload", e.name)));
        }
        let data = payload[e.offset * 4..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(e.shape, data)?.with_precision(e.precision);
        out.insert(e.name, t);
    }
    Ok((manifest.metadata, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new([2, 2], vec![1.0, 0.5, -2.25, 3.0]).unwrap();
        let b = crate::numerics::quantize_half(&Tensor::vector(vec![0.1]));
        write_checkpoint(
            dir.path(),
            serde_json::json!({"k": 1}),
            [("a".to_string(), &a), ("b".to_string(), &b)],
        )
        .unwrap();
        let (meta, params) = read_checkpoint(dir.path()).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(params["a"], a);
        assert_eq!(params["b"].precision(), Precision::EmulatedHalf);
        assert_eq!(params["b"].data(), b.data());
        let raw = std::fs::read(dir.path().join(PAYLOAD_FILE)).unwrap();
        assert_eq!(raw.len(), 5 * 4);
        assert_eq!(&raw[4..8], &0.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), serde_json::Value::Null, std::iter::empty()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format\": 1", "\"format\": 99");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_checkpoint(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
