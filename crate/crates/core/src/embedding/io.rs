//! Model persistence.
//!
//! Layout: the header line, one line of JSON metadata, then the parameter
//! count as a little-endian `u64` followed by that many little-endian `f32`
//! values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingConfig, EmbeddingError, EmbeddingModel};
use crate::traces::RepKind;

pub const MODEL_HEADER: &str = "WFSE-EMB-1";

#[derive(Serialize, Deserialize)]
struct Meta {
    config: EmbeddingConfig,
    kind: RepKind,
    input_len: usize,
    num_classes: usize,
    input_scale: f64,
    trained: bool,
    loss_history: Vec<f64>,
}

pub fn save_model(model: &EmbeddingModel, path: &Path) -> Result<(), EmbeddingError> {
    let meta = Meta {
        config: model.config.clone(),
        kind: model.kind,
        input_len: model.input_len,
        num_classes: model.num_classes,
        input_scale: model.input_scale,
        trained: model.trained,
        loss_history: model.loss_history.clone(),
    };
    let json = serde_json::to_string(&meta).map_err(|e| EmbeddingError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 32 + 4 * model.params.len());
    out.extend_from_slice(MODEL_HEADER.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for &p in &model.params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8]), EmbeddingError> {
    let pos = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| EmbeddingError::Format("truncated file".into()))?;
    Ok((&bytes[..pos], &bytes[pos + 1..]))
}

/// Loads a model; parameters come back at `f32` precision.
pub fn load_model(path: &Path) -> Result<EmbeddingModel, EmbeddingError> {
    let bytes = fs::read(path)?;
    let (header, rest) = split_line(&bytes)?;
    if header != MODEL_HEADER.as_bytes() {
        return Err(EmbeddingError::Format(format!(
            "unknown header {:?}",
            String::from_utf8_lossy(header)
        )));
    }
    let (json, rest) = split_line(rest)?;
    let meta: Meta = serde_json::from_slice(json).map_err(|e| EmbeddingError::Format(e.to_string()))?;
    let (count, body) = rest
        .split_first_chunk::<8>()
        .ok_or_else(|| EmbeddingError::Format("missing parameter count".into()))?;
    let count = u64::from_le_bytes(*count) as usize;
    if body.len() != count * 4 {
        return Err(EmbeddingError::Format(format!(
            "expected {count} parameters, found {} bytes",
            body.len()
        )));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut model = EmbeddingModel::zeroed(meta.config, meta.kind, meta.input_len, meta.num_classes)?;
    model.set_params(params)?;
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(EmbeddingError::Format("non-finite parameter".into()));
    }
    model.input_scale = meta.input_scale;
    model.trained = meta.trained;
    model.loss_history = meta.loss_history;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let cfg = EmbeddingConfig {
            seed: 4,
            ..EmbeddingConfig::default()
        };
        let mut model = EmbeddingModel::init(cfg, RepKind::Timing, 64, 4).unwrap();
        model.input_scale = 0.125;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.kind(), RepKind::Timing);
        assert_eq!(back.input_scale(), 0.125);
        assert_eq!(back.config(), model.config());
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"WFSE-EMB-1\n"));
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        fs::write(&path, b"WFSE-EMB-9\n{}\n").unwrap();
        assert!(matches!(load_model(&path), Err(EmbeddingError::Format(_))));
        let model = EmbeddingModel::init(EmbeddingConfig::default(), RepKind::Directional, 64, 2).unwrap();
        save_model(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(EmbeddingError::Format(_))));
    }
}
