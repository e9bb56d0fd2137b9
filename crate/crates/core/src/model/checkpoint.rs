//! Model checkpoint format.
//!
//! ```text
//! {"format":"nest-lab-model","version":1,...}\n   <- JSON header, one line
//! <param_count × f64, little-endian>             <- SegModel::params_flat order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backbone, Head, Linear, SegModel, Trainable};
use crate::error::{LabError, Result};
use crate::numerics::Mat;

pub const MODEL_FORMAT: &str = "nest-lab-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerHeader {
    pub inputs: usize,
    pub outputs: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub layers: Vec<LayerHeader>,
    pub feature_dim: usize,
    pub classes: usize,
    pub head_bias: bool,
    pub trainable: Trainable,
    pub param_count: usize,
}

/// Splits a file into its JSON header line and the trailing binary payload.
pub(crate) fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| LabError::data("checkpoint has no header line"))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

pub(crate) fn decode_f64s(payload: &[u8], expected: usize) -> Result<Vec<f64>> {
    if payload.len() != expected * 8 {
        return Err(LabError::data(format!(
            "payload holds {} bytes, header promises {expected} values",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn encode(header: &impl Serialize, values: &[f64]) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(header).map_err(|e| LabError::Io(e.to_string()))?;
    bytes.push(b'\n');
    bytes.reserve(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn model_header(model: &SegModel) -> ModelHeader {
    ModelHeader {
        format: MODEL_FORMAT.into(),
        version: 1,
        input_dim: model.backbone.input_dim(),
        layers: model
            .backbone
            .layers()
            .iter()
            .map(|l| LayerHeader {
                inputs: l.in_dim(),
                outputs: l.out_dim(),
                relu: l.relu,
            })
            .collect(),
        feature_dim: model.head.dim(),
        classes: model.head.num_classes(),
        head_bias: model.head.biases.is_some(),
        trainable: model.trainable,
        param_count: model.param_count(),
    }
}

pub fn save_model(model: &SegModel, path: &Path) -> Result<()> {
    fs::write(path, encode(&model_header(model), &model.params_flat())?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SegModel> {
    let bytes = fs::read(path)?;
    let (head_bytes, payload) = split_header(&bytes)?;
    let header: ModelHeader =
        serde_json::from_slice(head_bytes).map_err(|e| LabError::data(format!("checkpoint header: {e}")))?;
    if header.format != MODEL_FORMAT || header.version != 1 {
        return Err(LabError::data(format!("not a v1 {MODEL_FORMAT} file")));
    }
    let values = decode_f64s(payload, header.param_count)?;

    let layers = header
        .layers
        .iter()
        .map(|l| Linear::new(Mat::zeros(l.outputs, l.inputs), vec![0.0; l.outputs], l.relu))
        .collect::<Result<Vec<_>>>()?;
    let backbone = Backbone::new(header.input_dim, layers)?;
    let head = Head::new(
        Mat::zeros(header.feature_dim, header.classes),
        header.head_bias.then(|| vec![0.0; header.classes]),
    )?;
    let mut model = SegModel::new(backbone, head)?;
    model.trainable = header.trainable;
    model.set_params_flat(&values)?;
    model.check_finite()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = Rng::new(17);
        let backbone = Backbone::random(4, &[6, 5], &mut rng);
        let head = Head::random(5, 3, true, &mut rng);
        let mut model = SegModel::new(backbone, head).unwrap();
        model.trainable.frozen_columns = 2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
        let a: Vec<u64> = model.params_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = loaded.params_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = SegModel::new(Backbone::identity(2), Head::new(Mat::ones(2, 2), None).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(LabError::Data(_))));
    }
}
