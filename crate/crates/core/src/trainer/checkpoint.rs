//! Checkpoint layout: one line of JSON describing the tensors, a `\n`, then
//! every tensor's values in header order as little-endian `f64`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Encoder, TrainedModel};
use crate::error::{Error, Result};
use crate::geometry::ClassWeightMatrix;
use crate::losses::{LossKind, MarginConfig};

const MAGIC: &str = "mixlab-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    loss: LossKind,
    margin: MarginConfig,
    tensors: Vec<Tensor>,
}

fn tensor(name: &str, shape: &[usize]) -> Tensor {
    Tensor {
        name: name.into(),
        shape: shape.to_vec(),
    }
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    let enc = &model.encoder;
    let mut tensors = vec![
        tensor("w1", enc.w1.shape()),
        tensor("b1", enc.b1.shape()),
        tensor("w2", enc.w2.shape()),
        tensor("b2", enc.b2.shape()),
    ];
    let mut values: Vec<&f64> = enc
        .w1
        .iter()
        .chain(&enc.b1)
        .chain(&enc.w2)
        .chain(&enc.b2)
        .collect();
    if let Some(w) = &model.weights {
        tensors.push(tensor("class_weights", w.weights().shape()));
        values.extend(w.weights().iter());
    }
    let header = Header {
        format: MAGIC.into(),
        version: VERSION,
        loss: model.loss,
        margin: model.margin,
        tensors,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::format("checkpoint", detail);
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    if header.format != MAGIC || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let body = &bytes[split + 1..];
    if body.len() % 8 != 0 {
        return Err(bad(format!("body length {} is not a multiple of 8", body.len())));
    }
    let mut data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));

    let mut take = |t: &Tensor| -> Result<Vec<f64>> {
        let n: usize = t.shape.iter().product();
        let v: Vec<f64> = data.by_ref().take(n).collect();
        if v.len() != n {
            return Err(bad(format!("tensor {} truncated", t.name)));
        }
        Ok(v)
    };
    let matrix = |t: &Tensor, v: Vec<f64>| -> Result<Array2<f64>> {
        match t.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), v).expect("length checked")),
            _ => Err(bad(format!("tensor {} should be 2-D", t.name))),
        }
    };

    let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    let expected: &[&str] = if header.loss.uses_class_weights() {
        &["w1", "b1", "w2", "b2", "class_weights"]
    } else {
        &["w1", "b1", "w2", "b2"]
    };
    if names != expected {
        return Err(bad(format!("unexpected tensors {names:?}")));
    }
    let t = &header.tensors;
    let w1 = matrix(&t[0], take(&t[0])?)?;
    let b1 = Array1::from(take(&t[1])?);
    let w2 = matrix(&t[2], take(&t[2])?)?;
    let b2 = Array1::from(take(&t[3])?);
    let weights = match t.get(4) {
        Some(tw) => Some(ClassWeightMatrix::new(matrix(tw, take(tw)?)?)?),
        None => None,
    };
    if data.next().is_some() {
        return Err(bad("trailing data".into()));
    }
    Ok(TrainedModel {
        loss: header.loss,
        margin: header.margin,
        encoder: Encoder::from_parts(w1, b1, w2, b2)?,
        weights,
    })
}
