//! Batched inference helpers.

use crate::data::Dataset;
use crate::error::Result;
use crate::model::{argmax, loss, Matrix, ModelCheckpoint};

const CHUNK: usize = 256;

/// Logits for every sample of `data`, computed in chunks.
pub fn dataset_logits(model: &ModelCheckpoint, data: &Dataset) -> Result<Matrix<f32>> {
    let k = model.spec.num_classes;
    let d = data.input_len();
    let mut out = Vec::with_capacity(data.len() * k);
    for chunk in data.inputs().chunks(CHUNK * d) {
        out.extend_from_slice(model.forward_logits(chunk)?.as_slice());
    }
    Ok(Matrix::from_vec(data.len(), k, out))
}

pub fn dataset_features(model: &ModelCheckpoint, data: &Dataset) -> Result<Matrix<f32>> {
    let p = model.spec.feature_dim();
    let d = data.input_len();
    let mut out = Vec::with_capacity(data.len() * p);
    for chunk in data.inputs().chunks(CHUNK * d) {
        out.extend_from_slice(model.forward_features(chunk)?.as_slice());
    }
    Ok(Matrix::from_vec(data.len(), p, out))
}

pub fn predictions(model: &ModelCheckpoint, data: &Dataset) -> Result<Vec<usize>> {
    Ok(dataset_logits(model, data)?.iter_rows().map(argmax).collect())
}

/// Fraction of samples whose argmax prediction equals the label; 0 for an
/// empty dataset.
pub fn accuracy(model: &ModelCheckpoint, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions(model, data)?
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mean cross-entropy over the whole dataset, evaluated in f64 on f32 logits.
pub fn dataset_loss(model: &ModelCheckpoint, data: &Dataset) -> Result<f64> {
    let logits = dataset_logits(model, data)?;
    let total: f64 = logits
        .iter_rows()
        .zip(data.labels())
        .map(|(row, &y)| {
            let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            loss::cross_entropy(&row64, y, 1.0, None)
        })
        .sum();
    Ok(total / data.len().max(1) as f64)
}
