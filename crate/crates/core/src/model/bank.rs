use serde::{Deserialize, Serialize};

use super::ModelCheckpoint;
use crate::data::Dataset;
use crate::error::Result;
use crate::eval::dataset_features;

/// Per-class mean penultimate features. A class with no samples has count 0
/// and no mean; consumers skip it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub means: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
    pub epoch_of_origin: u64,
}

impl FeatureBank {
    /// Accumulates class means from a feature matrix given row-wise labels.
    pub fn from_features<'a>(
        rows: impl Iterator<Item = &'a [f32]>,
        labels: &[usize],
        num_classes: usize,
        feature_dim: usize,
        epoch_of_origin: u64,
    ) -> Self {
        let mut sums = vec![vec![0.0f64; feature_dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (row, &y) in rows.zip(labels) {
            counts[y] += 1;
            for (s, &v) in sums[y].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        FeatureBank {
            means,
            counts,
            epoch_of_origin,
        }
    }

    pub fn mean(&self, class: usize) -> Option<&[f64]> {
        self.means.get(class).and_then(|m| m.as_deref())
    }

    pub fn is_available(&self, class: usize) -> bool {
        self.mean(class).is_some()
    }

    /// Mean Euclidean distance between available class means.
    pub fn mean_inter_class_distance(&self) -> f64 {
        let available: Vec<&[f64]> = self.means.iter().filter_map(|m| m.as_deref()).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..available.len() {
            for j in i + 1..available.len() {
                total += euclidean(available[i], available[j]);
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Class means of `model`'s penultimate features over `data`, tagged with
/// the model's epoch.
pub fn build_feature_bank(model: &ModelCheckpoint, data: &Dataset) -> Result<FeatureBank> {
    crate::model::train::check_dataset(&model.spec, data)?;
    let features = dataset_features(model, data)?;
    let bank = FeatureBank::from_features(
        features.iter_rows(),
        data.labels(),
        model.spec.num_classes,
        model.spec.feature_dim(),
        model.epoch,
    );
    for (c, &n) in bank.counts.iter().enumerate() {
        if n == 0 {
            log::warn!("class {c} has no samples; its feature mean is unavailable");
        }
    }
    Ok(bank)
}
