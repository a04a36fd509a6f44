//! Closed-form multi-view linear model: orthonormal class features, samples
//! that mix them, linear classifiers over them, and an end-to-end check of
//! whether a relabeled multi-view sample keeps its label after extraction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::{extract_soft, AttackConfig, AttackKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, loss::softmax_into, ModelCheckpoint, ModelSpec, TrainConfig};
use crate::rng;
use crate::watermark::{train_watermarked, RegMode, WatermarkTrainConfig};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal class feature vectors `v_0 .. v_{C-1}` in `R^p`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBasis {
    vectors: Vec<Vec<f64>>,
}

impl FeatureBasis {
    /// Gram–Schmidt on Gaussian draws from the seed's `basis` stream.
    pub fn random(classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if classes < 2 || dim < classes {
            return Err(Error::Domain(format!(
                "need 2 <= classes <= dim for an orthonormal basis, got {classes} classes in {dim} dimensions"
            )));
        }
        let mut r = rng::stream(seed, "basis");
        let gauss = Normal::new(0.0, 1.0).unwrap();
        let raw: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| gauss.sample(&mut r)).collect())
            .collect();
        Self::orthonormalize(raw)
    }

    /// Modified Gram–Schmidt with one re-orthogonalisation pass.
    pub fn orthonormalize(raw: Vec<Vec<f64>>) -> Result<Self> {
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(raw.len());
        for mut v in raw {
            let scale = norm(&v);
            for _ in 0..2 {
                for u in &vectors {
                    let c = dot(&v, u);
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
                }
            }
            let n = norm(&v);
            if !(n > 1e-10 * scale.max(1.0)) {
                return Err(Error::Domain("degenerate basis: vectors are linearly dependent".into()));
            }
            v.iter_mut().for_each(|x| *x /= n);
            vectors.push(v);
        }
        Ok(FeatureBasis { vectors })
    }

    pub fn classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vector(&self, c: usize) -> &[f64] {
        &self.vectors[c]
    }

    /// Removes the component of `x` lying in the span of the basis.
    pub fn project_out(&self, x: &mut [f64]) {
        for v in &self.vectors {
            let c = dot(x, v);
            x.iter_mut().zip(v).for_each(|(a, b)| *a -= c * b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub weights: Vec<f64>,
    pub feature: Vec<f64>,
}

/// `f = sum_c w_c v_c`.
pub fn make_multiview_sample(weights: &[f64], basis: &FeatureBasis) -> Result<MultiViewSample> {
    if weights.len() != basis.classes() {
        return Err(Error::Domain(format!(
            "{} weights for a basis of {} classes",
            weights.len(),
            basis.classes()
        )));
    }
    let mut feature = vec![0.0; basis.dim()];
    for (w, v) in weights.iter().zip(&basis.vectors) {
        feature.iter_mut().zip(v).for_each(|(f, x)| *f += w * x);
    }
    Ok(MultiViewSample {
        weights: weights.to_vec(),
        feature,
    })
}

/// `z = W f + b`, with `W` stored row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LinearClassifier {
    /// Rows equal to the basis vectors, zero bias.
    pub fn aligned(basis: &FeatureBasis) -> Self {
        LinearClassifier {
            w: basis.vectors.clone(),
            b: vec![0.0; basis.classes()],
        }
    }

    /// Reads the weights of a linear-architecture checkpoint.
    pub fn from_checkpoint(model: &ModelCheckpoint) -> Result<Self> {
        if model.spec.architecture != crate::model::Architecture::Linear {
            return Err(Error::Domain("only linear checkpoints map to a linear classifier".into()));
        }
        let (k, p) = (model.spec.num_classes, model.spec.input_len());
        let params: Vec<f64> = model.parameters.iter().map(|&v| v as f64).collect();
        Ok(LinearClassifier {
            w: params[..k * p].chunks(p).map(|r| r.to_vec()).collect(),
            b: params[k * p..].to_vec(),
        })
    }

    /// `cos(W_i, v_i)` for every class.
    pub fn alignment(&self, basis: &FeatureBasis) -> Vec<f64> {
        self.w
            .iter()
            .zip(&basis.vectors)
            .map(|(w, v)| {
                let n = norm(w);
                if n == 0.0 {
                    0.0
                } else {
                    dot(w, v) / n
                }
            })
            .collect()
    }
}

pub fn linear_logits(clf: &LinearClassifier, f: &[f64]) -> Result<Vec<f64>> {
    if clf.w.len() != clf.b.len() {
        return Err(Error::Domain("weight rows and bias length differ".into()));
    }
    clf.w
        .iter()
        .zip(&clf.b)
        .map(|(row, b)| {
            if row.len() != f.len() {
                Err(Error::Domain(format!("feature of length {} for weights of length {}", f.len(), row.len())))
            } else {
                Ok(dot(row, f) + b)
            }
        })
        .collect()
}

/// Softmax of the aligned classifier's logits for a sample with weights `w`.
pub fn aligned_probabilities(weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; weights.len()];
    softmax_into(weights, &mut out);
    out
}

/// What the attacker's query data covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateCoverage {
    /// `a v_0 + b v_1` with `a, b ~ U(0, 1)`.
    #[default]
    Spanning,
    /// `b v_1` only.
    V1Only,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    /// Off-class weight `eps ~ U(0, eps_max)` of clean samples.
    #[serde(default = "d_eps")]
    pub eps_max: f64,
    /// Standard deviation of the noise in the orthogonal complement, for
    /// clean samples and the trigger.
    #[serde(default = "d_noise")]
    pub noise: f64,
    /// Complement noise on the attacker's queries; 0 keeps them in the
    /// span of `v_0, v_1`.
    #[serde(default)]
    pub surrogate_noise: f64,
    #[serde(default = "d_surrogate")]
    pub surrogate_samples: usize,
    #[serde(default)]
    pub coverage: SurrogateCoverage,
    /// Trigger weights `(w_0, w_1)`; each pair is one row of the grid.
    #[serde(default = "d_grid")]
    pub trigger_weights: Vec<[f64; 2]>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_train")]
    pub source_train: TrainConfig,
    #[serde(default = "d_train")]
    pub attack_train: TrainConfig,
}

fn d_dim() -> usize {
    16
}
fn d_per_class() -> usize {
    200
}
fn d_eps() -> f64 {
    0.1
}
fn d_noise() -> f64 {
    0.05
}
fn d_surrogate() -> usize {
    400
}
fn d_grid() -> Vec<[f64; 2]> {
    [0.0, 0.2, 0.5, 0.8, 1.0].iter().map(|&w| [w, 1.0 - w]).collect()
}
fn d_seeds() -> Vec<u64> {
    (0..20).collect()
}
fn d_train() -> TrainConfig {
    TrainConfig::scaled(40, 0)
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            dim: d_dim(),
            per_class: d_per_class(),
            eps_max: d_eps(),
            noise: d_noise(),
            surrogate_noise: 0.0,
            surrogate_samples: d_surrogate(),
            coverage: SurrogateCoverage::default(),
            trigger_weights: d_grid(),
            seeds: d_seeds(),
            source_train: d_train(),
            attack_train: d_train(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub w0: f64,
    pub w1: f64,
    pub seed: u64,
    pub source_label: usize,
    pub surrogate_label: usize,
    pub transferred: bool,
    pub source_cos: [f64; 2],
    pub surrogate_cos: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub coverage: SurrogateCoverage,
    pub rows: Vec<TransferRow>,
}

impl TransferReport {
    /// `(w0, w1, transfer rate)` per grid point, in grid order.
    pub fn rates(&self) -> Vec<(f64, f64, f64)> {
        let mut out: Vec<(f64, f64, usize, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|e| e.0 == r.w0 && e.1 == r.w1) {
                Some(e) => {
                    e.2 += r.transferred as usize;
                    e.3 += 1;
                }
                None => out.push((r.w0, r.w1, r.transferred as usize, 1)),
            }
        }
        out.into_iter().map(|(a, b, h, n)| (a, b, h as f64 / n as f64)).collect()
    }

    pub fn rate_for(&self, w0: f64, w1: f64) -> Option<f64> {
        self.rates().into_iter().find(|r| r.0 == w0 && r.1 == w1).map(|r| r.2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "w0,w1,seed,source_label,surrogate_label,transferred,source_cos0,source_cos1,surrogate_cos0,surrogate_cos1\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.w0,
                r.w1,
                r.seed,
                r.source_label,
                r.surrogate_label,
                r.transferred as u8,
                r.source_cos[0],
                r.source_cos[1],
                r.surrogate_cos[0],
                r.surrogate_cos[1]
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::persistence(path, e.to_string()))
    }
}

fn noisy(base: &MultiViewSample, basis: &FeatureBasis, sigma: f64, r: &mut impl Rng) -> Vec<f32> {
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut n: Vec<f64> = (0..basis.dim()).map(|_| sigma * gauss.sample(r)).collect();
    basis.project_out(&mut n);
    base.feature.iter().zip(&n).map(|(f, e)| (f + e) as f32).collect()
}

/// Clean two-class data: `(1, eps)` for class 0, `(eps, 1)` for class 1.
fn clean_samples(cfg: &TransferConfig, basis: &FeatureBasis, seed: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, "multiview-clean");
    let mut inputs = Vec::with_capacity(2 * cfg.per_class * cfg.dim);
    let mut labels = Vec::with_capacity(2 * cfg.per_class);
    for i in 0..2 * cfg.per_class {
        let c = i % 2;
        let eps = r.random::<f64>() * cfg.eps_max;
        let w = if c == 0 { [1.0, eps] } else { [eps, 1.0] };
        let s = make_multiview_sample(&w, basis)?;
        inputs.extend(noisy(&s, basis, cfg.noise, &mut r));
        labels.push(c);
    }
    Dataset::from_rows("multiview-clean", vec![cfg.dim], 2, inputs, labels)
}

fn surrogate_samples(cfg: &TransferConfig, basis: &FeatureBasis, seed: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, "multiview-surrogate");
    let mut inputs = Vec::with_capacity(cfg.surrogate_samples * cfg.dim);
    for _ in 0..cfg.surrogate_samples {
        let (a, b) = (r.random::<f64>(), r.random::<f64>());
        let w = match cfg.coverage {
            SurrogateCoverage::Spanning => [a, b],
            SurrogateCoverage::V1Only => [0.0, b],
        };
        let s = make_multiview_sample(&w, basis)?;
        inputs.extend(noisy(&s, basis, cfg.surrogate_noise, &mut r));
    }
    // labels are unused by soft extraction
    Dataset::from_rows(
        "multiview-surrogate",
        vec![cfg.dim],
        2,
        inputs,
        vec![0; cfg.surrogate_samples],
    )
}

fn predict(model: &ModelCheckpoint, x: &[f32]) -> Result<usize> {
    Ok(argmax(model.forward_logits(x)?.row(0)))
}

/// One seed, one trigger: train the linear source with the relabeled
/// trigger, extract it with soft labels, and check the surrogate's label.
pub fn transfer_trial(cfg: &TransferConfig, trigger_weights: [f64; 2], seed: u64) -> Result<TransferRow> {
    let basis = FeatureBasis::random(2, cfg.dim, seed)?;
    let clean = clean_samples(cfg, &basis, seed)?;
    let trigger_sample = make_multiview_sample(&trigger_weights, &basis)?;
    // the trigger is an ordinary sample: it carries its own noise
    let tx = noisy(&trigger_sample, &basis, cfg.noise, &mut rng::stream(seed, "multiview-trigger"));
    let trigger = Dataset::new("multiview-trigger", vec![cfg.dim], 2, vec![u64::MAX], tx.clone(), vec![0])?;
    let spec = ModelSpec::linear(2, cfg.dim)?;
    let mut train = cfg.source_train.clone();
    train.seed = rng::sub_seed(seed, "source");
    let source = train_watermarked(
        &spec,
        &clean,
        &trigger,
        &[1],
        &WatermarkTrainConfig::new(train, 0.0, RegMode::None),
    )?
    .model;
    let queries = surrogate_samples(cfg, &basis, seed)?;
    let mut attack = AttackConfig::new(AttackKind::ExtractSoft, cfg.attack_train.clone());
    attack.train.seed = rng::sub_seed(seed, "attack");
    attack.surrogate_spec = Some(spec);
    let surrogate = extract_soft(&source, &queries, &attack)?;
    let source_label = predict(&source, &tx)?;
    let surrogate_label = predict(&surrogate, &tx)?;
    let sc = LinearClassifier::from_checkpoint(&source)?.alignment(&basis);
    let gc = LinearClassifier::from_checkpoint(&surrogate)?.alignment(&basis);
    Ok(TransferRow {
        w0: trigger_weights[0],
        w1: trigger_weights[1],
        seed,
        source_label,
        surrogate_label,
        transferred: surrogate_label == 0,
        source_cos: [sc[0], sc[1]],
        surrogate_cos: [gc[0], gc[1]],
    })
}

/// Runs every trigger weight pair against every seed.
pub fn run_transfer_experiment(cfg: &TransferConfig) -> Result<TransferReport> {
    if cfg.dim < 2 {
        return Err(Error::Domain("feature dimension must be at least 2".into()));
    }
    if cfg.per_class == 0 || cfg.surrogate_samples == 0 || cfg.seeds.is_empty() {
        return Err(Error::Config("transfer experiment needs samples and seeds".into()));
    }
    let mut rows = Vec::with_capacity(cfg.trigger_weights.len() * cfg.seeds.len());
    for &w in &cfg.trigger_weights {
        for &seed in &cfg.seeds {
            rows.push(transfer_trial(cfg, w, seed)?);
        }
    }
    Ok(TransferReport {
        coverage: cfg.coverage,
        rows,
    })
}
