//! Watermark embedding: joint clean + trigger training with an optional
//! feature regulariser, and the benign reference model.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    argmax, batch_cross_entropy, loss, run_sgd, train_supervised, EpochStats, FeatureBank, ModelCheckpoint,
    ModelSpec, Network, Objective, Real, TrainConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    #[default]
    None,
    /// Pull trigger features toward the mean feature of the assigned class.
    Attract,
    /// Push trigger features away from the mean feature of the original class.
    Repel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkTrainConfig {
    pub base: TrainConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub reg_mode: RegMode,
    /// Repel distances are clamped at this multiple of the bank's mean
    /// inter-class distance.
    #[serde(default = "default_cap_factor")]
    pub repel_cap_factor: f64,
    /// Absolute clamp; overrides `repel_cap_factor` when set.
    #[serde(default)]
    pub repel_cap: Option<f64>,
}

fn default_alpha() -> f64 {
    0.01
}

fn default_cap_factor() -> f64 {
    10.0
}

impl WatermarkTrainConfig {
    pub fn new(base: TrainConfig, alpha: f64, reg_mode: RegMode) -> Self {
        WatermarkTrainConfig {
            base,
            alpha,
            reg_mode,
            repel_cap_factor: default_cap_factor(),
            repel_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.repel_cap_factor > 0.0) {
            return Err(Error::Config("repel_cap_factor must be positive".into()));
        }
        if self.repel_cap.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("repel_cap must be positive".into()));
        }
        Ok(())
    }

    fn cap_for(&self, bank: &FeatureBank) -> Option<f64> {
        match self.reg_mode {
            RegMode::Repel => Some(
                self.repel_cap
                    .unwrap_or_else(|| self.repel_cap_factor * bank.mean_inter_class_distance()),
            ),
            _ => None,
        }
    }
}

/// Regulariser applied to one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RegTerm<'a> {
    pub mode: RegMode,
    pub alpha: f64,
    pub bank: &'a FeatureBank,
    /// Repel clamp; `None` means unclamped.
    pub cap: Option<f64>,
}

/// Trigger samples as seen by the loss: inputs, assigned labels, and the
/// original labels (used by repel mode).
#[derive(Clone, Copy, Debug)]
pub struct TriggerBatch<'a, T> {
    pub inputs: &'a [T],
    pub assigned: &'a [usize],
    pub original: &'a [usize],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub clean: f64,
    pub trigger: f64,
    /// Mean feature distance, before the sign, clamp and alpha are applied.
    pub reg: f64,
    pub total: f64,
}

/// Mean distance between trigger features and their target class means.
/// Entries whose class mean is unavailable are excluded from the average.
/// The derivative of `weight * mean(min(d, cap))` w.r.t. the features is
/// accumulated into `grad_features`.
/// Returns `(mean d, mean min(d, cap), entries used)`.
fn reg_distance<T: Real>(
    features: &[T],
    dim: usize,
    targets: &[usize],
    bank: &FeatureBank,
    cap: Option<f64>,
    weight: T,
    mut grad_features: Option<&mut [T]>,
) -> (T, T, usize) {
    let used = targets.iter().filter(|&&c| bank.is_available(c)).count();
    if used == 0 {
        if !targets.is_empty() {
            log::warn!("no class mean available for any trigger sample; regulariser contributes 0");
        }
        return (T::zero(), T::zero(), 0);
    }
    let inv = T::one() / T::of_f64(used as f64);
    let cap_t = cap.map(T::of_f64);
    let mut mean = T::zero();
    let mut capped = T::zero();
    let mut diff = vec![T::zero(); dim];
    for (k, &c) in targets.iter().enumerate() {
        let Some(mu) = bank.mean(c) else { continue };
        let f = &features[k * dim..(k + 1) * dim];
        let mut sq = T::zero();
        for ((d, &fv), &m) in diff.iter_mut().zip(f).zip(mu) {
            *d = fv - T::of_f64(m);
            sq += *d * *d;
        }
        let dist = sq.sqrt();
        mean += dist * inv;
        let clamped = cap_t.is_some_and(|c| dist >= c);
        capped += if clamped { cap_t.unwrap() } else { dist } * inv;
        if let Some(g) = grad_features.as_deref_mut() {
            if !clamped && dist > T::zero() {
                let s = weight * inv / dist;
                for (gv, &d) in g[k * dim..(k + 1) * dim].iter_mut().zip(&diff) {
                    *gv += s * d;
                }
            }
        }
    }
    (mean, capped, used)
}

/// Full watermark objective on one step: mean CE over the clean batch, plus
/// mean CE over the trigger batch, plus or minus the weighted regulariser.
/// The gradient w.r.t. `params` is accumulated into `grad`.
pub fn watermark_loss<T: Real>(
    spec: &ModelSpec,
    params: &[T],
    clean_inputs: &[T],
    clean_labels: &[usize],
    trigger: TriggerBatch<'_, T>,
    reg: Option<RegTerm<'_>>,
    mut grad: Option<&mut [T]>,
) -> Result<LossParts> {
    if clean_labels.is_empty() {
        return Err(Error::Domain("clean batch is empty".into()));
    }
    let net = Network::new(spec, params);
    let (clean, _) = batch_cross_entropy(&net, clean_inputs, clean_labels, grad.as_deref_mut())?;
    let mut parts = LossParts {
        clean: clean.to_f64(),
        ..LossParts::default()
    };
    let q = trigger.assigned.len();
    if q > 0 {
        let (tl, rv) = trigger_terms(&net, trigger, reg, grad)?;
        parts.trigger = tl;
        parts.reg = rv.0;
        parts.total = parts.clean + tl + rv.1;
    } else {
        parts.total = parts.clean;
    }
    Ok(parts)
}

/// Trigger CE and regulariser. Returns `(trigger CE, (reg distance,
/// signed weighted reg contribution))`.
fn trigger_terms<T: Real>(
    net: &Network<'_, T>,
    trigger: TriggerBatch<'_, T>,
    reg: Option<RegTerm<'_>>,
    grad: Option<&mut [T]>,
) -> Result<(f64, (f64, f64))> {
    let q = trigger.assigned.len();
    if trigger.original.len() != q {
        return Err(Error::Input("trigger label vectors differ in length".into()));
    }
    let k = net.num_classes();
    let p = net.feature_dim();
    let trace = net.forward(trigger.inputs)?;
    if trace.batch() != q {
        return Err(Error::Input("trigger labels do not match trigger batch".into()));
    }
    let scale = T::one() / T::of_f64(q as f64);
    let want_grad = grad.is_some();
    let mut glogits = vec![T::zero(); if want_grad { q * k } else { 0 }];
    let mut ce = T::zero();
    for (i, &y) in trigger.assigned.iter().enumerate() {
        let g = want_grad.then(|| &mut glogits[i * k..(i + 1) * k]);
        ce += loss::cross_entropy(trace.logit_row(i, k), y, scale, g);
    }
    ce = ce * scale;
    let mut reg_out = (0.0, 0.0);
    let mut gfeat = None;
    if let Some(r) = reg.filter(|r| r.mode != RegMode::None) {
        let (targets, sign) = match r.mode {
            RegMode::Attract => (trigger.assigned, T::one()),
            _ => (trigger.original, -T::one()),
        };
        let weight = sign * T::of_f64(r.alpha);
        let mut gf = vec![T::zero(); if want_grad { q * p } else { 0 }];
        let (mean, capped, _) = reg_distance(
            &trace.features,
            p,
            targets,
            r.bank,
            r.cap,
            weight,
            want_grad.then_some(gf.as_mut_slice()),
        );
        reg_out = (mean.to_f64(), (weight * capped).to_f64());
        gfeat = Some(gf);
    }
    if let Some(g) = grad {
        net.backward(&trace, &glogits, gfeat.as_deref(), g);
    }
    Ok((ce.to_f64(), reg_out))
}

fn widen(params: &[f32]) -> Vec<f64> {
    params.iter().map(|&v| v as f64).collect()
}

fn inputs_f64(data: &Dataset) -> Vec<f64> {
    data.inputs().iter().map(|&v| v as f64).collect()
}

/// Mean CE on `clean` plus mean CE on `trigger` (which carries assigned
/// labels), evaluated in f64.
pub fn joint_loss(model: &ModelCheckpoint, clean: &Dataset, trigger: &Dataset) -> Result<f64> {
    let parts = watermark_loss(
        &model.spec,
        &widen(&model.parameters),
        &inputs_f64(clean),
        clean.labels(),
        TriggerBatch {
            inputs: &inputs_f64(trigger),
            assigned: trigger.labels(),
            original: trigger.labels(),
        },
        None,
        None,
    )?;
    Ok(parts.total)
}

/// Mean Euclidean distance between each trigger sample's features and its
/// target class mean: the assigned class (attract) or `original_labels`
/// (repel). Unavailable class means are skipped.
pub fn feature_reg_loss(
    model: &ModelCheckpoint,
    trigger: &Dataset,
    original_labels: &[usize],
    bank: &FeatureBank,
    mode: RegMode,
) -> Result<f64> {
    let targets = match mode {
        RegMode::None => return Ok(0.0),
        RegMode::Attract => trigger.labels(),
        RegMode::Repel => original_labels,
    };
    if targets.len() != trigger.len() {
        return Err(Error::Input("original label count does not match trigger set".into()));
    }
    let params = widen(&model.parameters);
    let net = Network::new(&model.spec, &params);
    let features = net.features(&inputs_f64(trigger))?;
    let (mean, _, _) = reg_distance(features.as_slice(), net.feature_dim(), targets, bank, None, 1.0, None);
    Ok(mean)
}

/// Result of a training run together with its per-epoch log.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: ModelCheckpoint,
    pub log: Vec<EpochStats>,
}

struct JointObjective<'a> {
    spec: &'a ModelSpec,
    clean: &'a Dataset,
    trigger: &'a Dataset,
    original: &'a [usize],
    config: &'a WatermarkTrainConfig,
    bank: Option<FeatureBank>,
    trigger_inputs: Vec<f32>,
    buf: Vec<f32>,
    labels: Vec<usize>,
    sums: (f64, f64, f64),
    hits: usize,
    seen: usize,
    steps: usize,
}

impl JointObjective<'_> {
    fn reg_enabled(&self) -> bool {
        self.config.reg_mode != RegMode::None && !self.trigger.is_empty()
    }
}

impl Objective for JointObjective<'_> {
    fn len(&self) -> usize {
        self.clean.len()
    }

    fn begin_epoch(&mut self, epoch: usize, params: &[f32]) -> Result<()> {
        self.sums = (0.0, 0.0, 0.0);
        self.hits = 0;
        self.seen = 0;
        self.steps = 0;
        // the bank for epoch t comes from the parameters at the end of t-1
        if self.reg_enabled() && epoch > 0 {
            let net = Network::new(self.spec, params);
            let mut feats = Vec::with_capacity(self.clean.len() * net.feature_dim());
            for chunk in self.clean.inputs().chunks(256 * self.clean.input_len()) {
                feats.extend_from_slice(net.features(chunk)?.as_slice());
            }
            let p = net.feature_dim();
            self.bank = Some(FeatureBank::from_features(
                feats.chunks_exact(p),
                self.clean.labels(),
                self.spec.num_classes,
                p,
                (epoch - 1) as u64,
            ));
        }
        Ok(())
    }

    fn batch_loss_grad(&mut self, params: &[f32], batch: &[usize], grad: &mut [f32]) -> Result<f64> {
        let net = Network::new(self.spec, params);
        self.clean.gather_into(batch, &mut self.buf);
        self.labels.clear();
        self.labels.extend(batch.iter().map(|&p| self.clean.label(p)));
        let (clean, trace) = batch_cross_entropy(&net, &self.buf, &self.labels, Some(&mut *grad))?;
        let k = net.num_classes();
        self.hits += (0..batch.len())
            .filter(|&i| argmax(trace.logit_row(i, k)) == self.labels[i])
            .count();
        self.seen += batch.len();
        self.steps += 1;
        let mut total = clean as f64;
        self.sums.0 += clean as f64;
        if !self.trigger.is_empty() {
            let reg = self.bank.as_ref().map(|bank| RegTerm {
                mode: self.config.reg_mode,
                alpha: self.config.alpha,
                bank,
                cap: self.config.cap_for(bank),
            });
            let tb = TriggerBatch {
                inputs: &self.trigger_inputs,
                assigned: self.trigger.labels(),
                original: self.original,
            };
            let (tl, (rd, rc)) = trigger_terms(&net, tb, reg, Some(grad))?;
            total += tl + rc;
            self.sums.1 += tl;
            self.sums.2 += rd;
        }
        Ok(total)
    }

    fn end_epoch(&mut self, params: &[f32], stats: &mut EpochStats) -> Result<()> {
        let steps = self.steps.max(1) as f64;
        stats.clean_loss = self.sums.0 / steps;
        stats.trigger_loss = self.sums.1 / steps;
        stats.reg_loss = self.sums.2 / steps;
        stats.reg_active = self.reg_enabled() && self.bank.is_some();
        stats.clean_acc = Some(self.hits as f64 / self.seen.max(1) as f64);
        if !self.trigger.is_empty() {
            let net = Network::new(self.spec, params);
            let logits = net.logits(&self.trigger_inputs)?;
            let hits = logits
                .iter_rows()
                .zip(self.trigger.labels())
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            stats.trigger_acc = Some(hits as f64 / self.trigger.len() as f64);
        }
        Ok(())
    }
}

/// Joint training on the clean set and a (possibly empty) trigger set.
/// Each step uses one clean mini-batch and the whole trigger set. With an
/// empty trigger set this coincides bitwise with [`train_supervised`].
pub fn train_joint(
    spec: &ModelSpec,
    clean: &Dataset,
    trigger: &Dataset,
    original_labels: &[usize],
    config: &WatermarkTrainConfig,
) -> Result<Trained> {
    config.validate()?;
    if clean.is_empty() {
        return Err(Error::Data("clean training set is empty".into()));
    }
    if config.base.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    crate::model::train::check_dataset(spec, clean)?;
    if !trigger.is_empty() {
        crate::model::train::check_dataset(spec, trigger)?;
    }
    if original_labels.len() != trigger.len() {
        return Err(Error::Input("original label count does not match trigger set".into()));
    }
    let mut model = ModelCheckpoint::initialize(spec, config.base.seed)?;
    let mut objective = JointObjective {
        spec,
        clean,
        trigger,
        original: original_labels,
        config,
        bank: None,
        trigger_inputs: trigger.inputs().to_vec(),
        buf: Vec::new(),
        labels: Vec::new(),
        sums: (0.0, 0.0, 0.0),
        hits: 0,
        seen: 0,
        steps: 0,
    };
    let log = run_sgd(&mut model, &config.base, &mut objective, None)?;
    Ok(Trained { model, log })
}

/// Embeds the trigger set `trigger` (assigned labels) into a fresh model.
pub fn train_watermarked(
    spec: &ModelSpec,
    clean: &Dataset,
    trigger: &Dataset,
    original_labels: &[usize],
    config: &WatermarkTrainConfig,
) -> Result<Trained> {
    if trigger.is_empty() {
        return Err(Error::Watermark("trigger set is empty; nothing to embed".into()));
    }
    let out = train_joint(spec, clean, trigger, original_labels, config)?;
    if let Some(acc) = out.log.last().and_then(|s| s.trigger_acc) {
        log::info!("watermarked model: final trigger accuracy {acc:.3}");
    }
    Ok(out)
}

/// Reference model trained on the clean set only.
pub fn train_benign(spec: &ModelSpec, clean: &Dataset, config: &TrainConfig) -> Result<ModelCheckpoint> {
    train_supervised(spec, clean, config)
}

/// Writes one JSON object per epoch.
pub fn write_training_log(log: &[EpochStats], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::persistence(path, e.to_string()))?;
    for s in log {
        let line = serde_json::to_string(s).map_err(|e| Error::persistence(path, e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochStats>> {
    let text = fs::read_to_string(path).map_err(|e| Error::persistence(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::persistence(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobsConfig};

    fn identity(dim: usize) -> ModelCheckpoint {
        let spec = ModelSpec::linear(dim, dim).unwrap();
        let mut params = vec![0.0f32; spec.parameter_count()];
        for i in 0..dim {
            params[i * dim + i] = 1.0;
        }
        ModelCheckpoint::from_parameters(&spec, params).unwrap()
    }

    #[test]
    fn three_four_five() {
        let model = identity(2);
        let trig = Dataset::from_rows("t", vec![2], 2, vec![3.0, 4.0], vec![1]).unwrap();
        let bank = FeatureBank {
            means: vec![Some(vec![9.0, 9.0]), Some(vec![0.0, 0.0])],
            counts: vec![1, 1],
            epoch_of_origin: 0,
        };
        assert_eq!(feature_reg_loss(&model, &trig, &[0], &bank, RegMode::Attract).unwrap(), 5.0);
        let at_mean = Dataset::from_rows("t", vec![2], 2, vec![0.0, 0.0], vec![1]).unwrap();
        assert_eq!(feature_reg_loss(&model, &at_mean, &[0], &bank, RegMode::Attract).unwrap(), 0.0);
    }

    #[test]
    fn unavailable_classes_are_skipped() {
        let model = identity(2);
        let trig = Dataset::from_rows("t", vec![2], 2, vec![3.0, 4.0, 1.0, 1.0], vec![1, 0]).unwrap();
        let bank = FeatureBank {
            means: vec![None, Some(vec![0.0, 0.0])],
            counts: vec![0, 3],
            epoch_of_origin: 0,
        };
        assert_eq!(feature_reg_loss(&model, &trig, &[0, 1], &bank, RegMode::Attract).unwrap(), 5.0);
        let none = FeatureBank {
            means: vec![None, None],
            counts: vec![0, 0],
            epoch_of_origin: 0,
        };
        assert_eq!(feature_reg_loss(&model, &trig, &[0, 1], &none, RegMode::Attract).unwrap(), 0.0);
    }

    #[test]
    fn duplicated_batches_double_the_loss() {
        let model = identity(3);
        let d = Dataset::from_rows("c", vec![3], 3, vec![0.5, -1.0, 2.0, 1.0, 1.0, 0.0], vec![0, 1]).unwrap();
        let empty = d.subset("e", &[]);
        let single = joint_loss(&model, &d, &empty).unwrap();
        assert!((joint_loss(&model, &d, &d).unwrap() - 2.0 * single).abs() < 1e-15);
        assert!(matches!(joint_loss(&model, &empty, &d), Err(Error::Domain(_))));
    }

    fn blobs() -> Dataset {
        generate_blobs(
            &BlobsConfig {
                num_classes: 3,
                dim: 4,
                per_class: 30,
                separation: 4.0,
            },
            3,
            "blobs",
        )
        .unwrap()
    }

    #[test]
    fn empty_trigger_matches_supervised_training() {
        let data = blobs();
        let spec = ModelSpec::mlp(3, 4, [8, 8]).unwrap();
        let cfg = WatermarkTrainConfig::new(TrainConfig::scaled(3, 5), 0.0, RegMode::None);
        let empty = data.subset("e", &[]);
        let joint = train_joint(&spec, &data, &empty, &[], &cfg).unwrap();
        let benign = train_benign(&spec, &data, &cfg.base).unwrap();
        assert_eq!(joint.model, benign);
        assert!(matches!(
            train_watermarked(&spec, &data, &empty, &[], &cfg),
            Err(Error::Watermark(_))
        ));
    }

    #[test]
    fn epoch_zero_has_no_regulariser() {
        let data = blobs();
        let spec = ModelSpec::mlp(3, 4, [8, 8]).unwrap();
        let trig = data.subset("t", &[0, 1]).relabeled("t", vec![1, 2]).unwrap();
        let clean = data.subset("c", &(2..data.len()).collect::<Vec<_>>());
        let cfg = WatermarkTrainConfig::new(TrainConfig::scaled(3, 1), 0.01, RegMode::Attract);
        let out = train_watermarked(&spec, &clean, &trig, &[0, 0], &cfg).unwrap();
        let active: Vec<bool> = out.log.iter().map(|s| s.reg_active).collect();
        assert_eq!(active, vec![false, true, true]);
        assert_eq!(out.log[0].reg_loss, 0.0);
        assert!(out.log[1].reg_loss > 0.0);
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let log = vec![
            EpochStats {
                epoch: 0,
                trigger_acc: Some(0.5),
                ..EpochStats::default()
            },
            EpochStats::default(),
        ];
        write_training_log(&log, &path).unwrap();
        assert_eq!(read_training_log(&path).unwrap(), log);
    }
}
