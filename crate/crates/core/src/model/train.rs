use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss, ModelCheckpoint, ModelSpec, Network, Real};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Mini-batch SGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// The learning rate steps down linearly every this many epochs, reaching
    /// `lr_initial / steps` in the last stage. Zero keeps it constant.
    #[serde(default)]
    pub lr_decay_every: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Rescale the mini-batch gradient to at most this L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::scaled(200, 0)
    }
}

impl TrainConfig {
    /// Schedule with lr 0.1, momentum 0.9 and a learning-rate step every
    /// quarter of the run (every 50 epochs at 200 epochs).
    pub fn scaled(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 64,
            lr_initial: 0.1,
            lr_decay_every: (epochs / 4).max(1),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        // A zero learning rate is accepted: it freezes the parameters.
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::Config(format!("lr_initial {} must be finite and >= 0", self.lr_initial)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("grad_clip must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr_initial;
        }
        let stages = self.epochs.div_ceil(self.lr_decay_every).max(1);
        let stage = (epoch / self.lr_decay_every).min(stages - 1);
        self.lr_initial * (1.0 - stage as f64 / stages as f64)
    }
}

/// Per-epoch record emitted by the trainer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch objective values.
    pub loss: f64,
    pub clean_loss: f64,
    pub trigger_loss: f64,
    pub reg_loss: f64,
    pub clean_acc: Option<f64>,
    pub trigger_acc: Option<f64>,
    /// Whether the feature regulariser was active during this epoch.
    pub reg_active: bool,
}

/// A differentiable training objective over `len()` shuffleable items.
pub trait Objective {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn begin_epoch(&mut self, _epoch: usize, _params: &[f32]) -> Result<()> {
        Ok(())
    }

    /// Objective value on the items at `batch`; its gradient is accumulated
    /// into the zeroed `grad`.
    fn batch_loss_grad(&mut self, params: &[f32], batch: &[usize], grad: &mut [f32]) -> Result<f64>;

    /// Called after the last step of an epoch; may fill in extra statistics.
    fn end_epoch(&mut self, _params: &[f32], _stats: &mut EpochStats) -> Result<()> {
        Ok(())
    }
}

/// Runs momentum SGD on `model` in place. Parameters flagged in `frozen`
/// receive no update. The shuffle stream is seeded from `config.seed`.
pub fn run_sgd<O: Objective>(
    model: &mut ModelCheckpoint,
    config: &TrainConfig,
    objective: &mut O,
    frozen: Option<&[bool]>,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if objective.is_empty() {
        return Err(Error::Data("training objective has no samples".into()));
    }
    if let Some(mask) = frozen {
        if mask.len() != model.parameters.len() {
            return Err(Error::Config("frozen mask length does not match parameter count".into()));
        }
    }
    let n_params = model.parameters.len();
    let mut velocity = vec![0.0f32; n_params];
    let mut grad = vec![0.0f32; n_params];
    let mut order: Vec<usize> = (0..objective.len()).collect();
    let mut shuffle = rng::stream(config.seed, "shuffle");
    let momentum = config.momentum as f32;
    let wd = config.weight_decay as f32;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        objective.begin_epoch(epoch, &model.parameters)?;
        order.shuffle(&mut shuffle);
        let lr = config.lr_at(epoch) as f32;
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = objective.batch_loss_grad(&model.parameters, batch, &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
            }
            total += loss;
            batches += 1;
            if let Some(clip) = config.grad_clip {
                let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
                if norm > clip {
                    let s = (clip / norm) as f32;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            for i in 0..n_params {
                if frozen.is_some_and(|m| m[i]) {
                    continue;
                }
                let g = grad[i] + wd * model.parameters[i];
                velocity[i] = momentum * velocity[i] + g;
                model.parameters[i] -= lr * velocity[i];
            }
        }
        let mut stats = EpochStats {
            epoch,
            lr: lr as f64,
            loss: total / batches as f64,
            ..EpochStats::default()
        };
        objective.end_epoch(&model.parameters, &mut stats)?;
        log::debug!("epoch {epoch}: loss {:.5}", stats.loss);
        log.push(stats);
    }
    model.epoch += config.epochs as u64;
    model.rng_state = rng::rng_state_bytes(&shuffle);
    Ok(log)
}

/// Mean cross-entropy of `net` on the samples at `positions`, with the
/// gradient scaled by `weight / len` accumulated into `grad`. Returns the
/// mean loss (unweighted) and the trace of the forward pass.
pub fn batch_cross_entropy<T: Real>(
    net: &Network<'_, T>,
    inputs: &[T],
    labels: &[usize],
    grad: Option<&mut [T]>,
) -> Result<(T, super::Trace<T>)> {
    let trace = net.forward(inputs)?;
    let n = trace.batch();
    if n != labels.len() {
        return Err(Error::Input("label count does not match batch".into()));
    }
    let k = net.num_classes();
    let scale = T::one() / T::of_f64(n as f64);
    let mut total = T::zero();
    match grad {
        Some(grad) => {
            let mut glogits = vec![T::zero(); n * k];
            for (i, &y) in labels.iter().enumerate() {
                total += loss::cross_entropy(trace.logit_row(i, k), y, scale, Some(&mut glogits[i * k..(i + 1) * k]));
            }
            net.backward(&trace, &glogits, None, grad);
        }
        None => {
            for (i, &y) in labels.iter().enumerate() {
                total += loss::cross_entropy(trace.logit_row(i, k), y, scale, None);
            }
        }
    }
    Ok((total * scale, trace))
}

/// Plain cross-entropy over a labeled dataset.
pub struct SupervisedObjective<'a> {
    spec: &'a ModelSpec,
    data: &'a Dataset,
    buf: Vec<f32>,
    labels: Vec<usize>,
}

impl<'a> SupervisedObjective<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset) -> Result<Self> {
        check_dataset(spec, data)?;
        Ok(SupervisedObjective {
            spec,
            data,
            buf: Vec::new(),
            labels: Vec::new(),
        })
    }
}

impl Objective for SupervisedObjective<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn batch_loss_grad(&mut self, params: &[f32], batch: &[usize], grad: &mut [f32]) -> Result<f64> {
        let net = Network::new(self.spec, params);
        self.data.gather_into(batch, &mut self.buf);
        self.labels.clear();
        self.labels.extend(batch.iter().map(|&p| self.data.label(p)));
        let (loss, _) = batch_cross_entropy(&net, &self.buf, &self.labels, Some(grad))?;
        Ok(loss as f64)
    }
}

/// Checks that a dataset fits a model spec (shape and label range).
pub(crate) fn check_dataset(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.input_len() != spec.input_len() {
        return Err(Error::Input(format!(
            "dataset `{}` has samples of shape {:?}, model expects {:?}",
            data.id, data.input_shape, spec.input_shape
        )));
    }
    if data.num_classes > spec.num_classes {
        return Err(Error::Data(format!(
            "dataset `{}` has {} classes, model has {}",
            data.id, data.num_classes, spec.num_classes
        )));
    }
    Ok(())
}

/// Trains a freshly initialised model on `data` with mini-batch
/// cross-entropy. Initialisation and shuffling derive from `config.seed`.
pub fn train_supervised(spec: &ModelSpec, data: &Dataset, config: &TrainConfig) -> Result<ModelCheckpoint> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let mut model = ModelCheckpoint::initialize(spec, config.seed)?;
    let mut objective = SupervisedObjective::new(spec, data)?;
    run_sgd(&mut model, config, &mut objective, None)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobsConfig};
    use crate::eval::{accuracy, dataset_loss};

    fn blobs(per_class: usize) -> Dataset {
        generate_blobs(
            &BlobsConfig {
                num_classes: 2,
                dim: 4,
                per_class,
                separation: 4.0,
            },
            3,
            "train",
        )
        .unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(100);
        let spec = ModelSpec::mlp(2, 4, [16, 8]).unwrap();
        let mut cfg = TrainConfig::scaled(50, 1);
        cfg.batch_size = 32;
        cfg.lr_initial = 0.05;
        let model = train_supervised(&spec, &data, &cfg).unwrap();
        assert!(accuracy(&model, &data).unwrap() >= 0.99);
        let initial = ModelCheckpoint::initialize(&spec, 1).unwrap();
        assert!(dataset_loss(&model, &data).unwrap() <= dataset_loss(&initial, &data).unwrap());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data = blobs(10);
        let spec = ModelSpec::mlp(2, 4, [5, 3]).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr_initial: 0.0,
            lr_decay_every: 0,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 5,
            grad_clip: None,
        };
        let model = train_supervised(&spec, &data, &cfg).unwrap();
        assert_eq!(model.parameters, ModelCheckpoint::initialize(&spec, 5).unwrap().parameters);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = blobs(20);
        let spec = ModelSpec::mlp(2, 4, [6, 4]).unwrap();
        let cfg = TrainConfig::scaled(4, 9);
        let a = train_supervised(&spec, &data, &cfg).unwrap();
        let b = train_supervised(&spec, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.epoch, 4);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let data = Dataset::from_rows("d", vec![4], 3, vec![0.0; 8], vec![0, 2]).unwrap();
        let spec = ModelSpec::linear(2, 4).unwrap();
        assert!(matches!(
            train_supervised(&spec, &data, &TrainConfig::scaled(1, 0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn step_schedule_quarters_at_full_scale() {
        let cfg = TrainConfig::scaled(200, 0);
        assert_eq!(cfg.lr_decay_every, 50);
        let lrs: Vec<f64> = [0, 49, 50, 100, 150, 199].iter().map(|&e| cfg.lr_at(e)).collect();
        for (got, want) in lrs.iter().zip([0.1, 0.1, 0.075, 0.05, 0.025, 0.025]) {
            assert!((got - want).abs() < 1e-15, "{lrs:?}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainConfig::scaled(2, 0);
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg.momentum = 0.5;
        cfg.lr_initial = f64::NAN;
        assert!(cfg.validate().is_err());
    }
}
