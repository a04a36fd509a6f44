//! Adversary simulation. Extraction and distillation see the victim only
//! through [`LogitOracle`]; fine-tuning and fine-pruning are white-box.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::loss::{cross_entropy, kl_divergence, log_softmax_into};
use crate::model::{
    argmax, run_sgd, EpochStats, KlDirection, Matrix, ModelCheckpoint, ModelSpec, Network, Objective, Real,
    SupervisedObjective, TrainConfig,
};
use crate::rng;

/// Query-only access to a classifier.
pub trait LogitOracle {
    fn num_classes(&self) -> usize;
    fn input_len(&self) -> usize;
    fn query_logits(&self, batch: &[f32]) -> Result<Matrix<f32>>;
}

impl LogitOracle for ModelCheckpoint {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    fn query_logits(&self, batch: &[f32]) -> Result<Matrix<f32>> {
        self.forward_logits(batch)
    }
}

/// Wraps a checkpoint behind [`LogitOracle`], counting queried samples.
/// Parameter access goes through [`AuditedModel::white_box`], which is
/// counted separately.
pub struct AuditedModel<'a> {
    model: &'a ModelCheckpoint,
    queries: AtomicU64,
    parameter_reads: AtomicU64,
}

impl<'a> AuditedModel<'a> {
    pub fn new(model: &'a ModelCheckpoint) -> Self {
        AuditedModel {
            model,
            queries: AtomicU64::new(0),
            parameter_reads: AtomicU64::new(0),
        }
    }

    /// Number of samples answered so far.
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn parameter_reads(&self) -> u64 {
        self.parameter_reads.load(Ordering::Relaxed)
    }

    pub fn white_box(&self) -> &'a ModelCheckpoint {
        self.parameter_reads.fetch_add(1, Ordering::Relaxed);
        self.model
    }
}

impl LogitOracle for AuditedModel<'_> {
    fn num_classes(&self) -> usize {
        self.model.spec.num_classes
    }

    fn input_len(&self) -> usize {
        self.model.spec.input_len()
    }

    fn query_logits(&self, batch: &[f32]) -> Result<Matrix<f32>> {
        let out = self.model.forward_logits(batch)?;
        self.queries.fetch_add(out.rows() as u64, Ordering::Relaxed);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    ExtractSoft,
    ExtractHard,
    Distill,
    Finetune,
    Fineprune,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::ExtractSoft => "extract_soft",
            AttackKind::ExtractHard => "extract_hard",
            AttackKind::Distill => "distill",
            AttackKind::Finetune => "finetune",
            AttackKind::Fineprune => "fineprune",
        }
    }

    pub fn is_black_box(self) -> bool {
        matches!(self, AttackKind::ExtractSoft | AttackKind::ExtractHard | AttackKind::Distill)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Surrogate architecture; defaults to the victim's spec.
    #[serde(default)]
    pub surrogate_spec: Option<ModelSpec>,
    pub train: TrainConfig,
    #[serde(default)]
    pub distill_alpha: Option<f64>,
    #[serde(default)]
    pub prune_acc_drop: Option<f64>,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl AttackConfig {
    pub fn new(kind: AttackKind, train: TrainConfig) -> Self {
        AttackConfig {
            kind,
            surrogate_spec: None,
            train,
            distill_alpha: None,
            prune_acc_drop: (kind == AttackKind::Fineprune).then_some(0.2),
            kl_direction: KlDirection::default(),
            temperature: 1.0,
        }
    }

    pub fn distill(alpha: f64, train: TrainConfig) -> Self {
        AttackConfig {
            distill_alpha: Some(alpha),
            ..AttackConfig::new(AttackKind::Distill, train)
        }
    }

    pub fn fineprune(acc_drop: f64, train: TrainConfig) -> Self {
        AttackConfig {
            prune_acc_drop: Some(acc_drop),
            ..AttackConfig::new(AttackKind::Fineprune, train)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match (self.kind, self.distill_alpha) {
            (AttackKind::Distill, Some(a)) if (0.0..=1.0).contains(&a) => {}
            (AttackKind::Distill, Some(a)) => {
                return Err(Error::Config(format!("distill_alpha {a} must lie in [0, 1]")))
            }
            (AttackKind::Distill, None) => return Err(Error::Config("distill requires distill_alpha".into())),
            (_, Some(_)) => return Err(Error::Config("distill_alpha is only valid for distill".into())),
            _ => {}
        }
        match (self.kind, self.prune_acc_drop) {
            (AttackKind::Fineprune, Some(d)) if d >= 0.0 && d.is_finite() => {}
            (AttackKind::Fineprune, _) => {
                return Err(Error::Config("fineprune requires a finite prune_acc_drop >= 0".into()))
            }
            (_, Some(_)) => return Err(Error::Config("prune_acc_drop is only valid for fineprune".into())),
            _ => {}
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("attack config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Weights of the distillation objective
/// `alpha * KL(student, teacher) + (1 - alpha) * CE(student, labels)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillTerms {
    pub alpha: f64,
    pub direction: KlDirection,
    pub temperature: f64,
}

impl DistillTerms {
    pub fn extraction(direction: KlDirection, temperature: f64) -> Self {
        DistillTerms {
            alpha: 1.0,
            direction,
            temperature,
        }
    }
}

/// Teacher log-probabilities `log softmax(z / temperature)` for every sample,
/// row-major `n x K`.
pub fn teacher_log_probs(oracle: &dyn LogitOracle, data: &Dataset, temperature: f64) -> Result<Vec<f64>> {
    if data.input_len() != oracle.input_len() {
        return Err(Error::Input("surrogate data does not match the victim's input shape".into()));
    }
    let k = oracle.num_classes();
    let mut out = Vec::with_capacity(data.len() * k);
    let mut row = vec![0.0f64; k];
    let mut logp = vec![0.0f64; k];
    for chunk in data.inputs().chunks(256 * data.input_len()) {
        let logits = oracle.query_logits(chunk)?;
        for r in logits.iter_rows() {
            for (o, &z) in row.iter_mut().zip(r) {
                *o = z as f64 / temperature;
            }
            log_softmax_into(&row, &mut logp);
            out.extend_from_slice(&logp);
        }
    }
    Ok(out)
}

/// Teacher argmax labels, lowest index on ties.
pub fn teacher_hard_labels(oracle: &dyn LogitOracle, data: &Dataset) -> Result<Vec<usize>> {
    if data.input_len() != oracle.input_len() {
        return Err(Error::Input("surrogate data does not match the victim's input shape".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.inputs().chunks(256 * data.input_len()) {
        out.extend(oracle.query_logits(chunk)?.iter_rows().map(argmax));
    }
    Ok(out)
}

/// Mean distillation loss of a student batch; the gradient w.r.t. `params`
/// is accumulated into `grad`. `labels` may be empty when `alpha == 1`.
#[allow(clippy::too_many_arguments)]
pub fn distill_batch_loss<T: Real>(
    spec: &ModelSpec,
    params: &[T],
    inputs: &[T],
    teacher_logp: &[T],
    labels: &[usize],
    terms: DistillTerms,
    grad: Option<&mut [T]>,
) -> Result<T> {
    let net = Network::new(spec, params);
    let trace = net.forward(inputs)?;
    let n = trace.batch();
    let k = net.num_classes();
    if teacher_logp.len() != n * k {
        return Err(Error::Input("teacher distribution count does not match batch".into()));
    }
    let use_ce = terms.alpha < 1.0;
    if use_ce && labels.len() != n {
        return Err(Error::Input("label count does not match batch".into()));
    }
    let scale = T::one() / T::of_f64(n as f64);
    let a = T::of_f64(terms.alpha);
    let b = T::one() - a;
    let temp = T::of_f64(terms.temperature);
    let want = grad.is_some();
    let mut glogits = vec![T::zero(); if want { n * k } else { 0 }];
    let (mut kl, mut ce) = (T::zero(), T::zero());
    for i in 0..n {
        let row = trace.logit_row(i, k);
        if terms.alpha > 0.0 {
            let g = want.then(|| &mut glogits[i * k..(i + 1) * k]);
            kl += kl_divergence(row, &teacher_logp[i * k..(i + 1) * k], terms.direction, temp, a * scale, g);
        }
        if use_ce {
            let g = want.then(|| &mut glogits[i * k..(i + 1) * k]);
            ce += cross_entropy(row, labels[i], b * scale, g);
        }
    }
    if let Some(g) = grad {
        net.backward(&trace, &glogits, None, g);
    }
    let mut total = T::zero();
    if terms.alpha > 0.0 {
        total += a * (kl * scale);
    }
    if use_ce {
        total += b * (ce * scale);
    }
    Ok(total)
}

struct DistillObjective<'a> {
    spec: &'a ModelSpec,
    data: &'a Dataset,
    teacher: Vec<f64>,
    labels: &'a [usize],
    terms: DistillTerms,
    buf: Vec<f32>,
    tbuf: Vec<f32>,
    lbuf: Vec<usize>,
}

impl Objective for DistillObjective<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn batch_loss_grad(&mut self, params: &[f32], batch: &[usize], grad: &mut [f32]) -> Result<f64> {
        let k = self.spec.num_classes;
        self.data.gather_into(batch, &mut self.buf);
        self.tbuf.clear();
        self.lbuf.clear();
        for &p in batch {
            self.tbuf.extend(self.teacher[p * k..(p + 1) * k].iter().map(|&v| v as f32));
            if !self.labels.is_empty() {
                self.lbuf.push(self.labels[p]);
            }
        }
        let loss = distill_batch_loss(
            self.spec,
            params,
            &self.buf,
            &self.tbuf,
            &self.lbuf,
            self.terms,
            Some(grad),
        )?;
        Ok(loss as f64)
    }
}

fn surrogate_spec(oracle: &dyn LogitOracle, data: &Dataset, cfg: &AttackConfig) -> Result<ModelSpec> {
    let spec = cfg
        .surrogate_spec
        .clone()
        .ok_or_else(|| Error::Config("black-box attacks need an explicit surrogate_spec".into()))?;
    if spec.num_classes != oracle.num_classes() {
        return Err(Error::Attack(format!(
            "surrogate has {} classes, victim answers with {}",
            spec.num_classes,
            oracle.num_classes()
        )));
    }
    if spec.input_len() != data.input_len() {
        return Err(Error::Attack("surrogate input shape does not match surrogate data".into()));
    }
    Ok(spec)
}

/// Trains a fresh surrogate on `data` under the distillation objective with
/// the teacher's soft outputs and, when `alpha < 1`, the data's labels.
fn train_distilled(
    oracle: &dyn LogitOracle,
    data: &Dataset,
    labels: &[usize],
    terms: DistillTerms,
    cfg: &AttackConfig,
) -> Result<(ModelCheckpoint, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Attack("surrogate dataset is empty".into()));
    }
    let spec = surrogate_spec(oracle, data, cfg)?;
    let teacher = if terms.alpha > 0.0 {
        teacher_log_probs(oracle, data, terms.temperature)?
    } else {
        vec![0.0; data.len() * spec.num_classes]
    };
    let mut model = ModelCheckpoint::initialize(&spec, cfg.train.seed)?;
    let mut objective = DistillObjective {
        spec: &spec,
        data,
        teacher,
        labels,
        terms,
        buf: Vec::new(),
        tbuf: Vec::new(),
        lbuf: Vec::new(),
    };
    let log = run_sgd(&mut model, &cfg.train, &mut objective, None)?;
    Ok((model, log))
}

/// Soft-label extraction: the surrogate minimises the mean KL divergence to
/// the victim's softmax outputs over the (unlabeled) surrogate data.
pub fn extract_soft(oracle: &dyn LogitOracle, surrogate_data: &Dataset, cfg: &AttackConfig) -> Result<ModelCheckpoint> {
    let terms = DistillTerms::extraction(cfg.kl_direction, cfg.temperature);
    Ok(train_distilled(oracle, surrogate_data, &[], terms, cfg)?.0)
}

/// Hard-label extraction: the victim's argmax labels replace the data's
/// labels and the surrogate is trained with cross-entropy on them.
pub fn extract_hard(oracle: &dyn LogitOracle, surrogate_data: &Dataset, cfg: &AttackConfig) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if surrogate_data.is_empty() {
        return Err(Error::Attack("surrogate dataset is empty".into()));
    }
    let labels = teacher_hard_labels(oracle, surrogate_data)?;
    let relabeled = Dataset::new(
        format!("{}/victim-labels", surrogate_data.id),
        surrogate_data.input_shape.clone(),
        surrogate_data.num_classes.max(oracle.num_classes()),
        surrogate_data.ids().to_vec(),
        surrogate_data.inputs().to_vec(),
        labels,
    )?;
    let terms = DistillTerms {
        alpha: 0.0,
        direction: cfg.kl_direction,
        temperature: cfg.temperature,
    };
    Ok(train_distilled(oracle, &relabeled, relabeled.labels(), terms, cfg)?.0)
}

/// Distillation with ground-truth labels mixed in at weight `1 - alpha`.
pub fn distill(oracle: &dyn LogitOracle, labeled_data: &Dataset, cfg: &AttackConfig) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let alpha = cfg
        .distill_alpha
        .ok_or_else(|| Error::Config("distill requires distill_alpha".into()))?;
    let terms = DistillTerms {
        alpha,
        direction: cfg.kl_direction,
        temperature: cfg.temperature,
    };
    Ok(train_distilled(oracle, labeled_data, labeled_data.labels(), terms, cfg)?.0)
}

fn continue_training(
    source: &ModelCheckpoint,
    data: &Dataset,
    train: &TrainConfig,
    frozen: Option<&[bool]>,
) -> Result<ModelCheckpoint> {
    let mut model = source.clone();
    if train.epochs == 0 {
        return Ok(model);
    }
    if data.is_empty() {
        return Err(Error::Attack("fine-tuning dataset is empty".into()));
    }
    let mut objective = SupervisedObjective::new(&source.spec, data)?;
    run_sgd(&mut model, train, &mut objective, frozen)?;
    Ok(model)
}

/// Continues cross-entropy training from the victim's parameters.
pub fn finetune(source: &ModelCheckpoint, clean_data: &Dataset, cfg: &AttackConfig) -> Result<ModelCheckpoint> {
    cfg.train.validate()?;
    continue_training(source, clean_data, &cfg.train, None)
}

/// Mean absolute activation of every last-hidden-layer unit over `inputs`.
pub fn unit_activations(model: &ModelCheckpoint, inputs: &[f32]) -> Result<Vec<f64>> {
    let net = model.network();
    let (act, units, spatial) = net.last_hidden_activations(inputs)?;
    let n = net.batch_size_of(inputs)?;
    let mut sums = vec![0.0f64; units];
    for s in 0..n {
        for (u, sum) in sums.iter_mut().enumerate() {
            let base = (s * units + u) * spatial;
            *sum += act[base..base + spatial].iter().map(|v| v.abs() as f64).sum::<f64>();
        }
    }
    let denom = (n * spatial).max(1) as f64;
    Ok(sums.into_iter().map(|v| v / denom).collect())
}

/// Units sorted by ascending activation, ties by index.
pub fn prune_order(activations: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..activations.len()).collect();
    order.sort_by(|&a, &b| activations[a].total_cmp(&activations[b]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Units zeroed, in pruning order.
    pub pruned: Vec<usize>,
    pub candidate_order: Vec<usize>,
    pub base_accuracy: f64,
    /// Validation accuracy when pruning stopped, before fine-tuning.
    pub pruned_accuracy: f64,
    pub final_accuracy: f64,
}

/// Zeroes last-hidden-layer units in ascending order of mean activation
/// while validation accuracy stays within `prune_acc_drop` of the unpruned
/// model, then fine-tunes with the pruned units held at zero.
pub fn fine_prune(
    source: &ModelCheckpoint,
    clean_data: &Dataset,
    validation: &Dataset,
    cfg: &AttackConfig,
) -> Result<(ModelCheckpoint, PruneReport)> {
    let drop = cfg
        .prune_acc_drop
        .ok_or_else(|| Error::Config("fine-pruning requires prune_acc_drop".into()))?;
    cfg.train.validate()?;
    if validation.is_empty() {
        return Err(Error::Attack("validation set for pruning is empty".into()));
    }
    if clean_data.is_empty() {
        return Err(Error::Attack("fine-pruning needs clean data to rank units".into()));
    }
    let units = source
        .network()
        .layout()
        .last_hidden_units()
        .ok_or_else(|| Error::Attack("architecture has no hidden layer to prune".into()))?;
    let mut r = rng::stream(cfg.train.seed, "prune-batch");
    let take = clean_data.len().min(256);
    let mut positions: Vec<usize> = index::sample(&mut r, clean_data.len(), take).into_vec();
    positions.sort_unstable();
    let mut probe = Vec::new();
    clean_data.gather_into(&positions, &mut probe);
    let order = prune_order(&unit_activations(source, &probe)?);

    let base = accuracy(source, validation)?;
    let mut model = source.clone();
    let mut frozen = vec![false; model.parameters.len()];
    let mut pruned = Vec::new();
    let mut current = base;
    for &u in &order {
        let saved: Vec<f32> = units[u].iter().map(|&i| model.parameters[i]).collect();
        for &i in &units[u] {
            model.parameters[i] = 0.0;
        }
        let acc = accuracy(&model, validation)?;
        if base - acc > drop {
            for (&i, &v) in units[u].iter().zip(&saved) {
                model.parameters[i] = v;
            }
            break;
        }
        for &i in &units[u] {
            frozen[i] = true;
        }
        pruned.push(u);
        current = acc;
    }
    if pruned.is_empty() {
        log::warn!("the first prune already exceeds the accuracy-drop threshold; fine-tuning the unpruned model");
    }
    let model = continue_training(&model, clean_data, &cfg.train, Some(&frozen))?;
    let final_accuracy = accuracy(&model, validation)?;
    Ok((
        model,
        PruneReport {
            pruned,
            candidate_order: order,
            base_accuracy: base,
            pruned_accuracy: current,
            final_accuracy,
        },
    ))
}

/// Surrogate checkpoint plus metadata, as handed to verification.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub kind: AttackKind,
    pub model: ModelCheckpoint,
    /// Samples sent to the victim (0 for white-box attacks).
    pub queries: u64,
    pub config_hash: String,
    pub prune: Option<PruneReport>,
}

/// Runs one configured attack. `data` is the attacker's dataset;
/// `validation` is only used by fine-pruning.
pub fn run_attack(
    victim: &ModelCheckpoint,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let audited = AuditedModel::new(victim);
    let mut black_box_cfg = cfg.clone();
    if black_box_cfg.surrogate_spec.is_none() {
        black_box_cfg.surrogate_spec = Some(victim.spec.clone());
    }
    let mut prune = None;
    let model = match cfg.kind {
        AttackKind::ExtractSoft => extract_soft(&audited, data, &black_box_cfg)?,
        AttackKind::ExtractHard => extract_hard(&audited, data, &black_box_cfg)?,
        AttackKind::Distill => distill(&audited, data, &black_box_cfg)?,
        AttackKind::Finetune => finetune(audited.white_box(), data, cfg)?,
        AttackKind::Fineprune => {
            let validation =
                validation.ok_or_else(|| Error::Attack("fine-pruning needs a validation set".into()))?;
            let (m, report) = fine_prune(audited.white_box(), data, validation, cfg)?;
            prune = Some(report);
            m
        }
    };
    if cfg.kind.is_black_box() {
        debug_assert_eq!(audited.parameter_reads(), 0);
    }
    Ok(AttackOutcome {
        kind: cfg.kind,
        model,
        queries: audited.queries(),
        config_hash: cfg.hash(),
        prune,
    })
}
