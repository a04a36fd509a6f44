//! Trigger-set construction: logit-margin ranking, label reassignment, the
//! clean/trigger split and the manifest file that stores the secret.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::dataset_logits;
use crate::model::{ModelCheckpoint, Real};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Largest logit margin first.
    #[default]
    MarginTop,
    Random,
    /// Smallest logit margin first.
    HighestConfidence,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStrategy {
    /// Largest non-true logit.
    #[default]
    RunnerUp,
    RandomOther,
    /// Smallest non-true logit.
    MinConfidence,
}

/// Which samples are eligible for selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPool {
    #[default]
    All,
    /// Only samples the selector classifies correctly (negative margin).
    CorrectOnly,
}

macro_rules! named_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }
        }

        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(Error::Config(format!("unknown {} `{s}`", stringify!($ty)))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(SelectionStrategy { MarginTop => "margin_top", Random => "random", HighestConfidence => "highest_confidence" });
named_enum!(LabelStrategy { RunnerUp => "runner_up", RandomOther => "random_other", MinConfidence => "min_confidence" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerEntry {
    pub sample_id: u64,
    pub original_label: usize,
    pub assigned_label: usize,
    pub margin: f64,
}

/// The watermark secret: which samples were relabeled, and to what.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSet {
    /// Sorted by margin descending, ties by ascending id.
    pub entries: Vec<TriggerEntry>,
    pub source_dataset_id: String,
    pub selector_model_hash: String,
    pub selection: Option<SelectionStrategy>,
    pub labeling: LabelStrategy,
    pub seed: u64,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample_ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.sample_id).collect()
    }

    pub fn assigned_labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.assigned_label).collect()
    }

    pub fn original_labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.original_label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sample_id) {
                return Err(Error::Selection(format!("duplicate trigger sample id {}", e.sample_id)));
            }
            if e.assigned_label == e.original_label {
                return Err(Error::Selection(format!(
                    "trigger sample {} keeps its original label {}",
                    e.sample_id, e.original_label
                )));
            }
        }
        if self.entries.windows(2).any(|w| margin_order(&w[0], &w[1]).is_gt()) {
            return Err(Error::Selection("trigger entries are not sorted by margin".into()));
        }
        Ok(())
    }
}

fn margin_order(a: &TriggerEntry, b: &TriggerEntry) -> std::cmp::Ordering {
    b.margin.total_cmp(&a.margin).then(a.sample_id.cmp(&b.sample_id))
}

/// `max_{j != y} z_j - z_y`. Negative iff `y` is the strict argmax.
pub fn logit_margin<T: Real>(logits: &[T], y: usize) -> Result<T> {
    if logits.len() < 2 {
        return Err(Error::Domain(format!("logit margin needs K >= 2, got {}", logits.len())));
    }
    if y >= logits.len() {
        return Err(Error::Domain(format!("class {y} out of range for {} logits", logits.len())));
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &z)| z)
        .fold(T::neg_infinity(), T::max);
    Ok(best_other - logits[y])
}

/// Index of the largest (`largest = true`) or smallest logit among `j != y`,
/// lowest index on ties.
fn extreme_other(logits: &[f32], y: usize, largest: bool) -> usize {
    let mut best: Option<usize> = None;
    for (j, &z) in logits.iter().enumerate() {
        if j == y {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) if largest => z > logits[b],
            Some(b) => z < logits[b],
        };
        if better {
            best = Some(j);
        }
    }
    best.expect("at least two classes")
}

/// Margins of every sample in `data` under `model`, widened to f64.
pub fn dataset_margins(model: &ModelCheckpoint, data: &Dataset) -> Result<Vec<f64>> {
    let logits = dataset_logits(model, data)?;
    logits
        .iter_rows()
        .zip(data.labels())
        .map(|(row, &y)| {
            let widened: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            logit_margin(&widened, y)
        })
        .collect()
}

/// Picks `q` of the given ids by margin rank or at random.
pub fn rank_by_margin(ids: &[u64], margins: &[f64], q: usize, strategy: SelectionStrategy, seed: u64) -> Result<Vec<u64>> {
    if ids.len() != margins.len() {
        return Err(Error::Input("ids and margins differ in length".into()));
    }
    if q > ids.len() {
        return Err(Error::Selection(format!(
            "cannot select {q} trigger samples from a pool of {}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    match strategy {
        SelectionStrategy::MarginTop => {
            order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(ids[a].cmp(&ids[b])));
        }
        SelectionStrategy::HighestConfidence => {
            order.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]).then(ids[a].cmp(&ids[b])));
        }
        SelectionStrategy::Random => {
            // sample over id-sorted positions so the draw ignores dataset order
            order.sort_by_key(|&p| ids[p]);
            let mut r = rng::stream(seed, "trigger-select");
            let picked = index::sample(&mut r, ids.len(), q);
            return Ok(picked.iter().map(|i| ids[order[i]]).collect());
        }
    }
    Ok(order[..q].iter().map(|&p| ids[p]).collect())
}

/// Selects `q` trigger sample ids from `data` using the selector `model`.
pub fn select_trigger_set(
    model: &ModelCheckpoint,
    data: &Dataset,
    q: usize,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<u64>> {
    select_trigger_set_in(model, data, q, strategy, SelectionPool::All, seed)
}

/// As [`select_trigger_set`], restricted to a selection pool.
pub fn select_trigger_set_in(
    model: &ModelCheckpoint,
    data: &Dataset,
    q: usize,
    strategy: SelectionStrategy,
    pool: SelectionPool,
    seed: u64,
) -> Result<Vec<u64>> {
    if q > data.len() {
        return Err(Error::Selection(format!(
            "cannot select {q} trigger samples from {} samples",
            data.len()
        )));
    }
    let margins = dataset_margins(model, data)?;
    let (ids, margins): (Vec<u64>, Vec<f64>) = data
        .ids()
        .iter()
        .copied()
        .zip(margins)
        .filter(|&(_, m)| pool == SelectionPool::All || m < 0.0)
        .unzip();
    rank_by_margin(&ids, &margins, q, strategy, seed)
}

/// Relabels the samples `ids` and packages them as a trigger set.
pub fn assign_labels(
    model: &ModelCheckpoint,
    data: &Dataset,
    ids: &[u64],
    strategy: LabelStrategy,
    seed: u64,
) -> Result<TriggerSet> {
    let unique: HashSet<u64> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(Error::Selection("trigger ids contain duplicates".into()));
    }
    let k = model.spec.num_classes;
    let positions = data.positions_of(ids)?;
    let view = data.subset(format!("{}/trigger-candidates", data.id), &positions);
    let logits = dataset_logits(model, &view)?;
    let mut r = rng::stream(seed, "trigger-label");
    let mut entries = Vec::with_capacity(ids.len());
    for (i, row) in logits.iter_rows().enumerate() {
        let y = view.label(i);
        let widened: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let margin = logit_margin(&widened, y)?;
        let assigned = match strategy {
            LabelStrategy::RunnerUp => extreme_other(row, y, true),
            LabelStrategy::MinConfidence => extreme_other(row, y, false),
            LabelStrategy::RandomOther => {
                let r = r.random_range(0..k - 1);
                if r < y {
                    r
                } else {
                    r + 1
                }
            }
        };
        entries.push(TriggerEntry {
            sample_id: view.sample_id(i),
            original_label: y,
            assigned_label: assigned,
            margin,
        });
    }
    entries.sort_by(margin_order);
    let set = TriggerSet {
        entries,
        source_dataset_id: data.id.clone(),
        selector_model_hash: model.content_hash(),
        selection: None,
        labeling: strategy,
        seed,
    };
    set.validate()?;
    Ok(set)
}

/// Selection followed by labeling, with the full provenance recorded.
pub fn build_trigger_set(
    model: &ModelCheckpoint,
    data: &Dataset,
    q: usize,
    selection: SelectionStrategy,
    labeling: LabelStrategy,
    pool: SelectionPool,
    seed: u64,
) -> Result<TriggerSet> {
    let ids = select_trigger_set_in(model, data, q, selection, pool, seed)?;
    let mut set = assign_labels(model, data, &ids, labeling, seed)?;
    set.selection = Some(selection);
    Ok(set)
}

/// Splits `data` into the clean set (original labels, trigger samples
/// removed) and the trigger view (assigned labels, trigger order).
pub fn split_source(data: &Dataset, trigger: &TriggerSet) -> Result<(Dataset, Dataset)> {
    let trigger_view = trigger_view(data, trigger)?;
    let excluded: HashSet<u64> = trigger.entries.iter().map(|e| e.sample_id).collect();
    let keep: Vec<usize> = (0..data.len()).filter(|&p| !excluded.contains(&data.sample_id(p))).collect();
    let clean = data.subset(format!("{}/clean", data.id), &keep);
    Ok((clean, trigger_view))
}

/// The trigger samples carrying their assigned labels.
pub fn trigger_view(data: &Dataset, trigger: &TriggerSet) -> Result<Dataset> {
    let positions = data.positions_of(&trigger.sample_ids())?;
    let view = data.subset(format!("{}/trigger", data.id), &positions);
    view.relabeled(view.id.clone(), trigger.assigned_labels())
}

const MANIFEST_MAGIC: &str = "# mvmark trigger manifest v1";

pub fn save_trigger_manifest(set: &TriggerSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_MAGIC}");
    let _ = writeln!(out, "dataset_id={}", set.source_dataset_id);
    let _ = writeln!(out, "selector_model_hash={}", set.selector_model_hash);
    let _ = writeln!(out, "selection={}", set.selection.map_or("unspecified", |s| s.name()));
    let _ = writeln!(out, "labeling={}", set.labeling);
    let _ = writeln!(out, "seed={}", set.seed);
    let _ = writeln!(out, "count={}", set.len());
    out.push_str("sample_id,y,y_hat,margin\n");
    for e in &set.entries {
        let _ = writeln!(out, "{},{},{},{}", e.sample_id, e.original_label, e.assigned_label, e.margin);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out).map_err(|e| Error::persistence(path, e.to_string()))
}

pub fn load_trigger_manifest(path: &Path) -> Result<TriggerSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::persistence(path, e.to_string()))?;
    parse_manifest(&text).map_err(|msg| Error::persistence(path, msg))
}

fn parse_manifest(text: &str) -> std::result::Result<TriggerSet, String> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err("not a trigger manifest".into());
    }
    let mut header = std::collections::HashMap::new();
    for line in lines.by_ref() {
        if line == "sample_id,y,y_hat,margin" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad header line `{line}`"))?;
        header.insert(k.to_string(), v.to_string());
    }
    let field = |k: &str| header.get(k).cloned().ok_or_else(|| format!("missing header field `{k}`"));
    let selection = match field("selection")?.as_str() {
        "unspecified" => None,
        s => Some(s.parse::<SelectionStrategy>().map_err(|e| e.to_string())?),
    };
    let labeling = field("labeling")?.parse::<LabelStrategy>().map_err(|e| e.to_string())?;
    let seed = field("seed")?.parse::<u64>().map_err(|e| e.to_string())?;
    let count = field("count")?.parse::<usize>().map_err(|e| e.to_string())?;
    let mut entries = Vec::with_capacity(count);
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(format!("bad record `{line}`"));
        }
        let bad = |e: &dyn std::fmt::Display| format!("bad record `{line}`: {e}");
        entries.push(TriggerEntry {
            sample_id: cols[0].parse().map_err(|e| bad(&e))?,
            original_label: cols[1].parse().map_err(|e| bad(&e))?,
            assigned_label: cols[2].parse().map_err(|e| bad(&e))?,
            margin: cols[3].parse().map_err(|e| bad(&e))?,
        });
    }
    if entries.len() != count {
        return Err(format!("header declares {count} records, found {}", entries.len()));
    }
    let set = TriggerSet {
        entries,
        source_dataset_id: field("dataset_id")?,
        selector_model_hash: field("selector_model_hash")?,
        selection,
        labeling,
        seed,
    };
    set.validate().map_err(|e| e.to_string())?;
    Ok(set)
}
