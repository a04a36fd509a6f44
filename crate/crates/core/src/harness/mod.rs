//! Experiment orchestration: dataset ingestion, the staged pipeline, the
//! run manifest and report emission.

mod config;
mod report;
mod store;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    AttackEntry, DatasetSource, ExperimentConfig, SweepParameter, SweepSection, TrainSection, TriggerSection,
    WatermarkSection,
};
pub use report::{emit_report, render_svg_plot, results_csv, run_sweep, EvalRecord, ResultRow, SweepPoint};
pub use store::{sha256_hex, ArtifactRecord, ArtifactStore, RunManifest, StageRecord, StageStatus, MANIFEST_FILE};

use crate::attacks::{run_attack, PruneReport};
use crate::data::{digits, generate_blobs, generate_multiview_images, load_csv, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{train_supervised, ModelCheckpoint, ModelSpec};
use crate::rng::sub_seed;
use crate::trigger::{build_trigger_set, split_source};
use crate::verification::verify_ownership;
use crate::watermark::{train_benign, train_watermarked};

pub const SOURCE_DATA: &str = "data/source.bin";
pub const SURROGATE_DATA: &str = "data/surrogate.bin";
pub const TEST_DATA: &str = "data/test.bin";
pub const SELECTOR_MODEL: &str = "models/selector.ckpt";
pub const TRIGGER_FILE: &str = "trigger/trigger.csv";
pub const SOURCE_MODEL: &str = "models/source.ckpt";
pub const SOURCE_LOG: &str = "logs/source.jsonl";
pub const BENIGN_MODEL: &str = "models/benign.ckpt";
pub const INDEPENDENT_MODEL: &str = "models/independent.ckpt";

pub fn attack_model_path(name: &str) -> String {
    format!("models/attack-{name}.ckpt")
}

pub fn verify_report_path(name: &str) -> String {
    format!("reports/verify-{name}.toml")
}

pub fn eval_path(name: &str) -> String {
    format!("reports/eval-{name}.json")
}

/// How far `Pipeline::run_until` goes. Later targets include earlier ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Trigger,
    Source,
    Benign,
    Attacks,
    Verify,
    Report,
}

/// Attack side-information stored next to the surrogate checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub name: String,
    pub kind: crate::attacks::AttackKind,
    pub queries: u64,
    pub config_hash: String,
    pub prune: Option<PruneReport>,
}

/// Builds the dataset described by `source`; `seed` drives synthetic
/// generators only.
pub fn load_source(source: &DatasetSource, seed: u64, id: &str) -> Result<Dataset> {
    match source {
        DatasetSource::Blobs(c) => generate_blobs(c, seed, id),
        DatasetSource::MultiviewImages(c) => generate_multiview_images(c, seed, id),
        DatasetSource::Digits { cache_dir } => {
            let dir = cache_dir.clone().unwrap_or_else(digits::cache_dir);
            digits::load(&dir)
        }
        DatasetSource::Directory {
            path,
            file,
            input_shape,
            num_classes,
        } => load_csv(&path.join(file), id, input_shape.clone(), *num_classes),
    }
}

pub struct Pipeline {
    config: ExperimentConfig,
    store: ArtifactStore,
    manifest: RunManifest,
    manifest_path: PathBuf,
}

impl Pipeline {
    /// Opens (or resumes) a run in `out`. A manifest left by a different
    /// configuration is refused.
    pub fn open(config: ExperimentConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        let store = ArtifactStore::open(out)?;
        let manifest_path = out.join(MANIFEST_FILE);
        let hash = config.hash();
        let manifest = if manifest_path.exists() {
            let m = RunManifest::load(&manifest_path)?;
            if m.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} holds a run of a different configuration ({} vs {hash})",
                    out.display(),
                    m.config_hash
                )));
            }
            m
        } else {
            RunManifest::new(hash, config.seed)
        };
        Ok(Pipeline {
            config,
            store,
            manifest,
            manifest_path,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    fn seed(&self, stream: &str) -> u64 {
        sub_seed(self.config.seed, stream)
    }

    /// Runs `body` unless the manifest already holds a valid result for
    /// `name`. Failures are recorded and returned wrapped with the stage.
    fn stage<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&Pipeline) -> Result<Vec<ArtifactRecord>>,
    {
        self.run_stage(name, false, body)
    }

    fn run_stage<F>(&mut self, name: &str, force: bool, body: F) -> Result<()>
    where
        F: FnOnce(&Pipeline) -> Result<Vec<ArtifactRecord>>,
    {
        if let Some(rec) = self.manifest.completed(name).filter(|_| !force) {
            let intact = rec.artifacts.iter().all(|a| {
                self.store
                    .path(&a.path)
                    .ok()
                    .and_then(|p| std::fs::read(p).ok())
                    .is_some_and(|b| sha256_hex(&b) == a.sha256)
            });
            if intact {
                log::info!("stage {name}: up to date");
                return Ok(());
            }
            log::warn!("stage {name}: artifacts changed on disk, rerunning");
        }
        log::info!("stage {name}: running");
        let t0 = Instant::now();
        let result = body(self);
        let seconds = t0.elapsed().as_secs_f64();
        let (record, out) = match result {
            Ok(artifacts) => (
                StageRecord {
                    stage: name.to_string(),
                    status: StageStatus::Ok,
                    artifacts,
                    seconds,
                    error: None,
                },
                Ok(()),
            ),
            Err(e) => (
                StageRecord {
                    stage: name.to_string(),
                    status: StageStatus::Failed,
                    artifacts: Vec::new(),
                    seconds,
                    error: Some(e.to_string()),
                },
                Err(Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                }),
            ),
        };
        self.manifest.push(record);
        self.manifest.save(&self.manifest_path)?;
        out
    }

    fn spec(&self, data: &Dataset) -> Result<ModelSpec> {
        ModelSpec::new(self.config.model.clone(), data.num_classes, data.input_shape.clone())
    }

    fn clean_and_trigger(&self) -> Result<(Dataset, Dataset, crate::trigger::TriggerSet, Dataset)> {
        let source = self.store.load_dataset(SOURCE_DATA)?;
        let trigger = self.store.load_trigger(TRIGGER_FILE)?;
        let (clean, view) = split_source(&source, &trigger)?;
        Ok((clean, view, trigger, source))
    }

    fn evaluate(&self, name: &str, role: &str, model: &ModelCheckpoint) -> Result<ArtifactRecord> {
        let test = self.store.load_dataset(TEST_DATA)?;
        let rec = EvalRecord {
            model: name.to_string(),
            role: role.to_string(),
            test_acc: accuracy(model, &test)?,
        };
        self.store.save_json(&eval_path(name), &rec)
    }

    pub fn run_until(&mut self, target: Target) -> Result<()> {
        self.stage("data", |p| {
            let cfg = &p.config;
            let full = load_source(&cfg.dataset, p.seed("data"), "data")?;
            let (train, test) = split_dataset(&full, 1.0 - cfg.test_fraction, p.seed("split-test"))?;
            let (source, mut surrogate) = split_dataset(&train, cfg.source_fraction, p.seed("split"))?;
            if let Some(other) = &cfg.surrogate_dataset {
                surrogate = load_source(other, p.seed("surrogate-data"), "surrogate")?;
                if surrogate.input_shape != source.input_shape {
                    return Err(Error::Config(format!(
                        "surrogate data shape {:?} differs from source shape {:?}",
                        surrogate.input_shape, source.input_shape
                    )));
                }
            }
            Ok(vec![
                p.store.save_dataset(SOURCE_DATA, &source)?,
                p.store.save_dataset(SURROGATE_DATA, &surrogate)?,
                p.store.save_dataset(TEST_DATA, &test)?,
            ])
        })?;
        self.stage("selector", |p| {
            let source = p.store.load_dataset(SOURCE_DATA)?;
            let spec = p.spec(&source)?;
            let model = train_supervised(&spec, &source, &p.config.train.to_config(p.seed("selector")))?;
            Ok(vec![p.store.save_model(SELECTOR_MODEL, &model)?])
        })?;
        self.stage("trigger", |p| {
            let source = p.store.load_dataset(SOURCE_DATA)?;
            let selector = p.store.load_model(SELECTOR_MODEL)?;
            let t = &p.config.trigger;
            let set = build_trigger_set(
                &selector,
                &source,
                t.size_for(source.len()),
                t.selection,
                t.labeling,
                t.pool,
                p.seed("trigger"),
            )?;
            Ok(vec![p.store.save_trigger(TRIGGER_FILE, &set)?])
        })?;
        if target == Target::Trigger {
            return Ok(());
        }
        self.stage("source", |p| {
            let (clean, view, trigger, source) = p.clean_and_trigger()?;
            let spec = p.spec(&source)?;
            let out = train_watermarked(
                &spec,
                &clean,
                &view,
                &trigger.original_labels(),
                &p.config.watermark_config(p.seed("source")),
            )?;
            let mut log = String::new();
            for e in &out.log {
                log.push_str(&serde_json::to_string(e).expect("epoch stats serialize"));
                log.push('\n');
            }
            Ok(vec![
                p.store.save_model(SOURCE_MODEL, &out.model)?,
                p.store.write_bytes(SOURCE_LOG, log.as_bytes())?,
                p.evaluate("source", "source", &out.model)?,
            ])
        })?;
        if target == Target::Source {
            return Ok(());
        }
        self.stage("benign", |p| {
            let (clean, _, _, source) = p.clean_and_trigger()?;
            let spec = p.spec(&source)?;
            let model = train_benign(&spec, &clean, &p.config.train.to_config(p.seed("benign")))?;
            Ok(vec![
                p.store.save_model(BENIGN_MODEL, &model)?,
                p.evaluate("benign", "benign", &model)?,
            ])
        })?;
        if target == Target::Benign {
            return Ok(());
        }
        if self.config.independent_model {
            self.stage("independent", |p| {
                let surrogate = p.store.load_dataset(SURROGATE_DATA)?;
                let source = p.store.load_dataset(SOURCE_DATA)?;
                let spec = p.spec(&source)?;
                let model = train_supervised(&spec, &surrogate, &p.config.train.to_config(p.seed("independent")))?;
                Ok(vec![p.store.save_model(INDEPENDENT_MODEL, &model)?])
            })?;
        }
        let attacks = self.config.attacks.clone();
        for entry in &attacks {
            self.stage(&format!("attack:{}", entry.name), |p| {
                let victim = p.store.load_model(SOURCE_MODEL)?;
                let data = p.store.load_dataset(SURROGATE_DATA)?;
                let cfg = p.config.attack_config(
                    entry,
                    Some((&data.input_shape, victim.spec.num_classes)),
                    p.seed(&format!("attack:{}", entry.name)),
                )?;
                let outcome = run_attack(&victim, &data, Some(&data), &cfg)?;
                let record = AttackRecord {
                    name: entry.name.clone(),
                    kind: outcome.kind,
                    queries: outcome.queries,
                    config_hash: outcome.config_hash,
                    prune: outcome.prune,
                };
                Ok(vec![
                    p.store.save_model(&attack_model_path(&entry.name), &outcome.model)?,
                    p.store.save_json(&format!("attacks/{}.json", entry.name), &record)?,
                ])
            })?;
        }
        if target == Target::Attacks {
            return Ok(());
        }
        let mut suspects = vec![("source".to_string(), "source".to_string(), SOURCE_MODEL.to_string())];
        if self.config.independent_model {
            suspects.push(("independent".into(), "independent".into(), INDEPENDENT_MODEL.into()));
        }
        for a in &attacks {
            suspects.push((a.name.clone(), format!("surrogate:{}", a.kind.name()), attack_model_path(&a.name)));
        }
        for (name, role, model_path) in suspects {
            self.stage(&format!("verify:{name}"), |p| {
                let suspect = p.store.load_model(&model_path)?;
                let benign = p.store.load_model(BENIGN_MODEL)?;
                let source = p.store.load_dataset(SOURCE_DATA)?;
                let trigger = p.store.load_trigger(TRIGGER_FILE)?;
                let report = verify_ownership(&suspect, &benign, &trigger, &source, p.config.significance)?;
                Ok(vec![
                    p.store.save_report(&verify_report_path(&name), &report)?,
                    p.evaluate(&name, &role, &suspect)?,
                ])
            })?;
        }
        if target == Target::Verify {
            return Ok(());
        }
        self.report()
    }

    /// Regenerates the report from what is already in the run directory.
    /// Always reruns, since the manifest may have grown since the last one.
    pub fn report(&mut self) -> Result<()> {
        self.run_stage("report", true, |p| emit_report(&p.manifest, &p.store))
    }
}

/// Runs every stage of `config` in `out` and returns the manifest.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let mut p = Pipeline::open(config.clone(), out)?;
    p.run_until(Target::Report)?;
    Ok(p.manifest.clone())
}
