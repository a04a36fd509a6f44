//! Labeled sample collections, synthetic generators and dataset persistence.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Samples with stable integer ids. Ids survive splitting and reordering,
/// so a trigger manifest can refer to samples independently of position.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    ids: Vec<u64>,
    inputs: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        id: impl Into<String>,
        input_shape: Vec<usize>,
        num_classes: usize,
        ids: Vec<u64>,
        inputs: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let dim: usize = input_shape.iter().product();
        if dim == 0 {
            return Err(Error::Data("input shape must have positive extents".into()));
        }
        if ids.len() != labels.len() || inputs.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "inconsistent dataset buffers: {} ids, {} labels, {} input values for sample size {dim}",
                ids.len(),
                labels.len(),
                inputs.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Data(format!("duplicate sample id {dup}")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite input value".into()));
        }
        Ok(Dataset {
            id: id.into(),
            input_shape,
            num_classes,
            ids,
            inputs,
            labels,
        })
    }

    /// Dataset whose ids are the positions `0..n`.
    pub fn from_rows(
        id: impl Into<String>,
        input_shape: Vec<usize>,
        num_classes: usize,
        inputs: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::new(id, input_shape, num_classes, ids, inputs, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input(&self, pos: usize) -> &[f32] {
        let d = self.input_len();
        &self.inputs[pos * d..(pos + 1) * d]
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn label(&self, pos: usize) -> usize {
        self.labels[pos]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_id(&self, pos: usize) -> u64 {
        self.ids[pos]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Positions of the given ids, in the same order.
    pub fn positions_of(&self, ids: &[u64]) -> Result<Vec<usize>> {
        let index: HashMap<u64, usize> = self.ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("sample id {id} not found in dataset `{}`", self.id)))
            })
            .collect()
    }

    /// Copies the samples at `positions` (in that order) into a new dataset.
    pub fn subset(&self, id: impl Into<String>, positions: &[usize]) -> Dataset {
        let d = self.input_len();
        let mut inputs = Vec::with_capacity(positions.len() * d);
        let mut labels = Vec::with_capacity(positions.len());
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            inputs.extend_from_slice(self.input(p));
            labels.push(self.labels[p]);
            ids.push(self.ids[p]);
        }
        Dataset {
            id: id.into(),
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            ids,
            inputs,
            labels,
        }
    }

    /// Same samples with replaced labels.
    pub fn relabeled(&self, id: impl Into<String>, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(
            id,
            self.input_shape.clone(),
            self.num_classes,
            self.ids.clone(),
            self.inputs.clone(),
            labels,
        )
    }

    /// Gathers the inputs at `positions` into `out`, converting the scalar type.
    pub fn gather_into<T: crate::model::Real>(&self, positions: &[usize], out: &mut Vec<T>) {
        out.clear();
        for &p in positions {
            out.extend(self.input(p).iter().map(|&v| T::of_f32(v)));
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Concatenates two datasets with identical shape and class count.
    pub fn concat(&self, id: impl Into<String>, other: &Dataset) -> Result<Dataset> {
        if self.input_shape != other.input_shape || self.num_classes != other.num_classes {
            return Err(Error::Data("cannot concatenate datasets of different shape".into()));
        }
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&other.inputs);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(id, self.input_shape.clone(), self.num_classes, ids, inputs, labels)
    }
}

/// Isotropic Gaussian blobs around random class centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of the class centres; samples have unit variance.
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_separation() -> f64 {
    3.0
}

pub fn generate_blobs(cfg: &BlobsConfig, seed: u64, id: &str) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.dim == 0 || cfg.per_class == 0 {
        return Err(Error::Config("blobs need >= 2 classes, dim >= 1, per_class >= 1".into()));
    }
    let mut centre_rng = rng::stream(seed, "blobs-centres");
    let centre = Normal::new(0.0, cfg.separation).map_err(|e| Error::Config(e.to_string()))?;
    let centres: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| (0..cfg.dim).map(|_| centre.sample(&mut centre_rng)).collect())
        .collect();
    let mut rng = rng::stream(seed, &format!("blobs-samples-{id}"));
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut inputs = Vec::with_capacity(cfg.num_classes * cfg.per_class * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    for i in 0..cfg.num_classes * cfg.per_class {
        let c = i % cfg.num_classes;
        inputs.extend(centres[c].iter().map(|m| (m + unit.sample(&mut rng)) as f32));
        labels.push(c);
    }
    Dataset::from_rows(id, vec![cfg.dim], cfg.num_classes, inputs, labels)
}

/// Synthetic images built from smooth per-class prototypes. A fraction of
/// samples blend in the prototype of a second class, which makes them
/// multi-view: they carry discriminative features of two classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiViewImagesConfig {
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    pub per_class: usize,
    /// Pixel noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Fraction of samples that blend in a second class.
    #[serde(default = "default_mix_fraction")]
    pub mix_fraction: f64,
    /// Blend weights of the secondary class are drawn uniformly from
    /// `[0, max_mix]`.
    #[serde(default = "default_max_mix")]
    pub max_mix: f64,
}

fn default_channels() -> usize {
    1
}
fn default_side() -> usize {
    8
}
fn default_noise() -> f64 {
    0.6
}
fn default_mix_fraction() -> f64 {
    0.3
}
fn default_max_mix() -> f64 {
    0.5
}

pub fn generate_multiview_images(cfg: &MultiViewImagesConfig, seed: u64, id: &str) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.channels == 0 || cfg.side == 0 || cfg.per_class == 0 {
        return Err(Error::Config("multiview images need >= 2 classes and positive extents".into()));
    }
    if !(0.0..=1.0).contains(&cfg.mix_fraction) || !(0.0..=1.0).contains(&cfg.max_mix) {
        return Err(Error::Config("mix_fraction and max_mix must lie in [0, 1]".into()));
    }
    let (c, s) = (cfg.channels, cfg.side);
    let d = c * s * s;
    // Prototypes: sums of a few random Gaussian bumps per channel, normalised
    // to unit RMS so every class has the same signal energy.
    let mut proto_rng = rng::stream(seed, "mv-prototypes");
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let mut img = vec![0.0f64; d];
            for ch in 0..c {
                for _ in 0..3 {
                    let cy = proto_rng.random_range(0.0..s as f64);
                    let cx = proto_rng.random_range(0.0..s as f64);
                    let sign = if proto_rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let width = proto_rng.random_range(0.8..2.0) * s as f64 / 8.0;
                    for y in 0..s {
                        for x in 0..s {
                            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ch * s + y) * s + x] += sign * (-r2 / (2.0 * width * width)).exp();
                        }
                    }
                }
            }
            let mean = img.iter().sum::<f64>() / d as f64;
            img.iter_mut().for_each(|v| *v -= mean);
            let rms = (img.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt().max(1e-12);
            img.iter_mut().for_each(|v| *v /= rms);
            img
        })
        .collect();
    let mut rng = rng::stream(seed, &format!("mv-samples-{id}"));
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mix = Uniform::new_inclusive(0.0, cfg.max_mix).map_err(|e| Error::Config(e.to_string()))?;
    let gain = Uniform::new(0.8, 1.2).unwrap();
    let n = cfg.num_classes * cfg.per_class;
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.num_classes;
        let amp = gain.sample(&mut rng);
        let (other, weight) = if rng.random_bool(cfg.mix_fraction) {
            let mut o = rng.random_range(0..cfg.num_classes - 1);
            if o >= class {
                o += 1;
            }
            (o, mix.sample(&mut rng))
        } else {
            (class, 0.0)
        };
        for j in 0..d {
            let v = amp * ((1.0 - weight) * prototypes[class][j] + weight * prototypes[other][j])
                + noise.sample(&mut rng);
            inputs.push(v as f32);
        }
        labels.push(class);
    }
    Dataset::from_rows(id, vec![c, s, s], cfg.num_classes, inputs, labels)
}

/// Class-stratified, seed-deterministic split into a `fraction` part and the
/// remainder. The first part has exactly `round(fraction * len)` samples and
/// every class is split within one sample of its proportional share.
pub fn split_dataset(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if data.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let total = (fraction * data.len() as f64).round() as usize;
    if total == 0 || total == data.len() {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} samples leaves one side empty",
            data.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for p in 0..data.len() {
        by_class[data.label(p)].push(p);
    }
    // Largest-remainder apportionment of `total` across classes.
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|v| (fraction * v.len() as f64).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..data.num_classes).collect();
    let remainder = |c: usize| fraction * by_class[c].len() as f64 - quota[c] as f64;
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)).then(a.cmp(&b)));
    let mut missing = total - quota.iter().sum::<usize>();
    for &c in &order {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut shuffle = rng::stream(seed, "split");
    let mut first = Vec::with_capacity(total);
    let mut second = Vec::with_capacity(data.len() - total);
    for (c, positions) in by_class.iter_mut().enumerate() {
        positions.shuffle(&mut shuffle);
        first.extend_from_slice(&positions[..quota[c]]);
        second.extend_from_slice(&positions[quota[c]..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((
        data.subset(format!("{}/source", data.id), &first),
        data.subset(format!("{}/surrogate", data.id), &second),
    ))
}

const DATASET_MAGIC: &[u8; 8] = b"MVMKDATA";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    id: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    len: usize,
}

/// Binary dataset file: magic, u32 header length, JSON header, then per
/// sample a u64 id, u32 label and the f32 inputs (all little-endian).
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&DatasetHeader {
        id: data.id.clone(),
        input_shape: data.input_shape.clone(),
        num_classes: data.num_classes,
        len: data.len(),
    })
    .map_err(|e| Error::persistence(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + data.inputs.len() * 4 + data.len() * 12);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in 0..data.len() {
        buf.extend_from_slice(&data.ids[p].to_le_bytes());
        buf.extend_from_slice(&(data.labels[p] as u32).to_le_bytes());
        for v in data.input(p) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::persistence(path, m.to_string());
    if bytes.len() < 12 || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("not a dataset file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: DatasetHeader = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)
        .map_err(|e| bad(&e.to_string()))?;
    let d: usize = header.input_shape.iter().product();
    let record = 12 + 4 * d;
    let body = &bytes[12 + hlen..];
    if body.len() != record * header.len {
        return Err(bad("sample block has the wrong length"));
    }
    let mut ids = Vec::with_capacity(header.len);
    let mut labels = Vec::with_capacity(header.len);
    let mut inputs = Vec::with_capacity(header.len * d);
    for rec in body.chunks_exact(record) {
        ids.push(u64::from_le_bytes(rec[..8].try_into().unwrap()));
        labels.push(u32::from_le_bytes(rec[8..12].try_into().unwrap()) as usize);
        inputs.extend(rec[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
    }
    Dataset::new(header.id, header.input_shape, header.num_classes, ids, inputs, labels)
}

/// Reads a CSV file whose rows are `label,x_0,x_1,...`.
pub fn load_csv(path: &Path, id: &str, input_shape: Vec<usize>, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_label_first_csv(&text, id, input_shape, num_classes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse_label_first_csv(text: &str, id: &str, input_shape: Vec<usize>, num_classes: usize) -> Result<Dataset> {
    let d: usize = input_shape.iter().product();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad label", lineno + 1)))?;
        let before = inputs.len();
        for f in fields {
            inputs.push(
                f.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::Data(format!("line {}: bad value `{f}`", lineno + 1)))?,
            );
        }
        if inputs.len() - before != d {
            return Err(Error::Data(format!(
                "line {}: expected {d} values, got {}",
                lineno + 1,
                inputs.len() - before
            )));
        }
        labels.push(label);
    }
    Dataset::from_rows(id, input_shape, num_classes, inputs, labels)
}

/// The 8x8 handwritten digits set (1797 samples, 10 classes, pixel values
/// 0..16 rescaled to [0, 1]) as distributed with scikit-learn.
pub mod digits {
    use super::*;
    use flate2::read::GzDecoder;
    use sha2::{Digest, Sha256};
    use std::path::PathBuf;

    pub const FILE_NAME: &str = "digits.csv.gz";
    pub const URL: &str =
        "https://raw.githubusercontent.com/scikit-learn/scikit-learn/1.7.2/sklearn/datasets/data/digits.csv.gz";
    pub const SHA256: &str = "09f66e6debdee2cd2b5ae59e0d6abbb73fc2b0e0185d2e1957e9ebb51e23aa22";
    /// Environment variable naming the dataset cache directory.
    pub const CACHE_ENV: &str = "MVMARK_DATA_DIR";

    pub fn cache_dir() -> PathBuf {
        std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".mvmark-data"))
    }

    /// Loads the cached archive, verifying its checksum. With the `download`
    /// feature a missing archive is fetched first.
    pub fn load(cache: &Path) -> Result<Dataset> {
        let path = cache.join(FILE_NAME);
        if !path.exists() {
            fetch(&path)?;
        }
        let bytes = fs::read(&path)?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != SHA256 {
            return Err(Error::persistence(
                &path,
                format!("checksum mismatch: expected {SHA256}, found {digest}"),
            ));
        }
        parse(&bytes)
    }

    pub fn parse(gz: &[u8]) -> Result<Dataset> {
        let mut text = String::new();
        GzDecoder::new(gz)
            .read_to_string(&mut text)
            .map_err(|e| Error::Data(format!("digits archive: {e}")))?;
        let mut inputs = Vec::with_capacity(1797 * 64);
        let mut labels = Vec::with_capacity(1797);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let values: Vec<f32> = line
                .split(',')
                .map(|f| f.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("digits archive: {e}")))?;
            if values.len() != 65 {
                return Err(Error::Data("digits rows must have 64 pixels and a label".into()));
            }
            inputs.extend(values[..64].iter().map(|v| v / 16.0));
            labels.push(values[64] as usize);
        }
        Dataset::from_rows("digits", vec![1, 8, 8], 10, inputs, labels)
    }

    #[cfg(feature = "download")]
    fn fetch(path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        log::info!("downloading {URL}");
        let mut body = ureq::get(URL)
            .call()
            .map_err(|e| Error::persistence(path, format!("download failed: {e}")))?
            .into_body();
        let bytes = body
            .read_to_vec()
            .map_err(|e| Error::persistence(path, format!("download failed: {e}")))?;
        fs::write(path, bytes)?;
        Ok(())
    }

    #[cfg(not(feature = "download"))]
    fn fetch(path: &Path) -> Result<()> {
        Err(Error::persistence(
            path,
            format!("dataset not cached; place {FILE_NAME} there or build with the `download` feature"),
        ))
    }
}
