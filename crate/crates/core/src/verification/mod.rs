//! Ownership decision: trigger hits of a suspect against a benign
//! reference, compared with a one-sided Welch t-test.

pub mod stats;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::LogitOracle;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::argmax;
use crate::trigger::{trigger_view, TriggerSet};

pub const DEFAULT_SIGNIFICANCE: f64 = 0.01;

/// Zero-variance situations in which the t statistic is not defined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// Both samples constant with equal means; p is reported as 0.5.
    EqualConstant,
    /// Both samples constant with different means; p is 0 or 1.
    UnequalConstant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p: f64,
    pub degenerate: Option<Degeneracy>,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom, one-sided towards `mean(a) > mean(b)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Verification(format!(
            "t-test needs at least two observations per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("t-test input contains non-finite values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let (t, p, kind) = if ma == mb {
            (0.0, 0.5, Degeneracy::EqualConstant)
        } else if ma > mb {
            (f64::INFINITY, 0.0, Degeneracy::UnequalConstant)
        } else {
            (f64::NEG_INFINITY, 1.0, Degeneracy::UnequalConstant)
        };
        return Ok(TTest {
            t,
            df: f64::NAN,
            p,
            degenerate: Some(kind),
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p = stats::student_t_sf(t, df).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        df,
        p,
        degenerate: None,
    })
}

/// Entry `k` is true iff the model's argmax on trigger sample `k` equals
/// its assigned label.
pub fn hit_indicators(model: &dyn LogitOracle, trigger: &TriggerSet, data: &Dataset) -> Result<Vec<bool>> {
    let view = trigger_view(data, trigger)?;
    if view.input_len() != model.input_len() {
        return Err(Error::Input("trigger samples do not match the model's input shape".into()));
    }
    let mut hits = Vec::with_capacity(view.len());
    let d = view.input_len().max(1);
    let mut start = 0;
    for chunk in view.inputs().chunks(256 * d) {
        let logits = model.query_logits(chunk)?;
        for (i, row) in logits.iter_rows().enumerate() {
            hits.push(argmax(row) == view.label(start + i));
        }
        start += logits.rows();
    }
    Ok(hits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub q: usize,
    pub suspect_trigger_acc: f64,
    pub benign_trigger_acc: f64,
    pub suspect_hits: Vec<bool>,
    pub benign_hits: Vec<bool>,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub significance: f64,
    pub degenerate: Option<Degeneracy>,
    pub owned: bool,
}

fn rate(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Runs the ownership test on precomputed hit vectors.
pub fn decide(suspect_hits: Vec<bool>, benign_hits: Vec<bool>, significance: f64) -> Result<VerificationReport> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::Config(format!("significance {significance} must lie in (0, 1)")));
    }
    if suspect_hits.len() < 2 || benign_hits.len() < 2 {
        return Err(Error::Verification(format!(
            "verification needs at least 2 trigger samples, got {}",
            suspect_hits.len().min(benign_hits.len())
        )));
    }
    let as_f = |h: &[bool]| h.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let test = welch_t_test(&as_f(&suspect_hits), &as_f(&benign_hits))?;
    let suspect_trigger_acc = rate(&suspect_hits);
    let benign_trigger_acc = rate(&benign_hits);
    Ok(VerificationReport {
        q: suspect_hits.len(),
        suspect_trigger_acc,
        benign_trigger_acc,
        suspect_hits,
        benign_hits,
        t_statistic: test.t,
        degrees_of_freedom: test.df,
        p_value: test.p,
        significance,
        degenerate: test.degenerate,
        owned: test.p < significance && suspect_trigger_acc > benign_trigger_acc,
    })
}

/// Compares the suspect's and the benign model's trigger-set behaviour.
/// Both models are accessed through logit queries only.
pub fn verify_ownership(
    suspect: &dyn LogitOracle,
    benign: &dyn LogitOracle,
    trigger: &TriggerSet,
    data: &Dataset,
    significance: f64,
) -> Result<VerificationReport> {
    if trigger.len() < 2 {
        return Err(Error::Verification(format!(
            "verification needs at least 2 trigger samples, got {}",
            trigger.len()
        )));
    }
    let s = hit_indicators(suspect, trigger, data)?;
    let b = hit_indicators(benign, trigger, data)?;
    decide(s, b, significance)
}

/// On-disk form. Field order is fixed by declaration order.
#[derive(Serialize, Deserialize)]
struct ReportFile {
    owned: bool,
    p_value: f64,
    significance: f64,
    t_statistic: f64,
    degrees_of_freedom: f64,
    degenerate: String,
    q: usize,
    suspect_trigger_acc: f64,
    benign_trigger_acc: f64,
    suspect_hits: String,
    benign_hits: String,
}

fn bits(h: &[bool]) -> String {
    h.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn unbits(s: &str) -> std::result::Result<Vec<bool>, String> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(format!("invalid hit character `{c}`")),
        })
        .collect()
}

impl VerificationReport {
    pub fn to_toml(&self) -> String {
        let file = ReportFile {
            owned: self.owned,
            p_value: self.p_value,
            significance: self.significance,
            t_statistic: self.t_statistic,
            degrees_of_freedom: self.degrees_of_freedom,
            degenerate: match self.degenerate {
                None => "none",
                Some(Degeneracy::EqualConstant) => "equal_constant",
                Some(Degeneracy::UnequalConstant) => "unequal_constant",
            }
            .into(),
            q: self.q,
            suspect_trigger_acc: self.suspect_trigger_acc,
            benign_trigger_acc: self.benign_trigger_acc,
            suspect_hits: bits(&self.suspect_hits),
            benign_hits: bits(&self.benign_hits),
        };
        toml::to_string(&file).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let f: ReportFile = toml::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        let degenerate = match f.degenerate.as_str() {
            "none" => None,
            "equal_constant" => Some(Degeneracy::EqualConstant),
            "unequal_constant" => Some(Degeneracy::UnequalConstant),
            other => return Err(Error::Report(format!("unknown degeneracy `{other}`"))),
        };
        Ok(VerificationReport {
            q: f.q,
            suspect_trigger_acc: f.suspect_trigger_acc,
            benign_trigger_acc: f.benign_trigger_acc,
            suspect_hits: unbits(&f.suspect_hits).map_err(Error::Report)?,
            benign_hits: unbits(&f.benign_hits).map_err(Error::Report)?,
            t_statistic: f.t_statistic,
            degrees_of_freedom: f.degrees_of_freedom,
            p_value: f.p_value,
            significance: f.significance,
            degenerate,
            owned: f.owned,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_toml()).map_err(|e| Error::persistence(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::persistence(path, e.to_string()))?;
        Self::from_toml(&text)
    }
}
