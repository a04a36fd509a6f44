use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::{ArtifactRecord, ArtifactStore, RunManifest, StageStatus};
use super::{eval_path, verify_report_path, ExperimentConfig, Pipeline, SweepParameter, Target};
use crate::error::{Error, Result};

/// Clean test accuracy of one model, written by the stage that produced or
/// verified it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub role: String,
    pub test_acc: f64,
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub role: String,
    /// Clean accuracy of the watermarked source model.
    pub source_acc: f64,
    /// Clean accuracy of this row's model.
    pub surrogate_acc: f64,
    pub trigger_acc: f64,
    pub p_value: Option<f64>,
    pub owned: Option<bool>,
}

fn required_stages(manifest: &RunManifest) -> Vec<String> {
    let mut need: Vec<String> = ["data", "selector", "trigger", "source", "benign", "verify:source"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    for r in &manifest.stages {
        let name = r.stage.as_str();
        if let Some(attack) = name.strip_prefix("attack:") {
            if seen.insert(attack.to_string()) {
                need.push(name.to_string());
                need.push(format!("verify:{attack}"));
            }
        }
        if name == "independent" && seen.insert("independent".into()) {
            need.push("independent".into());
            need.push("verify:independent".into());
        }
    }
    need
}

/// Suspect models in table order: source, independent, then attacks in
/// the order they were first run.
fn suspects(manifest: &RunManifest) -> Vec<String> {
    let mut out = vec!["source".to_string()];
    let mut attacks = Vec::new();
    for r in manifest.stages.iter().filter(|r| r.status == StageStatus::Ok) {
        if let Some(name) = r.stage.strip_prefix("verify:") {
            if name == "independent" {
                if !out.iter().any(|n| n == "independent") {
                    out.insert(1, name.to_string());
                }
            } else if name != "source" && !attacks.iter().any(|n| n == name) {
                attacks.push(name.to_string());
            }
        }
    }
    out.extend(attacks);
    out
}

/// Table rows, read from the stored stage outputs only.
pub fn collect_rows(manifest: &RunManifest, store: &ArtifactStore) -> Result<Vec<ResultRow>> {
    let missing: Vec<String> = required_stages(manifest)
        .into_iter()
        .filter(|s| manifest.completed(s).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Report(format!("manifest is missing stages: {}", missing.join(", "))));
    }
    let source_eval: EvalRecord = store.load_json(&eval_path("source"))?;
    let benign_eval: EvalRecord = store.load_json(&eval_path("benign"))?;
    let mut rows = Vec::new();
    let mut benign_trigger = None;
    for name in suspects(manifest) {
        let eval: EvalRecord = store.load_json(&eval_path(&name))?;
        let report = store.load_report(&verify_report_path(&name))?;
        benign_trigger.get_or_insert(report.benign_trigger_acc);
        rows.push(ResultRow {
            model: name,
            role: eval.role,
            source_acc: source_eval.test_acc,
            surrogate_acc: eval.test_acc,
            trigger_acc: report.suspect_trigger_acc,
            p_value: Some(report.p_value),
            owned: Some(report.owned),
        });
    }
    rows.insert(
        1,
        ResultRow {
            model: "benign".into(),
            role: benign_eval.role,
            source_acc: source_eval.test_acc,
            surrogate_acc: benign_eval.test_acc,
            trigger_acc: benign_trigger.unwrap_or(f64::NAN),
            p_value: None,
            owned: None,
        },
    );
    Ok(rows)
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("model,role,source_acc,surrogate_acc,trigger_acc,p_value,owned\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{},{}",
            r.model,
            r.role,
            r.source_acc,
            r.surrogate_acc,
            r.trigger_acc,
            r.p_value.map(|p| format!("{p:e}")).unwrap_or_default(),
            r.owned.map(|o| o.to_string()).unwrap_or_default()
        );
    }
    out
}

fn summary_md(rows: &[ResultRow], manifest: &RunManifest) -> String {
    let mut out = String::from("# mvmark run summary\n\n");
    let _ = writeln!(out, "- config hash: `{}`", manifest.config_hash);
    let _ = writeln!(out, "- seed: {}", manifest.seed);
    let _ = writeln!(out, "- tool version: {}\n", manifest.tool_version);
    out.push_str("| Model | Role | Source Acc | Surro. Acc | Trig. Acc | P-Value | Owned |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} | {:.0} | {} | {} |",
            r.model,
            r.role,
            100.0 * r.source_acc,
            100.0 * r.surrogate_acc,
            100.0 * r.trigger_acc,
            r.p_value.map(|p| format!("{p:.1e}")).unwrap_or_else(|| "-".into()),
            r.owned.map(|o| if o { "yes" } else { "no" }).unwrap_or("-")
        );
    }
    // stage timings stay in the manifest so reruns give identical files
    out
}

/// Writes `results.csv` and `summary.md` into the run directory.
pub fn emit_report(manifest: &RunManifest, store: &ArtifactStore) -> Result<Vec<ArtifactRecord>> {
    let rows = collect_rows(manifest, store)?;
    Ok(vec![
        store.write_bytes("results.csv", results_csv(&rows).as_bytes())?,
        store.write_bytes("summary.md", summary_md(&rows, manifest).as_bytes())?,
    ])
}

/// Line plot as a standalone SVG document; one polyline per series.
pub fn render_svg_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 560.0;
    const H: f64 = 360.0;
    const L: f64 = 60.0;
    const R: f64 = 150.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    // y is an accuracy
    let (y0, y1) = (0.0, 1.0);
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#,
        H - B,
        W - R,
        H - B,
        H - B
    );
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            L - 6.0,
            py(v) + 4.0
        );
    }
    let mut ticks: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for v in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{v}</text>"#,
            px(v),
            H - B + 16.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, H - 12.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0,
        esc(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(y));
        }
        let ly = T + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/><text x="{}" y="{}">{}</text>"#,
            W - R + 10.0,
            ly,
            W - R + 24.0,
            ly + 9.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Results of one sweep value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub rows: Vec<ResultRow>,
}

fn value_dir(parameter: SweepParameter, value: f64) -> String {
    format!("sweep/{}-{value}", parameter.name())
}

/// Runs the base config once per sweep value (each in its own
/// subdirectory of `out`), then writes `sweep.csv` and a trigger-accuracy
/// plot with one curve per suspect model.
pub fn run_sweep(config: &ExperimentConfig, out: &Path) -> Result<Vec<SweepPoint>> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
    let mut points = Vec::new();
    for &v in &sweep.values {
        let cfg = config.with_sweep_value(sweep.parameter, v)?;
        let dir = out.join(value_dir(sweep.parameter, v));
        let mut p = Pipeline::open(cfg, &dir)?;
        p.run_until(Target::Report)?;
        points.push(SweepPoint {
            value: v,
            rows: collect_rows(p.manifest(), p.store())?,
        });
    }
    let store = ArtifactStore::open(out)?;
    let mut csv = String::from("parameter,value,model,role,trigger_acc,surrogate_acc,p_value,owned\n");
    for pt in &points {
        for r in &pt.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{:.6},{:.6},{},{}",
                sweep.parameter.name(),
                pt.value,
                r.model,
                r.role,
                r.trigger_acc,
                r.surrogate_acc,
                r.p_value.map(|p| format!("{p:e}")).unwrap_or_default(),
                r.owned.map(|o| o.to_string()).unwrap_or_default()
            );
        }
    }
    store.write_bytes(&format!("sweep-{}.csv", sweep.parameter.name()), csv.as_bytes())?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for pt in &points {
        for r in pt.rows.iter().filter(|r| r.model != "benign") {
            match series.iter_mut().find(|(n, _)| *n == r.model) {
                Some((_, s)) => s.push((pt.value, r.trigger_acc)),
                None => series.push((r.model.clone(), vec![(pt.value, r.trigger_acc)])),
            }
        }
    }
    let svg = render_svg_plot(
        &format!("Trigger accuracy vs {}", sweep.parameter.name()),
        sweep.parameter.name(),
        "trigger accuracy",
        &series,
    );
    store.write_bytes(&format!("plots/trigger_acc_vs_{}.svg", sweep.parameter.name()), svg.as_bytes())?;
    Ok(points)
}
