//! Static HTML report assembled from the artifacts under a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use depth_dissect_core::dissect::SelectivityReport;
use depth_dissect_core::eval::AblationCurve;
use walkdir::WalkDir;

use crate::artifacts::{AttackArtifact, CorrectionArtifact, EvalArtifact, ATTACK, METRICS};
use crate::error::{read_json, Error, Result};
use crate::export::{ablation_svg, escape, profiles_svg};

pub const INDEX: &str = "index.html";
const PROFILE_UNITS: usize = 16;

#[derive(Default)]
struct Found {
    metrics: Vec<(String, EvalArtifact)>,
    selectivity: Vec<(String, SelectivityReport)>,
    ablation: Vec<(String, Vec<AblationCurve>)>,
    correction: Vec<(String, CorrectionArtifact)>,
    attack: Vec<(String, AttackArtifact)>,
}

impl Found {
    fn is_empty(&self) -> bool {
        self.metrics.is_empty()
            && self.selectivity.is_empty()
            && self.ablation.is_empty()
            && self.correction.is_empty()
            && self.attack.is_empty()
    }
}

fn scan(run: &Path, skip: &Path) -> Result<Found> {
    let mut found = Found::default();
    for entry in WalkDir::new(run).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::format(run, e.to_string()))?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.starts_with(skip) {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        let rel = path.strip_prefix(run).unwrap_or(path).display().to_string();
        if name == METRICS {
            found.metrics.push((rel, read_json(path)?));
        } else if name == ATTACK {
            found.attack.push((rel, read_json(path)?));
        } else if name.starts_with("selectivity_") && name.ends_with(".json") {
            found.selectivity.push((rel, read_json(path)?));
        } else if name.starts_with("ablation_") && name.ends_with(".json") {
            found.ablation.push((rel, read_json(path)?));
        } else if name.starts_with("correction_") && name.ends_with(".json") {
            found.correction.push((rel, read_json(path)?));
        }
    }
    Ok(found)
}

fn slug(rel: &str) -> String {
    rel.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Render `index.html` plus one SVG per chart into `out`. Returns written files.
pub fn render_report(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    if !run.is_dir() {
        return Err(Error::format(run, "run directory does not exist"));
    }
    let found = scan(run, out)?;
    if found.is_empty() {
        return Err(Error::format(run, "no run artifacts found"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut save = |name: String, body: &str| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };

    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>depth-dissect report</title>\n\
         <style>body{font-family:sans-serif;margin:2em}table{border-collapse:collapse}\
         td,th{border:1px solid #bbb;padding:3px 8px;text-align:right}</style></head><body>\n\
         <h1>depth-dissect report</h1>\n",
    );
    if !found.metrics.is_empty() {
        html.push_str("<h2>Metrics</h2>\n<table><tr><th>source</th><th>δ<sub>1</sub></th><th>δ<sub>2</sub></th><th>δ<sub>3</sub></th><th>RMS</th><th>REL</th><th>log10</th></tr>\n");
        for (rel, m) in &found.metrics {
            let x = &m.metrics;
            let _ = writeln!(
                html,
                "<tr><td>{}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td></tr>",
                escape(rel),
                x.delta1,
                x.delta2,
                x.delta3,
                x.rms,
                x.rel,
                x.log10
            );
        }
        html.push_str("</table>\n");
    }
    if !found.correction.is_empty() {
        html.push_str("<h2>Correction</h2>\n<table><tr><th>source</th><th>layer</th><th>δ<sub>1</sub> before</th><th>δ<sub>1</sub> after</th><th>RMS before</th><th>RMS after</th></tr>\n");
        for (rel, c) in &found.correction {
            let (b, a) = (&c.result.before, &c.result.after);
            let _ = writeln!(
                html,
                "<tr><td>{}</td><td>{}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td></tr>",
                escape(rel),
                escape(&c.layer),
                b.delta1,
                a.delta1,
                b.rms,
                a.rms
            );
        }
        html.push_str("</table>\n");
    }
    if !found.attack.is_empty() {
        html.push_str("<h2>Adversarial attack</h2>\n<table><tr><th>source</th><th>ε</th><th>δ<sub>1</sub> clean</th><th>δ<sub>1</sub> attacked</th><th>IoU assigned</th><th>IoU control</th></tr>\n");
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        for (rel, a) in &found.attack {
            let _ = writeln!(
                html,
                "<tr><td>{}</td><td>{}</td><td>{:.4}</td><td>{:.4}</td><td>{}</td><td>{}</td></tr>",
                escape(rel),
                a.epsilon,
                a.clean.delta1,
                a.adversarial.delta1,
                fmt(a.mean_iou),
                fmt(a.mean_control_iou)
            );
        }
        html.push_str("</table>\n");
    }
    for (rel, curves) in &found.ablation {
        let svg = ablation_svg(curves);
        let name = format!("{}.svg", slug(rel));
        let _ = writeln!(
            html,
            "<h2>Ablation: {}</h2>\n<p><a href=\"{name}\">{name}</a></p>\n{svg}",
            escape(rel)
        );
        save(name, &svg)?;
    }
    for (rel, report) in &found.selectivity {
        let svg = profiles_svg(report, PROFILE_UNITS);
        let name = format!("{}.svg", slug(rel));
        let _ = writeln!(
            html,
            "<h2>Selectivity: {} (mean DS {:.4}, {} units)</h2>\n<p><a href=\"{name}\">{name}</a></p>\n{svg}",
            escape(rel),
            report.mean_ds,
            report.units.len()
        );
        save(name, &svg)?;
    }
    html.push_str("</body></html>\n");
    save(INDEX.to_string(), &html)?;
    Ok(written)
}
