//! CSV tables and standalone SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use depth_dissect_core::dissect::{ResponseTable, SelectivityReport};
use depth_dissect_core::eval::{AblationCurve, AblationOrder};
use depth_dissect_core::train::EpochLog;

use crate::error::{Error, Result};

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn training_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in log {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

pub fn selectivity_csv(path: &Path, report: &SelectivityReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "unit",
        "ds",
        "argmax_bin",
        "assigned_bin",
        "max_abs",
        "mean_other_abs",
    ])
    .map_err(|e| csv_err(path, e))?;
    for u in &report.units {
        let assigned = u.assigned_bin.map(|b| b.to_string()).unwrap_or_default();
        w.write_record([
            u.unit.to_string(),
            u.ds.to_string(),
            u.argmax_bin.to_string(),
            assigned,
            u.max_abs.to_string(),
            u.mean_other_abs.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

/// Long format: one row per (unit, bin); empty response where the bin never occurred.
pub fn responses_csv(path: &Path, table: &ResponseTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["unit", "bin", "response", "pixels"])
        .map_err(|e| csv_err(path, e))?;
    for k in 0..table.n_units {
        for d in 0..table.n_bins {
            let r = table
                .response(k, d)
                .map(|r| r.to_string())
                .unwrap_or_default();
            w.write_record([k.to_string(), d.to_string(), r, table.counts[d].to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    finish(path, w)
}

pub fn ablation_csv(path: &Path, curves: &[AblationCurve]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["order", "ablated", "last_unit", "delta1"])
        .map_err(|e| csv_err(path, e))?;
    for c in curves {
        for s in &c.steps {
            let last = if s.ablated == 0 {
                String::new()
            } else {
                c.units[s.ablated - 1].to_string()
            };
            w.write_record([
                order_name(c.order).to_string(),
                s.ablated.to_string(),
                last,
                s.delta1.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    finish(path, w)
}

pub fn order_name(order: AblationOrder) -> &'static str {
    match order {
        AblationOrder::Descending => "descending",
        AblationOrder::Ascending => "ascending",
    }
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 2] = ["#c0392b", "#2471a3"];

/// Ablation curves of one layer, all orders overlaid: δ₁ against units removed.
pub fn ablation_svg(curves: &[AblationCurve]) -> String {
    let (w, h, m) = (480.0, 300.0, 44.0);
    let steps = curves
        .iter()
        .map(|c| c.steps.len())
        .max()
        .unwrap_or(1)
        .max(2)
        - 1;
    let x = |i: usize| m + (w - 1.5 * m) * i as f64 / steps as f64;
    let y = |v: f64| h - m - (h - 1.6 * m) * v.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let layer = curves.first().map(|c| c.layer.as_str()).unwrap_or("");
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle">ablation of {}</text>"#,
        w / 2.0,
        escape(layer)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m} {top} V{bottom} H{right}" stroke="black" fill="none"/>"#,
        top = y(1.0),
        bottom = y(0.0),
        right = x(steps)
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{t:.2}</text>"#,
            m - 4.0,
            y(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">units ablated (of {steps})</text>"#,
        w / 2.0,
        h - 8.0
    );
    for (i, c) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .steps
            .iter()
            .map(|st| format!("{:.1},{:.1}", x(st.ablated), y(st.delta1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = 34.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{colour}" text-anchor="end">{}</text>"#,
            w - 12.0,
            order_name(c.order)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Per-unit response profiles as a grid of bar charts, most selective first.
pub fn profiles_svg(report: &SelectivityReport, max_units: usize) -> String {
    let order = report.order_by_ds(true);
    let shown: Vec<_> = order.iter().take(max_units).collect();
    let cols = 4usize;
    let rows = shown.len().div_ceil(cols).max(1);
    let (cw, ch) = (200.0, 90.0);
    let (w, h) = (cw * cols as f64, ch * rows as f64 + 24.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="8" y="15" font-size="12">{} ({} split), mean DS {:.3}</text>"#,
        escape(&report.layer),
        escape(&report.split),
        report.mean_ds
    );
    for (i, &&unit) in shown.iter().enumerate() {
        let Some(u) = report.units.iter().find(|u| u.unit == unit) else {
            continue;
        };
        let (ox, oy) = ((i % cols) as f64 * cw, 24.0 + (i / cols) as f64 * ch);
        let peak = u
            .responses
            .iter()
            .flatten()
            .fold(0.0f64, |a, r| a.max(r.abs()));
        let bw = (cw - 16.0) / u.responses.len().max(1) as f64;
        let base = oy + ch - 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">unit {} DS {:.2} peak bin {}</text>"#,
            ox + 8.0,
            oy + 10.0,
            u.unit,
            u.ds,
            u.argmax_bin
        );
        for (d, r) in u.responses.iter().enumerate() {
            let Some(r) = r else { continue };
            let bh = if peak > 0.0 {
                (ch - 30.0) * r.abs() / peak
            } else {
                0.0
            };
            let fill = if Some(d) == u.assigned_bin {
                "#c0392b"
            } else {
                "#566573"
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                ox + 8.0 + d as f64 * bw,
                base - bh,
                bw.max(0.5),
                bh
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
            ox + 8.0,
            ox + cw - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}
