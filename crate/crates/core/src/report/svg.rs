//! Deterministic SVG chart emission. No raster dependencies; layout is
//! fixed so identical inputs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::Result;

use super::pipeline::{AnalysisReport, MetricRow, SurplusRow};

pub const ALL_SVG_FILES: [&str; 5] = [
    "cls_attention.svg",
    "cross_modal_flow.svg",
    "surplus_attention.svg",
    "grounding_accuracy.svg",
    "drop_ve.svg",
];

/// Dot area in the surplus scatter is `DOT_AREA_PER_UNIT * total_attention`.
pub const DOT_AREA_PER_UNIT: f64 = 400.0;

fn svg_open(s: &mut String, w: usize, h: usize, title: &str) {
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"11\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"12\" y=\"18\" font-size=\"13\">{title}</text>");
}

fn heat_color(v: f64) -> String {
    // white -> steel blue ramp
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 - 185.0 * v) as u8;
    let g = (255.0 - 125.0 * v) as u8;
    let b = (255.0 - 75.0 * v) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn selected_layer(report: &AnalysisReport) -> String {
    match report.provenance.layer_mode {
        super::pipeline::LayerMode::Last => (report.provenance.layers - 1).to_string(),
        super::pipeline::LayerMode::All => "all".to_string(),
    }
}

/// Bar chart of head-averaged CLS shares per segment, selected layer.
fn cls_svg(report: &AnalysisReport) -> String {
    let layer = selected_layer(report);
    let rows: Vec<&MetricRow> = report
        .cls
        .iter()
        .filter(|r| r.layer == layer && r.head == "avg")
        .collect();
    let mut s = String::new();
    let (w, h) = (420, 90 + rows.len() * 26);
    svg_open(
        &mut s,
        w,
        h,
        &format!("CLS attention shares (layer {layer}, head avg)"),
    );
    for (i, r) in rows.iter().enumerate() {
        let y = 44 + i * 26;
        let bar = (r.value * 260.0).max(0.0);
        let _ = writeln!(s, "<text x=\"12\" y=\"{}\">{}</text>", y + 12, r.target);
        let _ = writeln!(
            s,
            "<rect x=\"80\" y=\"{y}\" width=\"{bar:.2}\" height=\"16\" fill=\"{}\"/>",
            heat_color(r.value)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\">{:.1}%</text>",
            86.0 + bar,
            y + 12,
            r.value * 100.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Labeled matrix of head-averaged flow percentages, selected layer.
fn flow_svg(report: &AnalysisReport) -> String {
    let layer = selected_layer(report);
    let rows: Vec<&MetricRow> = report
        .flow
        .iter()
        .filter(|r| r.layer == layer && r.head == "avg")
        .collect();
    let mut labels: Vec<String> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.source) {
            labels.push(r.source.clone());
        }
    }
    let cell = 78;
    let (x0, y0) = (96, 56);
    let w = x0 + labels.len() * cell + 24;
    let h = y0 + labels.len() * cell + 24;
    let mut s = String::new();
    svg_open(
        &mut s,
        w,
        h,
        &format!("Cross-modal attention flow % (layer {layer}, head avg)"),
    );
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{l}</text>",
            x0 + i * cell + 8,
            y0 - 10
        );
        let _ = writeln!(s, "<text x=\"12\" y=\"{}\">{l}</text>", y0 + i * cell + 42);
    }
    for r in &rows {
        let si = labels.iter().position(|l| *l == r.source).unwrap();
        let ti = labels.iter().position(|l| *l == r.target).unwrap();
        let (x, y) = (x0 + ti * cell, y0 + si * cell);
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{y}\" width=\"{}\" height=\"{}\" fill=\"{}\" stroke=\"#888\"/>",
            cell - 4,
            cell - 4,
            heat_color(r.value)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{:.1}%</text>",
            x + 14,
            y + 42,
            r.value * 100.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of per-head surplus values; dot area is proportional to the
/// head's total attention on the target encoder.
fn surplus_svg(report: &AnalysisReport) -> String {
    let layer = selected_layer(report);
    let rows: Vec<&SurplusRow> = report
        .surplus
        .iter()
        .filter(|r| r.layer == layer && r.head != "avg")
        .collect();
    let mut pairs: Vec<(String, String)> = Vec::new();
    for r in &rows {
        let key = (r.source.clone(), r.target.clone());
        if !pairs.contains(&key) {
            pairs.push(key);
        }
    }
    let heads = report.provenance.heads;
    let panel_w = 72 + heads * 52;
    let panel_h = 130;
    let w = 40 + panel_w;
    let h = 50 + pairs.len() * panel_h;
    let mut s = String::new();
    svg_open(
        &mut s,
        w,
        h,
        &format!("Surplus attention (layer {layer}); dot area = total attention"),
    );
    for (pi, (src, tgt)) in pairs.iter().enumerate() {
        let top = 44 + pi * panel_h;
        let mid = top + 58;
        let _ = writeln!(s, "<text x=\"12\" y=\"{}\">{src} -&gt; {tgt}</text>", top + 12);
        let _ = writeln!(
            s,
            "<line x1=\"56\" y1=\"{mid}\" x2=\"{}\" y2=\"{mid}\" stroke=\"#bbb\"/>",
            56 + heads * 52
        );
        for r in rows.iter().filter(|r| r.source == *src && r.target == *tgt) {
            let head: usize = r.head.parse().unwrap_or(0);
            let x = 80 + head * 52;
            let y = mid as f64 - r.value * 220.0; // ±0.25 spans the panel
            let radius = (DOT_AREA_PER_UNIT * r.total_attention / std::f64::consts::PI)
                .max(0.0)
                .sqrt();
            let fill = if r.value >= 0.0 { "#2b6cb0" } else { "#c05621" };
            let _ = writeln!(
                s,
                "<circle cx=\"{x}\" cy=\"{y:.2}\" r=\"{radius:.4}\" fill=\"{fill}\" fill-opacity=\"0.7\"/>"
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"9\">h{head} {:+.3}</text>",
                x - 18,
                top + 104,
                r.value
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of grounding accuracy per (layer, head), one panel per encoder.
fn grounding_svg(report: &AnalysisReport) -> String {
    let layers = report.provenance.layers;
    let heads = report.provenance.heads;
    let mut targets: Vec<String> = Vec::new();
    for r in &report.grounding {
        if !targets.contains(&r.target) {
            targets.push(r.target.clone());
        }
    }
    let cell = 46;
    let panel_w = 70 + heads * cell;
    let w = 30 + panel_w * targets.len().max(1);
    let h = 90 + layers * cell;
    let mut s = String::new();
    svg_open(&mut s, w, h, "Visual grounding accuracy per head");
    for (ti, tgt) in targets.iter().enumerate() {
        let ox = 20 + ti * panel_w;
        let _ = writeln!(s, "<text x=\"{}\" y=\"40\">{tgt}</text>", ox + 50);
        for r in report
            .grounding
            .iter()
            .filter(|r| r.target == *tgt && r.layer != "all")
        {
            let (Ok(layer), Ok(head)) = (r.layer.parse::<usize>(), r.head.parse::<usize>())
            else {
                continue;
            };
            let x = ox + 50 + head * cell;
            let y = 52 + layer * cell;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{}\" height=\"{}\" fill=\"{}\" stroke=\"#888\"/>",
                cell - 3,
                cell - 3,
                heat_color(r.value)
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"9\">{:.2}</text>",
                x + 8,
                y + 26,
                r.value
            );
        }
        for l in 0..layers {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"9\">L{l}</text>", ox + 28, 78 + l * cell);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Bars of relative performance decrease per dropped encoder.
fn drop_svg(report: &AnalysisReport) -> String {
    let mut s = String::new();
    let rows = &report.drop;
    let (w, h) = (440, 80 + rows.len().max(1) * 28);
    svg_open(&mut s, w, h, "Relative decrease after dropping an encoder");
    if rows.is_empty() {
        let _ = writeln!(s, "<text x=\"12\" y=\"48\">no drop evaluation in this run</text>");
    }
    for (i, r) in rows.iter().enumerate() {
        let y = 44 + i * 28;
        let bar = (r.value.clamp(-1.0, 1.0) * 200.0).abs();
        let fill = if r.value >= 0.0 { "#c53030" } else { "#2f855a" };
        let _ = writeln!(
            s,
            "<text x=\"12\" y=\"{}\">{} ({})</text>",
            y + 12,
            r.source,
            r.target
        );
        let _ = writeln!(
            s,
            "<rect x=\"170\" y=\"{y}\" width=\"{bar:.2}\" height=\"16\" fill=\"{fill}\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\">{:+.1}%</text>",
            176.0 + bar,
            y + 12,
            r.value * 100.0
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg_files(dir: &Path, report: &AnalysisReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("cls_attention.svg"), cls_svg(report))?;
    fs::write(dir.join("cross_modal_flow.svg"), flow_svg(report))?;
    fs::write(dir.join("surplus_attention.svg"), surplus_svg(report))?;
    fs::write(dir.join("grounding_accuracy.svg"), grounding_svg(report))?;
    fs::write(dir.join("drop_ve.svg"), drop_svg(report))?;
    Ok(())
}
