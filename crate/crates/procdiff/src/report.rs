//! Report rendering: comparison CSV across runs, per-category CSV, and
//! simple SVG bar charts (rectangles and text, no display server, no
//! plotting dependency).

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::evaluation::EvalReport;

/// Comparison table: one row per run, metrics as columns. Extras appear as
/// additional columns, union over runs, sorted by name.
pub fn comparison_csv(runs: &[(String, EvalReport)]) -> String {
    let extra_keys: BTreeSet<&str> = runs
        .iter()
        .flat_map(|(_, r)| r.extras.keys().map(|k| k.as_str()))
        .collect();
    let mut out = String::from("run,task,split,mode,examples,top1");
    for k in &extra_keys {
        write!(out, ",{k}").unwrap();
    }
    out.push('\n');
    for (name, report) in runs {
        write!(
            out,
            "{},{},{},{},{},{}",
            csv_escape(name),
            report.task,
            report.split,
            report.mode,
            report.examples,
            report.top1
        )
        .unwrap();
        for k in &extra_keys {
            match report.extras.get(*k) {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-category accuracy table for one report.
pub fn per_category_csv(report: &EvalReport) -> String {
    let mut out = String::from("category,count,accuracy\n");
    for (id, stat) in &report.per_category {
        writeln!(out, "{id},{},{}", stat.count, stat.accuracy).unwrap();
    }
    out
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const BAR_W: usize = 18;
const BAR_GAP: usize = 6;
const CHART_H: usize = 220;
const AXIS_H: usize = 40;
const MARGIN: usize = 30;

/// Bar chart of labelled values in `[0, 1]`.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let width = MARGIN * 2 + bars.len() * (BAR_W + BAR_GAP);
    let height = CHART_H + AXIS_H + 30;
    let mut out = String::new();
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">"
    )
    .unwrap();
    write!(
        out,
        "<text x=\"{MARGIN}\" y=\"18\" font-family=\"monospace\" font-size=\"13\">{}</text>",
        xml_escape(title)
    )
    .unwrap();
    // baseline
    write!(
        out,
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#444\"/>",
        CHART_H + 30,
        width - MARGIN,
        CHART_H + 30
    )
    .unwrap();
    for (i, (label, value)) in bars.iter().enumerate() {
        let clamped = value.clamp(0.0, 1.0);
        let h = (clamped * CHART_H as f64).round() as usize;
        let x = MARGIN + i * (BAR_W + BAR_GAP);
        let y = CHART_H + 30 - h;
        write!(
            out,
            "<rect x=\"{x}\" y=\"{y}\" width=\"{BAR_W}\" height=\"{h}\" fill=\"#4878a8\"/>"
        )
        .unwrap();
        write!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"9\" \
             text-anchor=\"middle\">{}</text>",
            x + BAR_W / 2,
            CHART_H + 42,
            xml_escape(label)
        )
        .unwrap();
        write!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"8\" \
             text-anchor=\"middle\">{:.2}</text>",
            x + BAR_W / 2,
            y.saturating_sub(2).max(26),
            clamped
        )
        .unwrap();
    }
    out.push_str("</svg>");
    out
}

/// Per-category accuracy chart for one report.
pub fn per_category_svg(report: &EvalReport) -> String {
    let bars: Vec<(String, f64)> = report
        .per_category
        .iter()
        .map(|(id, stat)| (id.clone(), stat.accuracy))
        .collect();
    bar_chart_svg(
        &format!("{} {} per-category accuracy", report.task, report.mode),
        &bars,
    )
}

/// Run-comparison chart over top-1 accuracy.
pub fn comparison_svg(runs: &[(String, EvalReport)]) -> String {
    let bars: Vec<(String, f64)> =
        runs.iter().map(|(name, r)| (name.clone(), r.top1)).collect();
    bar_chart_svg("top-1 accuracy by run", &bars)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
