//! Comparison tables and PSNR-vs-order plots across evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{write, Error, Result};
use crate::eval::{EvalReport, GROUPS};

const HEADERS: [&str; 10] = [
    "Seen Single",
    "Seen Double",
    "Seen Triple",
    "Overall Seen",
    "Unseen Double",
    "Unseen Triple",
    "Unseen Quad",
    "Overall Unseen",
    "All 43",
    "Quad",
];

/// One table row: a label and `(psnr, ssim)` per group.
struct Row {
    label: String,
    cells: Vec<(f64, f64)>,
}

fn rows(reports: &[EvalReport]) -> Vec<Row> {
    let mut out = Vec::with_capacity(reports.len() + 1);
    let first = &reports[0];
    out.push(Row {
        label: "Input".into(),
        cells: GROUPS.iter().map(|g| first.group(g).map_or((f64::NAN, f64::NAN), |r| (r.input_psnr, r.input_ssim))).collect(),
    });
    for r in reports {
        let mut label = r.name.clone();
        if r.partial {
            label.push_str(" (partial)");
        }
        out.push(Row {
            label,
            cells: GROUPS.iter().map(|g| r.group(g).map_or((f64::NAN, f64::NAN), |x| (x.psnr, x.ssim))).collect(),
        });
    }
    out
}

pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("method");
    for g in GROUPS {
        let _ = write!(s, ",{g}_psnr,{g}_ssim");
    }
    s.push('\n');
    for r in rows(reports) {
        s.push_str(&r.label.replace(',', ";"));
        for (p, q) in &r.cells {
            let _ = write!(s, ",{p:.4},{q:.4}");
        }
        s.push('\n');
    }
    s
}

fn cell(v: (f64, f64)) -> String {
    if v.0.is_nan() {
        "n/a".into()
    } else {
        format!("{:.2} / {:.4}", v.0, v.1)
    }
}

pub fn comparison_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from("# Comparison (PSNR / SSIM on Y)\n\n| Method |");
    for h in HEADERS {
        let _ = write!(s, " {h} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(HEADERS.len()));
    s.push('\n');
    for r in rows(reports) {
        let _ = write!(s, "| {} |", r.label);
        for c in &r.cells {
            let _ = write!(s, " {} |", cell(*c));
        }
        s.push('\n');
    }
    let partial: Vec<&EvalReport> = reports.iter().filter(|r| r.partial).collect();
    for r in partial {
        let _ = writeln!(s, "\n{} is missing: {}", r.name, r.missing.join(", "));
    }
    s
}

/// Mean PSNR per degradation order (1..=4) over the configs of `split`.
pub fn psnr_by_order(r: &EvalReport, split: &str, input: bool) -> [Option<f64>; 4] {
    let mut out = [None; 4];
    for (o, slot) in out.iter_mut().enumerate() {
        let v: Vec<f64> = r
            .configs
            .iter()
            .filter(|c| c.split == split && c.order == o + 1)
            .map(|c| if input { c.input_psnr } else { c.psnr })
            .collect();
        if !v.is_empty() {
            *slot = Some(v.iter().sum::<f64>() / v.len() as f64);
        }
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Line plot of PSNR against degradation order; solid lines are seen
/// configs, dashed lines unseen, grey the degraded input.
pub fn order_plot_svg(reports: &[EvalReport]) -> String {
    let mut series: Vec<(String, String, bool, [Option<f64>; 4])> = Vec::new();
    for split in ["seen", "unseen"] {
        series.push((format!("input ({split})"), "#888888".into(), split == "unseen", psnr_by_order(&reports[0], split, true)));
    }
    for (i, r) in reports.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()].to_string();
        for split in ["seen", "unseen"] {
            series.push((format!("{} ({split})", r.name), color.clone(), split == "unseen", psnr_by_order(r, split, false)));
        }
    }
    let values: Vec<f64> = series.iter().flat_map(|s| s.3.iter().flatten().copied()).collect();
    let (mut lo, mut hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    lo = (lo - 1.0).floor();
    hi = (hi + 1.0).ceil();
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 220.0, 30.0, 50.0);
    let px = |o: usize| left + (o as f64) / 3.0 * (w - left - right);
    let py = |v: f64| top + (hi - v) / (hi - lo) * (h - top - bottom);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">PSNR-Y vs degradation order</text>", (left + w - right) / 2.0);
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>",
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    for o in 0..4 {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", px(o), h - bottom + 18.0, o + 1);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">order</text>", px(0) + (px(3) - px(0)) / 2.0, h - 12.0);
    let step = ((hi - lo) / 6.0).ceil().max(1.0);
    let mut t = lo;
    while t <= hi + 1e-9 {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.0}</text>\n<line x1=\"{left}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#eeeeee\"/>",
            left - 6.0,
            py(t) + 4.0,
            w - right,
            y = py(t)
        );
        t += step;
    }
    let _ = writeln!(s, "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">dB</text>", h / 2.0, h / 2.0);
    for (i, (label, color, dashed, pts)) in series.iter().enumerate() {
        let dash = if *dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let coords: Vec<String> = pts.iter().enumerate().filter_map(|(o, v)| v.map(|v| format!("{:.1},{:.1}", px(o), py(v)))).collect();
        if !coords.is_empty() {
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>", coords.join(" "));
            for c in &coords {
                let (x, y) = c.split_once(',').expect("coordinate pair");
                let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
            }
        }
        let ly = top + 10.0 + 16.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>\n<text x=\"{}\" y=\"{}\">{}</text>",
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `comparison.csv`, `comparison.md` and `psnr_vs_order.svg` into `dir`.
pub fn render(reports: &[EvalReport], dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Invalid("report needs at least one evaluation report".into()));
    }
    write(&dir.join("comparison.csv"), comparison_csv(reports))?;
    write(&dir.join("comparison.md"), comparison_markdown(reports))?;
    write(&dir.join("psnr_vs_order.svg"), order_plot_svg(reports))
}
