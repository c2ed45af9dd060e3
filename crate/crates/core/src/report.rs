//! Accuracy-versus-budget plots and tables rendered from evaluation CSVs.
//! Everything here is a pure function of the parsed rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::robustness::{AttackObjective, ACCURACY_CSV_HEADER};

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyPoint {
    pub label: String,
    pub objective: AttackObjective,
    pub delta: f64,
    pub accuracy: f64,
    pub failures: usize,
}

/// Parses an accuracy CSV; returns the manifest hashes found in comment lines
/// alongside the rows.
pub fn parse_accuracy_csv(text: &str) -> Result<(Vec<String>, Vec<AccuracyPoint>)> {
    let mut manifests = Vec::new();
    let mut points = Vec::new();
    let mut header_seen = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(h) = rest.trim().strip_prefix("manifest ") {
                manifests.push(h.trim().to_string());
            }
            continue;
        }
        if line == ACCURACY_CSV_HEADER {
            header_seen = true;
            continue;
        }
        if !header_seen {
            return Err(Error::InvalidParameter(format!(
                "line {}: expected header {ACCURACY_CSV_HEADER:?}",
                lineno + 1
            )));
        }
        let bad = |what: &str| Error::InvalidParameter(format!("line {}: bad {what}", lineno + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("field count"));
        }
        let accuracy: f64 = f[3].parse().map_err(|_| bad("accuracy"))?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(bad("accuracy"));
        }
        points.push(AccuracyPoint {
            label: f[0].to_string(),
            objective: f[1].parse()?,
            delta: f[2].parse().map_err(|_| bad("delta"))?,
            accuracy,
            failures: f[4].parse().map_err(|_| bad("failures"))?,
        });
    }
    Ok((manifests, points))
}

fn series(points: &[AccuracyPoint], objective: AttackObjective) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.objective == objective) {
        out.entry(p.label.clone()).or_default().push((p.delta, p.accuracy));
    }
    for s in out.values_mut() {
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per label: δ on the horizontal axis, accuracy on the vertical.
pub fn render_svg(points: &[AccuracyPoint], objective: AttackObjective) -> String {
    let data = series(points, objective);
    let max_delta = points
        .iter()
        .filter(|p| p.objective == objective)
        .map(|p| p.delta)
        .fold(0.0, f64::max);
    let x_max = if max_delta > 0.0 { max_delta } else { 1.0 };
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |d: f64| MARGIN_LEFT + d / x_max * plot_w;
    let sy = |a: f64| MARGIN_TOP + (1.0 - a) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="13">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">Accuracy under {} attack</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        objective.name().to_uppercase()
    );
    for k in 0..=5 {
        let a = k as f64 / 5.0;
        let y = sy(a);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e0e0e0"/><text x="{:.1}" y="{:.1}" text-anchor="end">{a:.1}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 8.0,
            y + 4.0
        );
    }
    for k in 0..=4 {
        let d = x_max * k as f64 / 4.0;
        let x = sx(d);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{d:.3}</text>"##,
            MARGIN_TOP + plot_h,
            MARGIN_TOP + plot_h + 5.0,
            MARGIN_TOP + plot_h + 20.0
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Attack budget δ</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">Classification accuracy</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );
    for (i, (label, pts)) in data.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(d, a)| format!("{:.1},{:.1}", sx(d), sy(a))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for &(d, a) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(d),
                sy(a)
            );
        }
        let ly = MARGIN_TOP + 10.0 + 22.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Markdown table with one row per label and one column per `(objective, δ)`.
pub fn markdown_table(points: &[AccuracyPoint]) -> String {
    let mut columns: Vec<(AttackObjective, f64)> = Vec::new();
    for p in points {
        if !columns.iter().any(|&(o, d)| o == p.objective && d == p.delta) {
            columns.push((p.objective, p.delta));
        }
    }
    columns.sort_by(|a, b| a.0.name().cmp(b.0.name()).then(a.1.total_cmp(&b.1)));
    let mut labels: Vec<&str> = Vec::new();
    for p in points {
        if !labels.contains(&p.label.as_str()) {
            labels.push(&p.label);
        }
    }
    let mut s = String::from("| model |");
    for (o, d) in &columns {
        let _ = write!(s, " {o} δ={d} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(columns.len()));
    s.push('\n');
    for label in labels {
        let _ = write!(s, "| {label} |");
        for &(o, d) in &columns {
            match points
                .iter()
                .find(|p| p.label == label && p.objective == o && p.delta == d)
            {
                Some(p) => {
                    let _ = write!(s, " {:.2}", 100.0 * p.accuracy);
                    if p.failures > 0 {
                        let _ = write!(s, " ({} failed)", p.failures);
                    }
                    s.push_str(" |");
                }
                None => s.push_str(" – |"),
            }
        }
        s.push('\n');
    }
    s
}
