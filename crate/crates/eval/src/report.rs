use std::fmt::Write;
use std::str::FromStr;

use crate::error::EvalError;
use crate::measure::SweepReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "svg" | "svg-plot" => Ok(Self::Svg),
            _ => Err(EvalError::UnknownFormat(s.to_string())),
        }
    }
}

pub fn render_report(report: &SweepReport, format: ReportFormat) -> Result<String, EvalError> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Csv => Ok(render_csv(report)),
        ReportFormat::Svg => Ok(render_svg(report)),
    }
}

pub fn parse_report(json: &str) -> Result<SweepReport, EvalError> {
    Ok(serde_json::from_str(json)?)
}

fn render_csv(report: &SweepReport) -> String {
    let mut out = String::from("feature,target_bias,n,mean_measured,std_measured\n");
    for f in &report.features {
        for p in &f.points {
            writeln!(out, "{},{},{},{},{}", f.feature, p.target, p.n, p.mean, p.std).expect("write to string");
        }
    }
    out
}

const PANEL_W: f64 = 220.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

/// One panel per feature: target bias on x, measured mean ± std on y, both on [-1, 1].
fn render_svg(report: &SweepReport) -> String {
    let n = report.features.len().max(1) as f64;
    let width = n * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.5 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, f) in report.features.iter().enumerate() {
        let x0 = MARGIN + k as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let px = |v: f64| x0 + (v.clamp(-1.2, 1.2) + 1.2) / 2.4 * PANEL_W;
        let py = |v: f64| y0 + (1.2 - v.clamp(-1.2, 1.2)) / 2.4 * PANEL_H;
        let _ = writeln!(s, r#"<g class="panel" data-feature="{}">"#, f.feature);
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#bbb" stroke-dasharray="4 3"/>"##, px(-1.0), py(-1.0), px(1.0), py(1.0));
        for t in [-1.0, 0.0, 1.0] {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#, px(t), y0 + PANEL_H + 14.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#, x0 - 4.0, py(t) + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-weight="bold">{}</text>"#, x0 + PANEL_W / 2.0, y0 - 8.0, f.feature);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">r = {}, ρ = {}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 + PANEL_H + 30.0,
            fmt_opt(f.pearson_r),
            fmt_opt(f.spearman_rho)
        );
        let pts: Vec<String> = f.points.iter().map(|p| format!("{:.2},{:.2}", px(p.target), py(p.mean))).collect();
        if !pts.is_empty() {
            let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f5fa8"/>"##, pts.join(" "));
        }
        for p in &f.points {
            let (cx, cy) = (px(p.target), py(p.mean));
            let _ = writeln!(s, r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#1f5fa8"/>"##, py(p.mean - p.std), py(p.mean + p.std));
            let _ = writeln!(s, r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="#1f5fa8"/>"##);
        }
        s.push_str("</g>\n");
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">target bias</text>"#, width / 2.0, height - 6.0);
    s.push_str("</svg>\n");
    s
}
