//! Standalone SVG bar charts: per-joint errors on the left, per-action
//! errors on the right, with an optional second series for comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub struct Series<'a> {
    pub label: &'a str,
    pub per_joint: &'a [f64],
    pub per_action: &'a BTreeMap<String, f64>,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 2] = ["#4878a8", "#d8843c"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn panel(out: &mut String, x0: f64, title: &str, labels: &[String], values: &[Vec<f64>], names: &[&str]) {
    let max = values.iter().flatten().cloned().fold(0.0f64, f64::max).max(1e-9);
    let top = nice_ceiling(max);
    let (y0, h) = (MARGIN, PANEL_H);
    writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"#, x0 + PANEL_W / 2.0, y0 - 20.0, escape(title)).unwrap();
    writeln!(out, r#"<line x1="{x0:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, y0 + h, x0 + PANEL_W, y0 + h).unwrap();
    writeln!(out, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{:.1}" stroke="black"/>"#, y0 + h).unwrap();
    for k in 0..=4 {
        let v = top * k as f64 / 4.0;
        let y = y0 + h - h * k as f64 / 4.0;
        writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.0}</text>"#, x0 - 4.0, y + 3.0).unwrap();
        if k > 0 {
            writeln!(out, r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, x0 + PANEL_W).unwrap();
        }
    }
    let slot = PANEL_W / labels.len().max(1) as f64;
    let bar = slot * 0.8 / values.len().max(1) as f64;
    for (i, label) in labels.iter().enumerate() {
        let sx = x0 + slot * i as f64 + slot * 0.1;
        for (s, series) in values.iter().enumerate() {
            let v = series.get(i).copied().unwrap_or(0.0);
            let bh = h * v / top;
            writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar:.1}" height="{bh:.1}" fill="{}"><title>{}: {v:.1} mm</title></rect>"#,
                sx + bar * s as f64,
                y0 + h - bh,
                COLORS[s % COLORS.len()],
                escape(names[s])
            )
            .unwrap();
        }
        let lx = sx + slot * 0.4;
        let ly = y0 + h + 8.0;
        writeln!(
            out,
            r#"<text x="{lx:.1}" y="{ly:.1}" font-size="9" text-anchor="end" transform="rotate(-60 {lx:.1} {ly:.1})">{}</text>"#,
            escape(label)
        )
        .unwrap();
    }
    writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" transform="rotate(-90 {:.1} {:.1})" text-anchor="middle">MPJPE (mm)</text>"#, x0 - 34.0, y0 + h / 2.0, x0 - 34.0, y0 + h / 2.0).unwrap();
}

/// Rounds up to 1, 2 or 5 times a power of ten.
fn nice_ceiling(v: f64) -> f64 {
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * p).find(|&c| c >= v).unwrap_or(10.0 * p)
}

pub fn error_chart(joint_names: &[&str], series: &[Series<'_>], config_json: &str) -> String {
    let width = 2.0 * PANEL_W + 3.0 * MARGIN + 20.0;
    let height = PANEL_H + 2.0 * MARGIN + 90.0;
    let mut out = String::new();
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif">"#).unwrap();
    writeln!(out, "<metadata>{}</metadata>", escape(config_json)).unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let names: Vec<&str> = series.iter().map(|s| s.label).collect();

    let joints: Vec<String> = joint_names.iter().map(|s| s.to_string()).collect();
    let joint_values: Vec<Vec<f64>> = series.iter().map(|s| s.per_joint.to_vec()).collect();
    panel(&mut out, MARGIN, "Error per joint", &joints, &joint_values, &names);

    let mut actions: Vec<String> = series.iter().flat_map(|s| s.per_action.keys().cloned()).collect();
    actions.sort();
    actions.dedup();
    let action_values: Vec<Vec<f64>> =
        series.iter().map(|s| actions.iter().map(|a| s.per_action.get(a).copied().unwrap_or(0.0)).collect()).collect();
    panel(&mut out, 2.0 * MARGIN + PANEL_W + 20.0, "Error per action", &actions, &action_values, &names);

    for (s, name) in names.iter().enumerate() {
        let x = MARGIN + 140.0 * s as f64;
        let y = height - 14.0;
        writeln!(out, r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/>"#, y - 10.0, COLORS[s % COLORS.len()]).unwrap();
        writeln!(out, r#"<text x="{:.1}" y="{y:.1}" font-size="11">{}</text>"#, x + 16.0, escape(name)).unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceilings() {
        assert_eq!(nice_ceiling(37.0), 50.0);
        assert_eq!(nice_ceiling(100.0), 100.0);
        assert_eq!(nice_ceiling(0.13), 0.2);
    }

    #[test]
    fn one_bar_per_value_and_series() {
        let actions = BTreeMap::from([("sit".to_string(), 30.0), ("walk".to_string(), 20.0)]);
        let joints = [10.0, 20.0, 30.0];
        let a = Series { label: "ours", per_joint: &joints, per_action: &actions };
        let b = Series { label: "base<1>", per_joint: &joints, per_action: &actions };
        let svg = error_chart(&["a", "b", "c"], &[a, b], "{}");
        assert_eq!(svg.matches("<rect x=").count(), 2 * (3 + 2) + 2);
        assert!(svg.contains("base&lt;1&gt;"));
        assert!(svg.starts_with("<svg"));
    }
}
