//! Accuracy-vs-epoch line charts as standalone SVG.

use std::fmt::Write;

use crate::train::RunRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Draws train (solid) and test (dashed) accuracy for each labelled run.
pub fn accuracy_svg(runs: &[(String, RunRecord)]) -> String {
    let max_epoch = runs.iter().flat_map(|(_, r)| r.rows.iter().map(|row| row.epoch)).max().unwrap_or(1).max(1);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x = |epoch: usize| MARGIN + plot_w * epoch as f64 / max_epoch as f64;
    let y = |acc: f64| HEIGHT - MARGIN - plot_h * acc.clamp(0.0, 1.0);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#).unwrap();
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let ty = y(acc);
        writeln!(s, r#"<line x1="{}" y1="{ty}" x2="{x0}" y2="{ty}" stroke="black"/>"#, x0 - 4.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{acc:.1}</text>"#, x0 - 6.0, ty + 4.0).unwrap();
    }
    let step = (max_epoch as f64 / 10.0).ceil().max(1.0) as usize;
    for e in (0..=max_epoch).step_by(step) {
        let tx = x(e);
        writeln!(s, r#"<line x1="{tx}" y1="{y0}" x2="{tx}" y2="{}" stroke="black"/>"#, y0 + 4.0).unwrap();
        writeln!(s, r#"<text x="{tx}" y="{}" text-anchor="middle">{e}</text>"#, y0 + 18.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, WIDTH / 2.0, HEIGHT - 10.0).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">accuracy</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )
    .unwrap();

    for (i, (label, run)) in runs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for (dash, pick) in [("", true), (r#" stroke-dasharray="5,3""#, false)] {
            let points: Vec<String> = run
                .rows
                .iter()
                .map(|r| format!("{:.2},{:.2}", x(r.epoch), y(if pick { r.train_acc } else { r.test_acc })))
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"{dash}/>"#,
                points.join(" ")
            )
            .unwrap();
        }
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            x1 - 150.0,
            x1 - 130.0
        )
        .unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x1 - 125.0, ly + 4.0, escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochRow;

    #[test]
    fn one_polyline_per_series() {
        let row = |epoch, acc| EpochRow { epoch, train_loss: 0.1, train_acc: acc, test_acc: acc / 2.0, seconds: 0.0 };
        let run = RunRecord { rows: vec![row(1, 0.5), row(2, 0.9)], initial_train_loss: 0.3, checksum: String::new() };
        let svg = accuracy_svg(&[("k3".into(), run.clone()), ("a<b".into(), run)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn empty_run_still_valid() {
        let svg = accuracy_svg(&[]);
        assert!(svg.contains("epoch"));
    }
}
