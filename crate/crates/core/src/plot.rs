//! SVG scatter panels of two-token datasets.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{dequantize, Dataset};

pub const MAX_POINTS: usize = 5000;
const PANEL: f64 = 320.0;
const MARGIN: f64 = 20.0;
const TITLE: f64 = 24.0;

/// Indices of at most `cap` evenly strided rows.
pub fn subsample(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    (0..cap).map(|i| i * len / cap).collect()
}

/// One panel per `(title, dataset)`, laid out left to right, with one
/// circle per plotted point.
pub fn scatter_svg(panels: &[(&str, &Dataset)]) -> Result<String> {
    if panels.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    for (title, d) in panels {
        if d.spec().n_tokens != 2 {
            return Err(Error::invalid(format!(
                "panel {title:?}: scatter plots need 2 tokens per sample"
            )));
        }
    }
    let width = panels.len() as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 2.0 * MARGIN + TITLE;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (p, (title, d)) in panels.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL + MARGIN);
        let y0 = MARGIN + TITLE;
        let _ = writeln!(svg, r#"<g id="panel{p}">"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            x0 + PANEL / 2.0,
            MARGIN + 14.0,
            escape(title)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#888"/>"##
        );
        let spec = d.spec();
        for i in subsample(d.len(), MAX_POINTS) {
            let [u, v] = dequantize(d.sample(i), &spec);
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="#1f5fa8" fill-opacity="0.5"/>"##,
                x0 + u * PANEL,
                y0 + (1.0 - v) * PANEL
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{two_moons_dataset, GridSpec};
    use crate::rng::RngStream;

    #[test]
    fn one_circle_per_point_with_cap() {
        let spec = GridSpec::two_moons();
        let small = two_moons_dataset(300, 0.04, spec, &RngStream::new(0, "p", 0)).unwrap();
        let big = two_moons_dataset(12_000, 0.04, spec, &RngStream::new(1, "p", 0)).unwrap();
        let svg = scatter_svg(&[("a", &small)]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 300);
        let svg = scatter_svg(&[("a<b", &small), ("big", &big)]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 300 + MAX_POINTS);
        assert!(svg.contains(r#"id="panel1""#) && svg.contains("a&lt;b"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(scatter_svg(&[("big", &big)]).unwrap(), scatter_svg(&[("big", &big)]).unwrap());
    }

    #[test]
    fn subsample_is_strided() {
        assert_eq!(subsample(3, 5), vec![0, 1, 2]);
        assert_eq!(subsample(10, 5), vec![0, 2, 4, 6, 8]);
        assert!(scatter_svg(&[]).is_err());
    }
}
