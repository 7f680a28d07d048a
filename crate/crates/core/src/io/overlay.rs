//! SVG 1.1 overlay of an alignment.
//!
//! Observed spots are circles, reference spots mapped through the report's
//! transform are plus signs, markers get a triangle, and each match is a
//! `<line class="match">` from the observed spot to its mapped partner.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use super::report::AlignmentReport;
use super::spotfile::SpotTable;
use crate::error::{Error, Result};

const PAD: f64 = 10.0;
const R: f64 = 1.5;
const PLUS: f64 = 2.5;
const TRI: f64 = 4.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_overlay(report: &AlignmentReport, mu: &SpotTable, x: &SpotTable) -> Result<String> {
    let t = &report.transform;
    let mapped: Vec<DVector<f64>> = mu.configuration.points().iter().map(|p| t.apply_point(p)).collect();
    let xs = x.configuration.points();

    let mut lines = Vec::new();
    for (xid, muid) in report.matched_pairs() {
        let j = x
            .index_of(xid)
            .ok_or_else(|| Error::InvalidInput(format!("report names unknown observed spot {xid:?}")))?;
        let i = mu
            .index_of(muid)
            .ok_or_else(|| Error::InvalidInput(format!("report names unknown reference spot {muid:?}")))?;
        lines.push((j, i));
    }

    let all = xs.iter().chain(&mapped);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in all {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    if !x0.is_finite() {
        (x0, y0, x1, y1) = (0.0, 0.0, 1.0, 1.0);
    }
    let (vx, vy) = (x0 - PAD, y0 - PAD);
    let (w, h) = (x1 - x0 + 2.0 * PAD, y1 - y0 + 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="{vx} {vy} {w} {h}" width="{w}" height="{h}">"#
    );
    s.push_str(concat!(
        "<style>",
        ".match{stroke:#1f77b4;stroke-width:0.6}",
        ".x{fill:#d62728}",
        ".mu{stroke:#2ca02c;stroke-width:0.8;fill:none}",
        ".marker{fill:none;stroke:#000;stroke-width:0.8}",
        "</style>\n"
    ));

    s.push_str("<g id=\"matches\">\n");
    for &(j, i) in &lines {
        let (a, b) = (&xs[j], &mapped[i]);
        let _ = writeln!(
            s,
            r#"<line class="match" x1="{}" y1="{}" x2="{}" y2="{}"/>"#,
            a[0], a[1], b[0], b[1]
        );
    }
    s.push_str("</g>\n<g id=\"observed\">\n");
    for (j, p) in xs.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<circle class="x" cx="{}" cy="{}" r="{R}"><title>{}</title></circle>"#,
            p[0],
            p[1],
            escape(&x.ids[j])
        );
    }
    s.push_str("</g>\n<g id=\"reference\">\n");
    for (i, p) in mapped.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<path class="mu" d="M{} {}h{}M{} {}v{}"><title>{}</title></path>"#,
            p[0] - PLUS,
            p[1],
            2.0 * PLUS,
            p[0],
            p[1] - PLUS,
            2.0 * PLUS,
            escape(&mu.ids[i])
        );
    }
    s.push_str("</g>\n<g id=\"markers\">\n");
    let markers = x
        .configuration
        .marker_slots()
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.map(|j| (k, &xs[j])))
        .chain(
            mu.configuration
                .marker_slots()
                .iter()
                .enumerate()
                .filter_map(|(k, s)| s.map(|i| (k, &mapped[i]))),
        );
    for (k, p) in markers {
        let _ = writeln!(
            s,
            r#"<path class="marker" d="M{} {}l{} {}h{}z"><title>marker {}</title></path>"#,
            p[0],
            p[1] - TRI,
            TRI,
            2.0 * TRI,
            -2.0 * TRI,
            k + 1
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

pub fn write_overlay(path: &Path, report: &AlignmentReport, mu: &SpotTable, x: &SpotTable) -> Result<()> {
    super::write_atomic(path, render_overlay(report, mu, x)?.as_bytes())
}
