//! Rate-distortion reporting: CSV rows and the SVG comparison plot. Both
//! are pure functions of their inputs so identical data yields identical
//! bytes.

use crate::error::{Error, Result};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub label: String,
    pub image: String,
    pub bpp: f64,
    pub ms_ssim: f64,
    pub enc_s: f64,
    pub dec_s: f64,
}

pub const CSV_HEADER: &str = "label,image,bpp,ms_ssim,enc_s,dec_s";

/// One row per point plus an aggregate mean row per label (image column
/// "(mean)"). An empty input yields a header-only CSV.
pub fn rd_csv(rows: &[RdPoint]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            r.label, r.image, r.bpp, r.ms_ssim, r.enc_s, r.dec_s
        );
    }
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    for label in labels {
        let group: Vec<&RdPoint> = rows.iter().filter(|r| r.label == label).collect();
        let n = group.len() as f64;
        let mean = |f: fn(&RdPoint) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{},(mean),{},{},{:.6},{:.6}",
            label,
            mean(|r| r.bpp),
            mean(|r| r.ms_ssim),
            mean(|r| r.enc_s),
            mean(|r| r.dec_s)
        );
    }
    out
}

/// Parses a CSV produced by `rd_csv` (mean rows included).
pub fn parse_rd_csv(text: &str) -> Result<Vec<RdPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(Error::format("bad RD CSV header")),
    }
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::format(format!("bad RD CSV row '{line}'")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::format(format!("bad number '{s}'")))
        };
        out.push(RdPoint {
            label: cols[0].to_string(),
            image: cols[1].to_string(),
            bpp: num(cols[2])?,
            ms_ssim: num(cols[3])?,
            enc_s: num(cols[4])?,
            dec_s: num(cols[5])?,
        });
    }
    Ok(out)
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 600.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Rate-distortion scatter/line plot: bpp on x, MS-SSIM on y, one polyline
/// per label through that label's mean points, sorted by bpp. Per-image
/// rows are drawn as small dots.
pub fn rd_svg(rows: &[RdPoint]) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>");

    let pts: Vec<&RdPoint> = rows.iter().filter(|r| r.bpp.is_finite()).collect();
    if pts.is_empty() {
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\">no data</text>", SVG_W / 2.0 - 30.0, SVG_H / 2.0);
        svg.push_str("</svg>\n");
        return svg;
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.ms_ssim);
        y1 = y1.max(p.ms_ssim);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 0.01;
    }
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let sy = |v: f64| SVG_H - MARGIN - (v - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);

    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"14\">bits per pixel</text>",
        SVG_W / 2.0 - 40.0,
        SVG_H - 20.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" font-size=\"14\" transform=\"rotate(-90 16 {})\">MS-SSIM</text>",
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    for (v, label_x) in [(x0, true), (x1, true)] {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{v:.4}</text>",
            sx(v) - 14.0,
            SVG_H - MARGIN + 16.0
        );
        let _ = label_x;
    }
    for v in [y0, y1] {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{v:.4}</text>",
            MARGIN - 50.0,
            sy(v) + 4.0
        );
    }

    let mut labels: Vec<&str> = Vec::new();
    for p in &pts {
        if !labels.contains(&p.label.as_str()) {
            labels.push(&p.label);
        }
    }
    for (li, label) in labels.iter().enumerate() {
        let color = PALETTE[li % PALETTE.len()];
        let dots: Vec<&&RdPoint> = pts
            .iter()
            .filter(|p| p.label == *label && p.image != "(mean)")
            .collect();
        for p in &dots {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.45\"/>",
                sx(p.bpp),
                sy(p.ms_ssim)
            );
        }
        let mut means: Vec<&&RdPoint> = pts
            .iter()
            .filter(|p| p.label == *label && p.image == "(mean)")
            .collect();
        means.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).unwrap());
        if means.len() > 1 {
            let path: Vec<String> = means
                .iter()
                .map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.ms_ssim)))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                path.join(" ")
            );
        }
        for p in &means {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\"/>",
                sx(p.bpp),
                sy(p.ms_ssim)
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>",
            SVG_W - MARGIN - 170.0,
            MARGIN + 18.0 * li as f64 + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
