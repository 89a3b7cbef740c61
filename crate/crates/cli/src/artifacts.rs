//! CSV, JSON and SVG emission. Floats are printed with Rust's shortest
//! round-trip formatting so that reading a CSV back gives the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::hex;

/// Writes files into one output directory and remembers their digests for
/// the manifest.
#[derive(Debug)]
pub struct ArtifactSink {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
}

impl ArtifactSink {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(ArtifactSink { dir: dir.to_path_buf(), digests: BTreeMap::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.digests.insert(name.to_string(), hex(&Sha256::digest(bytes)));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).context("serialising JSON artifact")?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn digests(&self) -> &BTreeMap<String, String> {
        &self.digests
    }
}

fn push_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let row: Vec<String> = cells.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

/// One row per sample: `t, x_0..x_{n-1}`, then the control columns. The
/// control of the last sample is empty when `controls` is one shorter than
/// `states`.
pub fn trajectory_csv(times: &[f64], states: &[Vec<f64>], controls: &[Vec<f64>], control_prefix: &str) -> String {
    let n = states.first().map_or(0, Vec::len);
    let m = controls.first().map_or(0, Vec::len);
    let mut out = String::new();
    push_row(
        &mut out,
        std::iter::once("t".to_string())
            .chain((0..n).map(|i| format!("x_{i}")))
            .chain((0..m).map(|j| format!("{control_prefix}_{j}"))),
    );
    for (i, (t, x)) in times.iter().zip(states).enumerate() {
        let u: Vec<String> = match controls.get(i) {
            Some(u) => u.iter().map(|v| v.to_string()).collect(),
            None => vec![String::new(); m],
        };
        push_row(&mut out, std::iter::once(t.to_string()).chain(x.iter().map(|v| v.to_string())).chain(u));
    }
    out
}

pub fn cost_curve_csv(times: &[f64], curve: &[f64]) -> String {
    let mut out = String::from("k,t,cost\n");
    for (k, (t, j)) in times.iter().zip(curve).enumerate() {
        let _ = writeln!(out, "{k},{t},{j}");
    }
    out
}

/// Parses a headed numeric CSV; empty cells become NaN.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(str::to_string).collect(),
        None => bail!("empty CSV"),
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| if c.is_empty() { Ok(f64::NAN) } else { c.parse::<f64>() })
            .collect::<std::result::Result<Vec<f64>, _>>()
            .with_context(|| format!("CSV row {}", i + 1))?;
        if row.len() != header.len() {
            bail!("CSV row {} has {} cells, header has {}", i + 1, row.len(), header.len());
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Reads the cost column of a `cost_curve.csv`.
pub fn read_cost_curve(text: &str) -> Result<Vec<f64>> {
    let (header, rows) = parse_csv(text)?;
    let col = header.iter().position(|h| h == "cost").context("cost_curve.csv has no 'cost' column")?;
    Ok(rows.iter().map(|r| r[col]).collect())
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>, equal: bool) -> Frame {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for (a, b) in points.filter(|(a, b)| a.is_finite() && b.is_finite()) {
            x = (x.0.min(a), x.1.max(a));
            y = (y.0.min(b), y.1.max(b));
        }
        if !x.0.is_finite() {
            return Frame { x: (0.0, 1.0), y: (0.0, 1.0) };
        }
        let widen = |(lo, hi): (f64, f64)| {
            let span = (hi - lo).max(1e-9);
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        let (mut x, mut y) = (widen(x), widen(y));
        if equal {
            // Same data units per pixel on both axes.
            let sx = (x.1 - x.0) / (W - 2.0 * PAD);
            let sy = (y.1 - y.0) / (H - 2.0 * PAD);
            let s = sx.max(sy);
            let (cx, cy) = (0.5 * (x.0 + x.1), 0.5 * (y.0 + y.1));
            x = (cx - 0.5 * s * (W - 2.0 * PAD), cx + 0.5 * s * (W - 2.0 * PAD));
            y = (cy - 0.5 * s * (H - 2.0 * PAD), cy + 0.5 * s * (H - 2.0 * PAD));
        }
        Frame { x, y }
    }

    fn px(&self, a: f64, b: f64) -> (f64, f64) {
        let u = PAD + (a - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD);
        let v = H - PAD - (b - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD);
        (u, v)
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub marker: Option<(f64, f64)>,
}

pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], equal_axes: bool) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()), equal_axes);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 14.0, escape(xlabel));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = frame.x.0 + f * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + f * (frame.y.1 - frame.y.0);
        let (u, _) = frame.px(xv, frame.y.0);
        let (_, v) = frame.px(frame.x.0, yv);
        let _ = writeln!(svg, r#"<text x="{u:.1}" y="{}" text-anchor="middle">{xv:.3}</text>"#, H - PAD + 16.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, PAD - 6.0, v + 4.0);
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|&(a, b)| {
                let (u, v) = frame.px(a, b);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#, pts.join(" "));
        if let Some((a, b)) = s.marker {
            let (u, v) = frame.px(a, b);
            let _ = writeln!(svg, r#"<circle cx="{u:.2}" cy="{v:.2}" r="5" fill="{color}"/>"#);
        }
        let ly = PAD + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            W - PAD - 120.0,
            W - PAD - 100.0,
            W - PAD - 94.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Planar paths from a trajectory CSV, one series per `(x, y)` column pair.
pub fn trajectory_svg(csv: &str, pairs: &[(usize, usize)], title: &str) -> Result<String> {
    let (header, rows) = parse_csv(csv)?;
    let col = |i: usize| header.iter().position(|h| *h == format!("x_{i}")).with_context(|| format!("no column x_{i}"));
    let mut series = Vec::new();
    if pairs.is_empty() {
        let c = col(0)?;
        series.push(Series { label: "x_0".into(), points: rows.iter().map(|r| (r[0], r[c])).collect(), marker: None });
        return Ok(line_plot(title, "t", "x_0", &series, false));
    }
    for (r, &(a, b)) in pairs.iter().enumerate() {
        let (ca, cb) = (col(a)?, col(b)?);
        let points: Vec<(f64, f64)> = rows.iter().map(|row| (row[ca], row[cb])).collect();
        let marker = points.last().copied();
        series.push(Series { label: format!("robot {}", r + 1), points, marker });
    }
    Ok(line_plot(title, "position x", "position y", &series, true))
}

/// Cost versus terminal time with the selected node marked.
pub fn cost_svg(csv: &str, selected: Option<usize>, title: &str) -> Result<String> {
    let (header, rows) = parse_csv(csv)?;
    let t = header.iter().position(|h| h == "t").context("cost_curve.csv has no 't' column")?;
    let c = header.iter().position(|h| h == "cost").context("cost_curve.csv has no 'cost' column")?;
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r[t], r[c])).collect();
    let marker = selected.and_then(|k| points.get(k).copied());
    Ok(line_plot(title, "tau (s)", "cost", &[Series { label: "cost".into(), points, marker }], false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_floats_exactly() {
        let vals = [0.1, 1.0 / 3.0, -2.5e-17, 12345.678901234567, f64::INFINITY];
        let times: Vec<f64> = (0..vals.len()).map(|i| i as f64 * 0.1).collect();
        let text = cost_curve_csv(&times, &vals);
        let back = read_cost_curve(&text).unwrap();
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn trajectory_layout() {
        let text = trajectory_csv(&[0.0, 0.5], &[vec![1.0, 2.0], vec![3.0, 4.0]], &[vec![9.0]], "a");
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x_0,x_1,a_0"));
        assert_eq!(lines.next(), Some("0,1,2,9"));
        assert_eq!(lines.next(), Some("0.5,3,4,"));
        let (h, rows) = parse_csv(&text).unwrap();
        assert_eq!(h.len(), 4);
        assert!(rows[1][3].is_nan());
    }

    #[test]
    fn svg_is_deterministic_and_well_formed() {
        let csv = cost_curve_csv(&[0.0, 0.1, 0.2], &[0.0, 0.5, 0.25]);
        let a = cost_svg(&csv, Some(1), "cost").unwrap();
        assert_eq!(a, cost_svg(&csv, Some(1), "cost").unwrap());
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("<circle"));
    }
}
