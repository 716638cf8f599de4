//! Convergence curves from training logs: a CSV table and an SVG overlay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::read_log;

/// Log key plotted by default.
pub const DEFAULT_METRIC: &str = "val_map_avg";

/// One run's curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    /// `(epoch, value)` in log order.
    pub points: Vec<(usize, f64)>,
}

/// Reads `metric` from each log. Legend labels are the file stems, prefixed
/// with the parent directory when two stems collide.
pub fn load_curves(paths: &[PathBuf], metric: &str) -> Result<Vec<Curve>> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("plot needs at least one log file".into()));
    }
    let labels = labels_for(paths);
    let mut curves = Vec::with_capacity(paths.len());
    for (path, label) in paths.iter().zip(labels) {
        let records = read_log(path)?;
        let mut points = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let field = |name: &str| Error::Schema {
                path: path.clone(),
                line: i + 1,
                field: name.into(),
            };
            let epoch = r.get("epoch").and_then(|v| v.as_u64()).ok_or_else(|| field("epoch"))? as usize;
            let value = r.get(metric).and_then(|v| v.as_f64()).ok_or_else(|| field(metric))?;
            points.push((epoch, value));
        }
        curves.push(Curve { label, points });
    }
    Ok(curves)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn labels_for(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    stems
        .iter()
        .zip(paths)
        .map(|(s, p)| {
            if stems.iter().filter(|t| *t == s).count() > 1 {
                match p.parent().and_then(|d| d.file_name()) {
                    Some(d) => format!("{}/{s}", d.to_string_lossy()),
                    None => s.clone(),
                }
            } else {
                s.clone()
            }
        })
        .collect()
}

/// `epoch,<label>...` with one row per epoch seen in any run. Values are
/// written in shortest round-trip form; a run without that epoch leaves the
/// cell empty.
pub fn to_csv(curves: &[Curve]) -> String {
    let epochs: BTreeSet<usize> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
    let maps: Vec<BTreeMap<usize, f64>> = curves.iter().map(|c| c.points.iter().copied().collect()).collect();
    let mut out = String::from("epoch");
    for c in curves {
        out.push(',');
        out.push_str(&csv_field(&c.label));
    }
    out.push('\n');
    for e in epochs {
        let _ = write!(out, "{e}");
        for m in &maps {
            out.push(',');
            if let Some(v) = m.get(&e) {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line plot overlaying every curve, with a legend.
pub fn to_svg(curves: &[Curve], metric: &str) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (64.0, 180.0, 24.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let all = curves.iter().flat_map(|c| c.points.iter());
    let (mut e0, mut e1, mut y0, mut y1) = (usize::MAX, 0usize, f64::INFINITY, f64::NEG_INFINITY);
    for &(e, v) in all {
        e0 = e0.min(e);
        e1 = e1.max(e);
        if v.is_finite() {
            y0 = y0.min(v);
            y1 = y1.max(v);
        }
    }
    if e0 > e1 {
        (e0, e1) = (0, 1);
    }
    if e1 == e0 {
        e1 = e0 + 1;
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let x_of = |e: usize| left + pw * (e - e0) as f64 / (e1 - e0) as f64;
    let y_of = |v: f64| top + ph * (1.0 - (v - y0) / (y1 - y0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    for i in 0..=4 {
        let e = e0 + (e1 - e0) * i / 4;
        let x = x_of(e);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#,
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(metric)
    );
    for (k, c) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(e, v)| format!("{:.2},{:.2}", x_of(e), y_of(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 12.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` and `<stem>.svg`; returns both paths.
pub fn plot_convergence(paths: &[PathBuf], metric: &str, out_stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let curves = load_curves(paths, metric)?;
    let csv = out_stem.with_extension("csv");
    let svg = out_stem.with_extension("svg");
    if let Some(dir) = out_stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&csv, to_csv(&curves))?;
    std::fs::write(&svg, to_svg(&curves, metric))?;
    Ok((csv, svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_log(dir: &Path, name: &str, vals: &[f64]) -> PathBuf {
        let p = dir.join(name);
        let text: String = vals
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{{\"epoch\":{},\"loss\":1.0,\"val_map_avg\":{}}}\n", i + 1, serde_json::to_string(v).unwrap()))
            .collect();
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn one_log_one_curve() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_log(dir.path(), "base.jsonl", &[0.1, 0.2, 0.3]);
        let curves = load_curves(&[p], DEFAULT_METRIC).unwrap();
        let csv = to_csv(&curves);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,base");
        assert_eq!(lines.len(), 1 + 3);
    }

    #[test]
    fn values_pass_through_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [0.1 + 0.2, 1.0 / 3.0, 2.5e-17];
        let a = write_log(dir.path(), "on.jsonl", &vals);
        let b = write_log(dir.path(), "off.jsonl", &vals[..2]);
        let (csv, svg) = plot_convergence(&[a, b], DEFAULT_METRIC, &dir.path().join("out/curve")).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        let mut rows = text.lines();
        assert_eq!(rows.next(), Some("epoch,on,off"));
        for (i, row) in rows.enumerate() {
            let cells: Vec<_> = row.split(',').collect();
            assert_eq!(cells[1].parse::<f64>().unwrap(), vals[i]);
            if i < 2 {
                assert_eq!(cells[2].parse::<f64>().unwrap(), vals[i]);
            } else {
                assert_eq!(cells[2], "");
            }
        }
        let svg = std::fs::read_to_string(svg).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">on</text>") && svg.contains(">off</text>"));
    }

    #[test]
    fn colliding_stems_use_parent() {
        let l = labels_for(&[PathBuf::from("a/log.jsonl"), PathBuf::from("b/log.jsonl"), PathBuf::from("c/x.jsonl")]);
        assert_eq!(l, ["a/log", "b/log", "x"]);
    }

    #[test]
    fn malformed_log_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"epoch\":1,\"val_map_avg\":0.1}\nnot json\n").unwrap();
        assert!(matches!(load_curves(&[p], DEFAULT_METRIC), Err(Error::Parse { line: 2, .. })));
        let q = dir.path().join("missing.jsonl");
        std::fs::write(&q, "{\"epoch\":1}\n").unwrap();
        assert!(matches!(load_curves(&[q], DEFAULT_METRIC), Err(Error::Schema { .. })));
        assert!(load_curves(&[], DEFAULT_METRIC).is_err());
    }
}
