//! Static SVG line charts with a log-scaled y axis.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const MAX_POINTS: usize = 2000;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    /// Standard deviation around `y`, drawn as a band.
    pub spread: Option<Vec<f64>>,
}

/// Loads a trace CSV (`t,dist_sq,...`) or a summary CSV (`t,mean_dist_sq,std_dist_sq,...`).
pub fn read_series(path: &Path, label: String) -> Result<Series> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let t_col = col("t").with_context(|| format!("{} has no t column", path.display()))?;
    let (y_col, sd_col) = match (col("mean_dist_sq"), col("dist_sq")) {
        (Some(m), _) => (m, col("std_dist_sq")),
        (None, Some(d)) => (d, None),
        _ => bail!("{} has neither dist_sq nor mean_dist_sq", path.display()),
    };
    let mut s = Series { label, t: Vec::new(), y: Vec::new(), spread: sd_col.map(|_| Vec::new()) };
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().with_context(|| format!("bad number {:?} in {}", &rec[i], path.display()))
        };
        s.t.push(num(t_col)?);
        s.y.push(num(y_col)?);
        if let (Some(sd), Some(i)) = (s.spread.as_mut(), sd_col) {
            sd.push(num(i)?);
        }
    }
    if s.t.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(s)
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Every row when short, otherwise an even stride that keeps the last row.
fn thin(n: usize) -> Vec<usize> {
    if n <= MAX_POINTS {
        return (0..n).collect();
    }
    let stride = n.div_ceil(MAX_POINTS);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if idx.last() != Some(&(n - 1)) {
        idx.push(n - 1);
    }
    idx
}

fn nice_step(range: f64) -> f64 {
    let raw = range / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    mag * if r <= 1.0 { 1.0 } else if r <= 2.0 { 2.0 } else if r <= 5.0 { 5.0 } else { 10.0 }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        format!("{v}")
    }
}

/// Renders the series as an SVG document; non-positive values are skipped.
pub fn render_svg(series: &[Series], title: Option<&str>, band: bool) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.t.is_empty()) {
        bail!("nothing to plot");
    }
    let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (i, (&t, &y)) in s.t.iter().zip(&s.y).enumerate() {
            if !(t.is_finite() && y.is_finite() && y > 0.0) {
                continue;
            }
            tmin = tmin.min(t);
            tmax = tmax.max(t);
            let (lo, hi) = match (&s.spread, band) {
                (Some(sd), true) => (y - sd[i], y + sd[i]),
                _ => (y, y),
            };
            ymin = ymin.min(if lo > 0.0 { lo } else { y });
            ymax = ymax.max(hi);
        }
    }
    if !tmin.is_finite() {
        bail!("no positive finite values to plot on a log scale");
    }
    if tmax == tmin {
        tmin -= 1.0;
        tmax += 1.0;
    }
    let mut d0 = ymin.log10().floor();
    let mut d1 = ymax.log10().ceil();
    if d1 == d0 {
        d0 -= 1.0;
        d1 += 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |t: f64| LEFT + (t - tmin) / (tmax - tmin) * pw;
    let py = |y: f64| TOP + (d1 - y.log10().clamp(d0, d1)) / (d1 - d0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    if let Some(t) = title {
        let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, fmt3(WIDTH / 2.0), escape(t));
    }
    let _ = writeln!(
        out,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        fmt3(LEFT),
        fmt3(TOP),
        fmt3(pw),
        fmt3(ph)
    );

    // y ticks at decades, thinned when the range is wide.
    let decades = (d1 - d0) as i64;
    let every = (decades / 10 + 1).max(1);
    for k in (0..=decades).step_by(every as usize) {
        let e = d0 + k as f64;
        let y = TOP + (d1 - e) / (d1 - d0) * ph;
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">1e{}</text>"##,
            fmt3(LEFT),
            fmt3(LEFT + pw),
            fmt3(LEFT - 6.0),
            fmt3(y + 4.0),
            e as i64,
            y = fmt3(y)
        );
    }
    let step = nice_step(tmax - tmin);
    let mut tick = (tmin / step).ceil() * step;
    while tick <= tmax + 1e-9 * step {
        let x = px(tick);
        let _ = writeln!(
            out,
            r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#ddd"/><text x="{x}" y="{}" text-anchor="middle">{}</text>"##,
            fmt3(TOP),
            fmt3(TOP + ph),
            fmt3(TOP + ph + 18.0),
            tick_label(tick),
            x = fmt3(x)
        );
        tick += step;
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">t</text>"#, fmt3(LEFT + pw / 2.0), fmt3(HEIGHT - 15.0));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">squared distance to the stable point</text>"#,
        fmt3(TOP + ph / 2.0),
        fmt3(TOP + ph / 2.0)
    );

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let keep: Vec<usize> = thin(s.t.len())
            .into_iter()
            .filter(|&i| s.t[i].is_finite() && s.y[i].is_finite() && s.y[i] > 0.0)
            .collect();
        if let (Some(sd), true) = (&s.spread, band) {
            let mut pts: Vec<String> = keep.iter().map(|&i| format!("{},{}", fmt3(px(s.t[i])), fmt3(py(s.y[i] + sd[i])))).collect();
            pts.extend(keep.iter().rev().map(|&i| {
                let lo = s.y[i] - sd[i];
                let y = if lo > 0.0 { py(lo) } else { TOP + ph };
                format!("{},{}", fmt3(px(s.t[i])), fmt3(y))
            }));
            let _ = writeln!(out, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "));
        }
        let pts: Vec<String> = keep.iter().map(|&i| format!("{},{}", fmt3(px(s.t[i])), fmt3(py(s.y[i])))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
    }

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let y = TOP + 16.0 + 18.0 * k as f64;
        let x = LEFT + pw - 200.0;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            fmt3(x),
            fmt3(x + 24.0),
            fmt3(x + 30.0),
            fmt3(y + 4.0),
            escape(&s.label),
            y = fmt3(y)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(label: &str, spread: bool) -> Series {
        let t: Vec<f64> = (0..50).map(f64::from).collect();
        let y: Vec<f64> = t.iter().map(|t| 100.0 / (1.0 + t)).collect();
        let spread = spread.then(|| y.iter().map(|v| v / 2.0).collect());
        Series { label: label.into(), t, y, spread }
    }

    #[test]
    fn one_polyline_per_series_and_legend() {
        let svg = render_svg(&[series("a", false)], None, true).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<polygon").count(), 0);
        let svg = render_svg(&[series("a", false), series("b & c", false)], Some("t"), true).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">a</text>") && svg.contains(">b &amp; c</text>"));
    }

    #[test]
    fn band_polygon_when_spread_present() {
        let svg = render_svg(&[series("a", true)], None, true).unwrap();
        assert_eq!(svg.matches("<polygon").count(), 1);
        let svg = render_svg(&[series("a", true)], None, false).unwrap();
        assert_eq!(svg.matches("<polygon").count(), 0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(render_svg(&[], None, true).is_err());
        let s = Series { label: "z".into(), t: vec![0.0], y: vec![0.0], spread: None };
        assert!(render_svg(&[s], None, true).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_svg(&[series("a", true)], None, true).unwrap();
        let b = render_svg(&[series("a", true)], None, true).unwrap();
        assert_eq!(a, b);
    }
}
