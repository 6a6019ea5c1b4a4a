//! Static SVG line plots of mean curves with a shaded +-1 std band per series.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mean_std;
use crate::error::{Error, Result};

/// `(x, y)` of one CSV row; `y` is `None` when the cell is empty.
type Point = (f64, Option<f64>);

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Which CSV columns to draw. Rows carrying a `stat` column other than `seed`
/// are skipped, so summaries are recomputed from the per-seed rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    /// Column whose values split rows into series; one series when absent.
    #[serde(default)]
    pub series: Option<String>,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub x_label: Option<String>,
    #[serde(default)]
    pub y_label: Option<String>,
}

impl PlotSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string().trim_end().to_string()))
    }
}

/// Points of one series: `(x, mean, std)` sorted by `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

/// Reads the CSV and aggregates the `y` column per series and `x`.
pub fn load_series(csv_path: &Path, spec: &PlotSpec) -> Result<Vec<Series>> {
    let csv_err = |line: u64, message: String| Error::Csv {
        path: csv_path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| csv_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let xi = column(&spec.x)?;
    let yi = column(&spec.y)?;
    let si = spec.series.as_deref().map(column).transpose()?;
    let stat = headers.iter().position(|h| h == "stat");

    let mut raw: Vec<(String, Vec<Point>)> = Vec::new();
    let mut any_row = false;
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(line, e.to_string()))?;
        any_row = true;
        if stat.is_some_and(|c| rec.get(c) != Some("seed")) {
            continue;
        }
        let num = |c: usize, what: &str| -> Result<Option<f64>> {
            let field = rec.get(c).unwrap_or("").trim();
            if field.is_empty() {
                return Ok(None);
            }
            field
                .parse::<f64>()
                .map(Some)
                .map_err(|_| csv_err(line, format!("{what} value `{field}` is not a number")))
        };
        let Some(x) = num(xi, &spec.x)? else { continue };
        let y = num(yi, &spec.y)?;
        let name = si.map_or_else(|| spec.y.clone(), |c| rec.get(c).unwrap_or("").to_string());
        match raw.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => v.push((x, y)),
            None => raw.push((name, vec![(x, y)])),
        }
    }
    if !any_row {
        return Err(Error::EmptyCsv(csv_path.to_path_buf()));
    }

    let mut out = Vec::new();
    for (name, mut values) in raw {
        values.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut points = Vec::new();
        for chunk in values.chunk_by(|a, b| a.0 == b.0) {
            if let Some((m, s)) = mean_std(chunk.iter().map(|v| v.1.filter(|y| y.is_finite()))) {
                points.push((chunk[0].0, m, s));
            }
        }
        if !points.is_empty() {
            out.push(Series { name, points });
        }
    }
    Ok(out)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Renders the series as an SVG document.
pub fn render(series: &[Series], spec: &PlotSpec) -> String {
    let pts = series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, m, s) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = if y1 - y0 < 1e-12 { 0.5 } else { 0.05 * (y1 - y0) };
    y0 -= pad;
    y1 += pad;

    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    if let Some(title) = &spec.title {
        let _ = writeln!(
            w,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            escape(title)
        );
    }
    let _ = writeln!(
        w,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );

    let mut xticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xticks.sort_by(f64::total_cmp);
    xticks.dedup();
    if xticks.len() > 10 || xticks.len() < 2 {
        xticks = (0..=4).map(|i| x0 + (x1 - x0) * i as f64 / 4.0).collect();
    }
    for &t in &xticks {
        let _ = writeln!(
            w,
            r##"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="#444"/><text x="{0:.2}" y="{3:.2}" text-anchor="middle">{4}</text>"##,
            sx(t),
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            fmt_tick(t)
        );
    }
    for i in 0..=4 {
        let t = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            w,
            r##"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}" stroke="#444"/><text x="{3:.2}" y="{4:.2}" text-anchor="end">{5}</text>"##,
            LEFT - 5.0,
            sy(t),
            LEFT,
            LEFT - 8.0,
            sy(t) + 4.0,
            fmt_tick(t)
        );
    }
    if let Some(label) = spec.x_label.as_deref().or(Some(&spec.x)) {
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(label)
        );
    }
    if let Some(label) = spec.y_label.as_deref().or(Some(&spec.y)) {
        let _ = writeln!(
            w,
            r#"<text x="16" y="{0:.2}" text-anchor="middle" transform="rotate(-90 16 {0:.2})">{1}</text>"#,
            TOP + ph / 2.0,
            escape(label)
        );
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = s.points.iter().map(|&(x, m, sd)| (sx(x), sy(m + sd)));
        let lower = s.points.iter().rev().map(|&(x, m, sd)| (sx(x), sy(m - sd)));
        let band: Vec<String> = upper.chain(lower).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            w,
            r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = s.points.iter().map(|&(x, m, _)| format!("{:.2},{:.2}", sx(x), sy(m))).collect();
        let _ = writeln!(
            w,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for &(x, m, _) in &s.points {
            let _ = writeln!(w, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(m));
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            w,
            r#"<g class="legend"><rect x="{lx:.2}" y="{:.2}" width="14" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            ly - 9.0,
            lx + 20.0,
            ly,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Plots `csv_path` into `out`. Nothing is written when the CSV cannot be plotted.
pub fn plot_file(csv_path: &Path, spec: &PlotSpec, out: &Path) -> Result<()> {
    let series = load_series(csv_path, spec)?;
    let svg = render(&series, spec);
    std::fs::write(out, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(series: Option<&str>) -> PlotSpec {
        PlotSpec {
            x: "x".into(),
            y: "acc".into(),
            series: series.map(Into::into),
            title: Some("a < b".into()),
            x_label: None,
            y_label: None,
        }
    }

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("r.csv");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn single_series_gives_one_line_and_band() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "x,acc\n0,0.5\n0,0.7\n1,0.6\n1,0.6\n");
        let series = load_series(&csv, &spec(None)).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].points.len(), 2);
        assert!((series[0].points[0].1 - 0.6).abs() < 1e-12);
        let svg = render(&series, &spec(None));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("class=\"band\"").count(), 1);
        assert!(svg.contains("a &lt; b"));
    }

    #[test]
    fn two_series_give_two_legend_entries() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(
            dir.path(),
            "setting,x,stat,acc\na,0,seed,0.1\na,0,mean,9\nb,0,seed,0.2\na,1,seed,0.3\nb,1,seed,0.4\n",
        );
        let series = load_series(&csv, &spec(Some("setting"))).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].points[0].1, 0.1, "summary rows are skipped");
        let svg = render(&series, &spec(Some("setting")));
        assert_eq!(svg.matches("class=\"legend\"").count(), 2);
    }

    #[test]
    fn empty_csv_is_an_error_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("p.svg");
        for text in ["", "x,acc\n"] {
            let csv = write(dir.path(), text);
            let err = plot_file(&csv, &spec(None), &out).unwrap_err();
            assert!(matches!(err, Error::EmptyCsv(_) | Error::MissingColumn(_)), "{err}");
            assert!(!out.exists());
        }
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "x,loss\n0,1\n");
        let err = load_series(&csv, &spec(None)).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "acc"), "{err}");
    }

    #[test]
    fn bad_number_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "x,acc\n0,0.5\n1,oops\n");
        let err = load_series(&csv, &spec(None)).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
    }
}
