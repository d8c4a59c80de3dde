//! Deterministic SVG line plots from metrics CSVs: fixed canvas, fixed
//! palette, fixed number formatting, so identical inputs yield identical
//! bytes.

use std::path::Path;

use crate::error::HgcpError;
use crate::Result;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 46.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// What to plot: which CSV columns go on each axis, plus labels.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub title: String,
    pub x_col: String,
    pub y_col: String,
    pub x_label: String,
    pub y_label: String,
}

impl PlotSpec {
    pub fn new(title: &str, x_col: &str, y_col: &str) -> PlotSpec {
        PlotSpec {
            title: title.to_string(),
            x_col: x_col.to_string(),
            y_col: y_col.to_string(),
            x_label: x_col.to_string(),
            y_label: y_col.to_string(),
        }
    }
}

/// One named series extracted from a CSV.
struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

/// Read (x_col, y_col) pairs out of one CSV file. Rows where either
/// selected column is empty are skipped; unparsable values are a
/// [`HgcpError::Parse`] with the 1-based line number.
fn read_series(name: &str, path: &Path, spec: &PlotSpec) -> Result<Series> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| HgcpError::Parse {
        line: 1,
        msg: format!("{}: empty file", path.display()),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let xi = cols.iter().position(|c| *c == spec.x_col).ok_or_else(|| HgcpError::Parse {
        line: 1,
        msg: format!("{}: no column `{}`", path.display(), spec.x_col),
    })?;
    let yi = cols.iter().position(|c| *c == spec.y_col).ok_or_else(|| HgcpError::Parse {
        line: 1,
        msg: format!("{}: no column `{}`", path.display(), spec.y_col),
    })?;
    let mut points = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(HgcpError::Parse {
                line: i + 1,
                msg: format!("{}: {} fields, header has {}", path.display(), fields.len(), cols.len()),
            });
        }
        if fields[xi].is_empty() || fields[yi].is_empty() {
            continue;
        }
        let parse = |s: &str, col: &str| -> Result<f64> {
            s.parse().map_err(|_| HgcpError::Parse {
                line: i + 1,
                msg: format!("{}: bad {col} value `{s}`", path.display()),
            })
        };
        let x = parse(fields[xi], &spec.x_col)?;
        let y = parse(fields[yi], &spec.y_col)?;
        if x.is_finite() && y.is_finite() {
            points.push((x, y));
        }
    }
    Ok(Series {
        name: name.to_string(),
        points,
    })
}

/// Fixed-precision tick/coordinate formatting: four decimals with
/// trailing zeros (and a bare trailing dot) trimmed.
fn fmt(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" || s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Render named CSVs into one SVG line plot. At least one series with at
/// least one point is required.
pub fn emit_plots(csvs: &[(String, std::path::PathBuf)], spec: &PlotSpec, out: &Path) -> Result<()> {
    if csvs.is_empty() {
        return Err(HgcpError::Config("no CSV files to plot".into()));
    }
    let mut series = Vec::with_capacity(csvs.len());
    for (name, path) in csvs {
        series.push(read_series(name, path, spec)?);
    }
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(HgcpError::Config(format!(
            "no data points for `{}` vs `{}`",
            spec.y_col, spec.x_col
        )));
    }
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if x_min == x_max {
        x_min -= 1.0;
        x_max += 1.0;
    }
    if y_min == y_max {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"14\" \
text-anchor=\"middle\">{}</text>\n",
        fmt(WIDTH / 2.0),
        escape(&spec.title)
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B),
        fmt(WIDTH - MARGIN_R),
        fmt(HEIGHT - MARGIN_B)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B)
    ));
    // Ticks: five per axis at even fractions.
    for i in 0..5 {
        let f = i as f64 / 4.0;
        let xv = x_min + f * (x_max - x_min);
        let yv = y_min + f * (y_max - y_min);
        let xp = px(xv);
        let yp = py(yv);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt(xp),
            fmt(HEIGHT - MARGIN_B),
            fmt(xp),
            fmt(HEIGHT - MARGIN_B + 5.0)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
text-anchor=\"middle\">{}</text>\n",
            fmt(xp),
            fmt(HEIGHT - MARGIN_B + 17.0),
            fmt(xv)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt(MARGIN_L - 5.0),
            fmt(yp),
            fmt(MARGIN_L),
            fmt(yp)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" \
text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L - 8.0),
            fmt(yp + 3.0),
            fmt(yv)
        ));
    }
    // Axis labels.
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
text-anchor=\"middle\">{}</text>\n",
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 10.0),
        escape(&spec.x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        fmt((MARGIN_T + HEIGHT - MARGIN_B) / 2.0),
        fmt((MARGIN_T + HEIGHT - MARGIN_B) / 2.0),
        escape(&spec.y_label)
    ));
    // Series.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if !s.points.is_empty() {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|(x, y)| format!("{},{}", fmt(px(*x)), fmt(py(*y))))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        // Legend entry.
        let ly = MARGIN_T + 14.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            fmt(WIDTH - MARGIN_R - 150.0),
            fmt(ly),
            fmt(WIDTH - MARGIN_R - 130.0),
            fmt(ly)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
            fmt(WIDTH - MARGIN_R - 124.0),
            fmt(ly + 3.0),
            escape(&s.name)
        ));
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, svg)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn write_csv(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_input_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PlotSpec::new("t", "x", "y");
        let out = dir.path().join("out.svg");
        assert!(matches!(
            emit_plots(&[], &spec, &out),
            Err(HgcpError::Config(_))
        ));
        // A CSV whose selected columns are all empty is also rejected.
        let p = write_csv(dir.path(), "e.csv", "x,y\n,\n,\n");
        assert!(matches!(
            emit_plots(&[("e".into(), p)], &spec, &out),
            Err(HgcpError::Config(_))
        ));
    }

    #[test]
    fn malformed_csv_reports_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PlotSpec::new("t", "x", "y");
        let out = dir.path().join("out.svg");
        let p = write_csv(dir.path(), "bad.csv", "x,y\n1,2\n3,zap\n");
        match emit_plots(&[("bad".into(), p)], &spec, &out) {
            Err(HgcpError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let p2 = write_csv(dir.path(), "cols.csv", "a,b\n1,2\n");
        match emit_plots(&[("cols".into(), p2)], &spec, &out) {
            Err(HgcpError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn renders_one_polyline_per_series_and_skips_blank_cells() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PlotSpec::new("curves", "x", "y");
        let a = write_csv(dir.path(), "a.csv", "x,y,status\n0,1,ok\n1,,ok\n2,3,ok\n");
        let b = write_csv(dir.path(), "b.csv", "x,y,status\n0,2,ok\n2,0,ok\n");
        let out = dir.path().join("out.svg");
        emit_plots(&[("first".into(), a), ("second".into(), b)], &spec, &out).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("first"));
        assert!(svg.contains("second"));
        // Series `a` kept 2 of its 3 rows (the blank y was skipped).
        let poly = svg
            .lines()
            .find(|l| l.contains("#1f77b4") && l.contains("polyline"))
            .unwrap();
        let pts = poly.split("points=\"").nth(1).unwrap();
        assert_eq!(pts.split('"').next().unwrap().split(' ').count(), 2);
    }

    #[test]
    fn identical_inputs_yield_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PlotSpec::new("det", "x", "y");
        let a = write_csv(dir.path(), "a.csv", "x,y\n0,0.123456\n5,2.5\n10,-1\n");
        let out1 = dir.path().join("one.svg");
        let out2 = dir.path().join("two.svg");
        emit_plots(&[("s".into(), a.clone())], &spec, &out1).unwrap();
        emit_plots(&[("s".into(), a)], &spec, &out2).unwrap();
        let b1 = std::fs::read(&out1).unwrap();
        let b2 = std::fs::read(&out2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn output_matches_the_pinned_golden_image() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PlotSpec::new("golden", "step", "return");
        let a = write_csv(
            dir.path(),
            "a.csv",
            "step,return\n0,-10\n100,-4\n200,-1\n300,-0.5\n",
        );
        let b = write_csv(dir.path(), "b.csv", "step,return\n0,-12\n150,-8\n300,-6\n");
        let out = dir.path().join("golden.svg");
        emit_plots(
            &[("fast".into(), a), ("slow".into(), b)],
            &spec,
            &out,
        )
        .unwrap();
        let got = std::fs::read_to_string(&out).unwrap();
        let want = include_str!("golden_plot.svg");
        assert_eq!(got, want, "SVG output drifted from the pinned golden");
    }

    /// Regenerates the golden image; run manually after intentional
    /// rendering changes: `cargo test -p hgcp regenerate_golden -- --ignored`.
    #[test]
    #[ignore]
    fn regenerate_golden() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PlotSpec::new("golden", "step", "return");
        let a = write_csv(
            dir.path(),
            "a.csv",
            "step,return\n0,-10\n100,-4\n200,-1\n300,-0.5\n",
        );
        let b = write_csv(dir.path(), "b.csv", "step,return\n0,-12\n150,-8\n300,-6\n");
        let out = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/harness/golden_plot.svg");
        emit_plots(&[("fast".into(), a), ("slow".into(), b)], &spec, &out).unwrap();
    }

    #[test]
    fn fixed_number_formatting() {
        assert_eq!(fmt(1.0), "1");
        assert_eq!(fmt(0.5), "0.5");
        assert_eq!(fmt(1.23456), "1.2346");
        assert_eq!(fmt(-0.00001), "0");
        assert_eq!(fmt(100.0), "100");
    }
}
