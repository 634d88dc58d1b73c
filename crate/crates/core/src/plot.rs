//! Standalone SVG rendering for the CSV files the CLI writes.
//!
//! The chart kind follows the CSV header: `index,...,sigma,...` becomes a
//! log-sigma schedule curve, `dim0,dim1` a 2-D scatter, and anything else a
//! line chart of every numeric column against the first one.

use std::fmt::Write as _;
use std::io::Read;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Line,
    Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot `log10(y)`; non-positive and non-finite values are skipped.
    pub log_y: bool,
    pub mark: Mark,
    pub series: Vec<Series>,
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    fn read<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            rows.push(record?.iter().map(|v| v.trim().parse::<f64>().ok()).collect());
        }
        Ok(Self { headers, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn pairs(&self, xi: usize, yi: usize) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| match (r.get(xi).copied().flatten(), r.get(yi).copied().flatten()) {
                (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Some((x, y)),
                _ => None,
            })
            .collect()
    }
}

/// Builds a plot from one or more `(label, csv)` inputs of the same kind.
pub fn plot_from_csv<R: Read>(inputs: Vec<(String, R)>) -> Result<Plot> {
    let mut plot: Option<Plot> = None;
    for (label, input) in inputs {
        let table = Table::read(input)?;
        let next = plot_table(&label, &table)?;
        plot = Some(match plot {
            None => next,
            Some(mut p) => {
                if p.mark != next.mark || p.log_y != next.log_y || p.x_label != next.x_label {
                    return Err(Error::Format(format!("{label} is a different kind of CSV than the first input")));
                }
                p.series.extend(next.series);
                p
            }
        });
    }
    plot.ok_or_else(|| Error::param("no CSV inputs given"))
}

fn plot_table(label: &str, table: &Table) -> Result<Plot> {
    if let (Some(xi), Some(yi)) = (table.col("index"), table.col("sigma")) {
        return Ok(Plot {
            title: "Noise schedule".into(),
            x_label: "inference step".into(),
            y_label: "log10 sigma".into(),
            log_y: true,
            mark: Mark::Line,
            series: vec![Series { label: label.into(), points: table.pairs(xi, yi) }],
        });
    }
    if let (Some(xi), Some(yi)) = (table.col("dim0"), table.col("dim1")) {
        return Ok(Plot {
            title: "Samples".into(),
            x_label: "dim0".into(),
            y_label: "dim1".into(),
            log_y: false,
            mark: Mark::Point,
            series: vec![Series { label: label.into(), points: table.pairs(xi, yi) }],
        });
    }
    if table.headers.len() < 2 {
        return Err(Error::Format(format!("{label}: need at least two columns to plot")));
    }
    let series: Vec<Series> = (1..table.headers.len())
        .map(|yi| Series {
            label: if table.headers.len() > 2 { format!("{label}:{}", table.headers[yi]) } else { label.into() },
            points: table.pairs(0, yi),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    let log_y = table.headers.get(1).is_some_and(|h| h == "loss")
        && series.iter().all(|s| s.points.iter().all(|p| p.1 > 0.0));
    Ok(Plot {
        title: table.headers[1..].join(", "),
        x_label: table.headers[0].clone(),
        y_label: if log_y { format!("log10 {}", table.headers[1]) } else { "value".into() },
        log_y,
        mark: Mark::Line,
        series,
    })
}

/// Round tick step covering `span` in about five intervals.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.03 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn label_num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Plot {
    fn transformed(&self) -> Vec<Vec<(f64, f64)>> {
        self.series
            .iter()
            .map(|s| {
                s.points
                    .iter()
                    .filter_map(|&(x, y)| {
                        if !self.log_y {
                            Some((x, y))
                        } else if y > 0.0 && y.is_finite() {
                            Some((x, y.log10()))
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Byte-deterministic SVG document.
    pub fn to_svg(&self) -> String {
        let data = self.transformed();
        let (x0, x1) = range(data.iter().flatten().map(|p| p.0));
        let (y0, y1) = range(data.iter().flatten().map(|p| p.1));
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );

        let step = tick_step(x1 - x0);
        let mut t = (x0 / step).ceil() * step;
        while t <= x1 {
            let x = sx(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ccc"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                MARGIN_TOP,
                MARGIN_TOP + ph,
                MARGIN_TOP + ph + 16.0,
                label_num(t)
            );
            t += step;
        }
        let step = tick_step(y1 - y0);
        let mut t = (y0 / step).ceil() * step;
        while t <= y1 {
            let y = sy(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                MARGIN_LEFT,
                MARGIN_LEFT + pw,
                MARGIN_LEFT - 6.0,
                y + 4.0,
                label_num(t)
            );
            t += step;
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            MARGIN_TOP + ph / 2.0,
            MARGIN_TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (i, (series, pts)) in self.series.iter().zip(&data).enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            match self.mark {
                Mark::Line => {
                    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                    let _ = writeln!(
                        svg,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                        path.join(" ")
                    );
                }
                Mark::Point => {
                    let _ = writeln!(svg, r#"<g fill="{color}" fill-opacity="0.4">"#);
                    for &(x, y) in pts {
                        let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, sx(x), sy(y));
                    }
                    let _ = writeln!(svg, "</g>");
                }
            }
            let ly = MARGIN_TOP + 10.0 + 16.0 * i as f64;
            let lx = MARGIN_LEFT + pw + 10.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                ly - 9.0,
                lx + 14.0,
                ly,
                escape(&series.label)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}
