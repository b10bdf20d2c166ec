//! Static SVG line charts from run CSVs and JSON-lines logs. Output depends
//! only on the input bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mvrc_core::rlft::EpochLog;

use crate::CliError;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 500.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// CSV whose first column is x and every other column a series.
    Lines,
    /// Epoch log: mean reward per epoch, one series per seed.
    Reward,
    /// Epoch log: mean KL per epoch, one series per seed.
    Kl,
    /// `kind,intensity,score`: one series per metric kind.
    Distortion,
    /// `batch,data,seed,epoch,reward,kl`: one reward series per run.
    Scaling,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "lines" => PlotKind::Lines,
            "reward" => PlotKind::Reward,
            "kl" => PlotKind::Kl,
            "distortion" => PlotKind::Distortion,
            "scaling" => PlotKind::Scaling,
            other => return Err(CliError::Config(format!("unknown plot kind {other:?}"))),
        })
    }

    fn labels(self) -> (&'static str, &'static str) {
        match self {
            PlotKind::Lines => ("x", "y"),
            PlotKind::Reward => ("epoch", "mean reward"),
            PlotKind::Kl => ("epoch", "mean KL"),
            PlotKind::Distortion => ("intensity", "score"),
            PlotKind::Scaling => ("epoch", "mean reward"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn parse_err(msg: impl Into<String>) -> CliError {
    CliError::Parse(msg.into())
}

fn num(s: &str) -> Result<f64, CliError> {
    let v: f64 = s.trim().parse().map_err(|_| parse_err(format!("not a number: {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(format!("non-finite value {s:?}")));
    }
    Ok(v)
}

fn csv_rows(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| parse_err(e.to_string()))?.iter().map(String::from).collect();
    let rows = rd
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(|e| parse_err(e.to_string())))
        .collect::<Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize, CliError> {
    header.iter().position(|h| h == name).ok_or_else(|| parse_err(format!("missing column {name:?}")))
}

fn grouped(groups: BTreeMap<String, Vec<(f64, f64)>>) -> Vec<Series> {
    groups.into_iter().map(|(name, points)| Series { name, points }).collect()
}

/// Parses `text` into the series for `kind`.
pub fn parse_series(text: &str, kind: PlotKind) -> Result<Vec<Series>, CliError> {
    let series = match kind {
        PlotKind::Reward | PlotKind::Kl => {
            let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let log: EpochLog = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
                let y = if kind == PlotKind::Reward { log.reward_mean } else { log.kl_mean };
                groups.entry(format!("seed {}", log.seed)).or_default().push((log.epoch as f64, y));
            }
            grouped(groups)
        }
        PlotKind::Lines => {
            let (header, rows) = csv_rows(text)?;
            if header.len() < 2 {
                return Err(parse_err("need an x column and at least one series"));
            }
            let mut out: Vec<Series> = header[1..].iter().map(|h| Series { name: h.clone(), points: Vec::new() }).collect();
            for row in rows {
                let x = num(&row[0])?;
                for (s, v) in out.iter_mut().zip(&row[1..]) {
                    s.points.push((x, num(v)?));
                }
            }
            out
        }
        PlotKind::Distortion => {
            let (header, rows) = csv_rows(text)?;
            let (k, x, y) = (column(&header, "kind")?, column(&header, "intensity")?, column(&header, "score")?);
            let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for row in rows {
                groups.entry(row[k].clone()).or_default().push((num(&row[x])?, num(&row[y])?));
            }
            grouped(groups)
        }
        PlotKind::Scaling => {
            let (header, rows) = csv_rows(text)?;
            let (b, d, s) = (column(&header, "batch")?, column(&header, "data")?, column(&header, "seed")?);
            let (e, r) = (column(&header, "epoch")?, column(&header, "reward")?);
            let mut groups: BTreeMap<(u64, u64, u64), Vec<(f64, f64)>> = BTreeMap::new();
            for row in rows {
                let key = |i: usize| row[i].trim().parse::<u64>().map_err(|_| parse_err(format!("bad integer {:?}", row[i])));
                groups.entry((key(b)?, key(d)?, key(s)?)).or_default().push((num(&row[e])?, num(&row[r])?));
            }
            groups
                .into_iter()
                .map(|((b, d, s), points)| Series { name: format!("batch {b} data {d} seed {s}"), points })
                .collect()
        }
    };
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(parse_err("no data points"));
    }
    Ok(series)
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        let pad = 0.5 * hi.abs().max(1e-9);
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn tick_label(v: f64, range: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if range < 1e-2 || range >= 1e5 {
        format!("{v:.2e}")
    } else if range < 1.0 {
        format!("{v:.4}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// 800x500 chart with axes, five ticks per axis, one polyline per series
/// and a legend.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut o = String::new();
    writeln!(o, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#).unwrap();
    writeln!(o, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(o, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, escape(title)).unwrap();
    writeln!(
        o,
        r#"<path d="M{LEFT} {TOP} L{LEFT} {:.2} L{:.2} {:.2}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    )
    .unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        writeln!(o, r#"<path d="M{px:.2} {:.2} l0 5" stroke="black"/>"#, TOP + ph).unwrap();
        writeln!(
            o,
            r#"<text x="{px:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            tick_label(xv, x1 - x0)
        )
        .unwrap();
        writeln!(o, r#"<path d="M{LEFT} {py:.2} l-5 0" stroke="black"/>"#).unwrap();
        writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            LEFT - 8.0,
            py + 4.0,
            tick_label(yv, y1 - y0)
        )
        .unwrap();
    }
    writeln!(
        o,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        o,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(o, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
        let ly = TOP + 10.0 + 18.0 * i as f64;
        writeln!(o, r#"<rect x="{:.2}" y="{:.2}" width="14" height="3" fill="{color}"/>"#, LEFT + pw + 15.0, ly - 4.0).unwrap();
        writeln!(
            o,
            r#"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            LEFT + pw + 35.0,
            escape(&s.name)
        )
        .unwrap();
    }
    o.push_str("</svg>\n");
    o
}

/// Reads `input`, renders the chart for `kind` and writes it to `output`.
pub fn cmd_plot(input: &Path, kind: PlotKind, output: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input)?;
    let series = parse_series(&text, kind)?;
    let (xl, yl) = kind.labels();
    let title = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    std::fs::write(output, render_svg(&title, xl, yl, &series))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_give_one_polyline() {
        let s = parse_series("x,y\n0,0\n1,1\n", PlotKind::Lines).unwrap();
        let svg = render_svg("t", "x", "y", &s);
        assert_eq!(svg.matches("<polyline").count(), 1);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 2);
        assert_eq!(pts, "80.00,450.00 620.00,40.00");
        assert_eq!(svg, render_svg("t", "x", "y", &s));
    }

    #[test]
    fn reward_logs_give_one_series_per_seed() {
        let mut text = String::new();
        for seed in [3u64, 1] {
            for epoch in 0..3 {
                let log = EpochLog {
                    epoch,
                    seed,
                    reward_mean: -0.005 + epoch as f64 * 1e-4,
                    reward_std: 0.0,
                    kl_mean: 0.0,
                    grad_norm: 0.0,
                    wall_time: 0.0,
                    failures: 0,
                    per_prompt_reward: Default::default(),
                };
                text.push_str(&serde_json::to_string(&log).unwrap());
                text.push('\n');
            }
        }
        let s = parse_series(&text, PlotKind::Reward).unwrap();
        assert_eq!(s.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["seed 1", "seed 3"]);
        assert!(s.iter().all(|s| s.points.len() == 3));
        assert_eq!(render_svg("r", "e", "r", &s).matches("<polyline").count(), 2);
    }

    #[test]
    fn malformed_input_is_a_parse_error() {
        assert!(matches!(parse_series("x,y\n0,abc\n", PlotKind::Lines), Err(CliError::Parse(_))));
        assert!(matches!(parse_series("{not json}\n", PlotKind::Kl), Err(CliError::Parse(_))));
        assert!(matches!(parse_series("a,b\n1,2\n", PlotKind::Distortion), Err(CliError::Parse(_))));
        assert!(matches!(parse_series("x,y\n", PlotKind::Lines), Err(CliError::Parse(_))));
    }

    #[test]
    fn constant_series_still_renders() {
        let s = vec![Series { name: "flat".into(), points: vec![(0.0, 2.0), (1.0, 2.0)] }];
        let svg = render_svg("c", "x", "y", &s);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
