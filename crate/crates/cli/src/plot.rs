//! Static SVG line charts from CSV columns. Output depends only on the input
//! text and the spec, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("plot spec `{0}`: expected `x:y1,y2[:title]`")]
    Spec(String),
    #[error("column `{0}` not in the CSV header")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("no finite points to plot")]
    Empty,
}

/// Which columns to draw: `x:y1,y2[:title]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub x: String,
    pub ys: Vec<String>,
    pub title: String,
}

impl FromStr for PlotSpec {
    type Err = PlotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, ':');
        let x = parts.next().map(str::trim).filter(|x| !x.is_empty());
        let ys: Vec<String> = parts
            .next()
            .map(|y| y.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect())
            .unwrap_or_default();
        match x {
            Some(x) if !ys.is_empty() => Ok(Self {
                x: x.to_string(),
                title: parts.next().map_or_else(|| ys.join(", "), |t| t.trim().to_string()),
                ys,
            }),
            _ => Err(PlotError::Spec(s.to_string())),
        }
    }
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn columns(csv_text: &str, spec: &PlotSpec) -> Result<(Vec<f64>, Vec<Vec<f64>>), PlotError> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let header = reader.headers().map_err(|e| PlotError::Csv(e.to_string()))?.clone();
    let find = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| PlotError::MissingColumn(name.to_string()));
    let xi = find(&spec.x)?;
    let yi: Vec<usize> = spec.ys.iter().map(|y| find(y)).collect::<Result<_, _>>()?;
    let mut xs = Vec::new();
    let mut ys = vec![Vec::new(); yi.len()];
    for row in reader.records() {
        let row = row.map_err(|e| PlotError::Csv(e.to_string()))?;
        let num = |i: usize| row.get(i).and_then(|v| v.trim().parse::<f64>().ok()).unwrap_or(f64::NAN);
        xs.push(num(xi));
        for (k, &i) in yi.iter().enumerate() {
            ys[k].push(num(i));
        }
    }
    Ok((xs, ys))
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

/// Renders the chart as a standalone SVG document.
pub fn render_svg(csv_text: &str, spec: &PlotSpec) -> Result<String, PlotError> {
    let (xs, ys) = columns(csv_text, spec)?;
    let (x0, x1) = range(xs.iter().copied()).ok_or(PlotError::Empty)?;
    let (y0, y1) = range(ys.iter().flatten().copied()).ok_or(PlotError::Empty)?;
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let w = &mut svg;
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(w, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(&spec.title)).unwrap();
    writeln!(w, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (tx, ty) = (px(xv), py(yv));
        writeln!(w, r#"<line x1="{tx:.2}" y1="{}" x2="{tx:.2}" y2="{}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0).unwrap();
        writeln!(w, r#"<text x="{tx:.2}" y="{}" text-anchor="middle">{xv:.4}</text>"#, TOP + ph + 19.0).unwrap();
        writeln!(w, r#"<line x1="{}" y1="{ty:.2}" x2="{LEFT}" y2="{ty:.2}" stroke="black"/>"#, LEFT - 5.0).unwrap();
        writeln!(w, r#"<text x="{}" y="{:.2}" text-anchor="end">{yv:.4}</text>"#, LEFT - 8.0, ty + 4.0).unwrap();
    }
    writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0, escape(&spec.x)).unwrap();
    for (k, series) in ys.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(series)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        writeln!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" ")).unwrap();
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = WIDTH - RIGHT + 12.0;
        writeln!(w, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
        writeln!(w, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&spec.ys[k])).unwrap();
    }
    w.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        let s: PlotSpec = "theta:target,source:Archery".parse().unwrap();
        assert_eq!(s.x, "theta");
        assert_eq!(s.ys, vec!["target", "source"]);
        assert_eq!(s.title, "Archery");
        assert_eq!("iter:target_success".parse::<PlotSpec>().unwrap().title, "target_success");
        assert!("theta".parse::<PlotSpec>().is_err());
        assert!(":y".parse::<PlotSpec>().is_err());
    }

    #[test]
    fn three_points_give_three_vertices() {
        let svg = render_svg("x,y\n0,1\n1,3\n2,2\n", &"x:y".parse().unwrap()).unwrap();
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let points = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        assert_eq!(points.split(' ').count(), 3);
    }

    #[test]
    fn deterministic_bytes() {
        let csv = "x,a,b\n0,1,2\n1,0.5,NaN\n2,0.25,1\n";
        let spec: PlotSpec = "x:a,b".parse().unwrap();
        assert_eq!(render_svg(csv, &spec).unwrap(), render_svg(csv, &spec).unwrap());
    }

    #[test]
    fn missing_column() {
        let err = render_svg("x,y\n0,1\n", &"x:z".parse().unwrap()).unwrap_err();
        assert_eq!(err, PlotError::MissingColumn("z".into()));
    }

    #[test]
    fn constant_series_still_renders() {
        let svg = render_svg("x,y\n0,1\n1,1\n", &"x:y".parse().unwrap()).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(!svg.contains("NaN"));
    }
}
