//! Standalone SVG rendering of training curves and observation scatters.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Batch loss over training rounds.
    Loss,
    /// Windowed success rate over training rounds.
    Msr,
    /// Per-episode reward normalized by the episode length.
    Reward,
    /// Equalized y/z coordinates of an observation.
    Scatter,
}

impl FromStr for PlotKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "loss" => Ok(PlotKind::Loss),
            "msr" => Ok(PlotKind::Msr),
            "reward" => Ok(PlotKind::Reward),
            "scatter" => Ok(PlotKind::Scatter),
            _ => Err(CliError::Validation(format!(
                "unknown plot kind `{s}` (loss, msr, reward, scatter)"
            ))),
        }
    }
}

impl PlotKind {
    /// Columns read from the CSV: x, y, optional divisor column for y.
    fn columns(self) -> (&'static str, &'static str) {
        match self {
            PlotKind::Loss => ("step", "batch_loss"),
            PlotKind::Msr => ("step", "msr_window"),
            PlotKind::Reward => ("episode", "total_reward"),
            PlotKind::Scatter => ("y_eq", "z_eq"),
        }
    }

    fn labels(self) -> (&'static str, &'static str) {
        match self {
            PlotKind::Loss => ("step k", "loss"),
            PlotKind::Msr => ("step k", "MSR"),
            PlotKind::Reward => ("episode", "reward per step"),
            PlotKind::Scatter => ("y (equalized)", "z (equalized)"),
        }
    }
}

/// A parsed CSV with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::Validation("empty CSV".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(CliError::Validation(format!(
                    "CSV row {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let idx = self.header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Validation(format!(
                "CSV has no `{name}` column (found {})",
                self.header.join(",")
            ))
        })?;
        self.rows
            .iter()
            .map(|r| {
                r[idx].parse::<f64>().map_err(|_| {
                    CliError::Validation(format!("`{name}`: `{}` is not a number", r[idx]))
                })
            })
            .collect()
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 20.0;
const MARGIN_BOTTOM: f64 = 50.0;
const TICKS: usize = 5;

/// Step size from {1, 2, 5}·10^k giving roughly `TICKS` intervals.
fn nice_step(span: f64) -> f64 {
    let raw = span / TICKS as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let f = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    f * mag
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return None;
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        Some((lo - pad, hi + pad))
    } else {
        Some((lo, hi))
    }
}

fn fmt_tick(v: f64, step: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1e5 || v.abs() < 1e-3 {
        return format!("{v:.1e}");
    }
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

/// Renders points as an SVG document. Non-finite points are skipped.
pub fn render(points: &[(f64, f64)], kind: PlotKind, title: &str) -> Result<String, CliError> {
    let finite: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (x0, x1) = range(finite.iter().map(|p| p.0))
        .ok_or_else(|| CliError::Validation("no finite data points".into()))?;
    let (y0, y1) = range(finite.iter().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + ph - (y - y0) / (y1 - y0) * ph;
    let (xlabel, ylabel) = kind.labels();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    for (axis, lo, hi) in [('x', x0, x1), ('y', y0, y1)] {
        let step = nice_step(hi - lo);
        let mut t = (lo / step).ceil() * step;
        while t <= hi + step * 1e-9 {
            let label = fmt_tick(t, step);
            if axis == 'x' {
                let px = sx(t);
                let _ = writeln!(
                    s,
                    r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ddd"/>"##,
                    MARGIN_TOP,
                    MARGIN_TOP + ph
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
                    MARGIN_TOP + ph + 16.0
                );
            } else {
                let py = sy(t);
                let _ = writeln!(
                    s,
                    r##"<line x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##,
                    MARGIN_LEFT + pw
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
                    MARGIN_LEFT - 6.0,
                    py + 4.0
                );
            }
            t += step;
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        MARGIN_TOP + ph / 2.0,
        MARGIN_TOP + ph / 2.0,
        escape(ylabel)
    );
    if kind == PlotKind::Scatter {
        for &(x, y) in &finite {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
                sx(x),
                sy(y)
            );
        }
    } else {
        let mut path = String::new();
        for (i, &(x, y)) in finite.iter().enumerate() {
            let _ = write!(
                path,
                "{}{:.2},{:.2}",
                if i == 0 { "M" } else { " L" },
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            s,
            r##"<path d="{path}" fill="none" stroke="#1f77b4" stroke-width="1.2"/>"##
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Reads `input`, extracts the columns for `kind` and renders them.
pub fn plot_csv(input: &Path, kind: PlotKind, episode_limit: usize) -> Result<String, CliError> {
    let text = std::fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
    let table = Table::parse(&text)?;
    let (xc, yc) = kind.columns();
    let xs = table.column(xc)?;
    let mut ys = table.column(yc)?;
    if kind == PlotKind::Reward {
        for y in &mut ys {
            *y /= episode_limit as f64;
        }
    }
    let points: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
    render(&points, kind, &input.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nice_steps() {
        assert_eq!(nice_step(10.0), 2.0);
        assert_eq!(nice_step(1.0), 0.2);
        assert_eq!(nice_step(3000.0), 1000.0);
    }

    #[test]
    fn schema_mismatch_reported() {
        let t = Table::parse("a,b\n1,2\n").unwrap();
        assert!(matches!(
            t.column("msr_window"),
            Err(CliError::Validation(_))
        ));
        assert!(Table::parse("a,b\n1\n").is_err());
    }

    #[test]
    fn render_line_and_scatter() {
        let pts: Vec<(f64, f64)> = (0..10)
            .map(|i| (i as f64, (i as f64).sqrt()))
            .chain([(11.0, f64::NAN)])
            .collect();
        let svg = render(&pts, PlotKind::Msr, "t<1>").unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<path").count(), 1);
        assert!(svg.contains("t&lt;1&gt;"));
        let svg = render(&pts, PlotKind::Scatter, "s").unwrap();
        assert_eq!(svg.matches("<circle").count(), 10);
        assert!(render(&[(f64::NAN, 1.0)], PlotKind::Loss, "x").is_err());
    }

    #[test]
    fn constant_series_renders() {
        let svg = render(&[(0.0, 0.5), (1.0, 0.5)], PlotKind::Msr, "c").unwrap();
        assert!(svg.contains("<path"));
    }
}
