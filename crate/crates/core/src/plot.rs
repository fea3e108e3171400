//! SVG learning curves: reward against environment steps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::trainer::{read_metrics_csv, TrainError};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error("series `{label}` has non-increasing steps at row {row}")]
    NonMonotonic { label: String, row: usize },
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: TrainError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labelled series; each run is one seed's `(step, reward)` curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub runs: Vec<Vec<(f64, f64)>>,
}

impl Series {
    /// Loads metrics CSVs, keeping rows that have finished episodes.
    pub fn from_csvs(label: &str, paths: &[PathBuf]) -> Result<Self, PlotError> {
        let mut runs = Vec::new();
        for p in paths {
            let rows = read_metrics_csv(p).map_err(|source| PlotError::Read {
                path: p.clone(),
                source,
            })?;
            runs.push(
                rows.iter()
                    .filter(|r| r.episodes > 0)
                    .map(|r| (r.step as f64, r.episode_reward_mean))
                    .collect(),
            );
        }
        Ok(Self {
            label: label.to_string(),
            runs,
        })
    }

    /// Mean, min and max across runs at each aligned row.
    pub fn band(&self) -> Vec<(f64, f64, f64, f64)> {
        let n = self.runs.iter().map(Vec::len).min().unwrap_or(0);
        (0..n)
            .map(|i| {
                let ys: Vec<f64> = self.runs.iter().map(|r| r[i].1).collect();
                let x = self.runs[0][i].0;
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (x, mean, lo, hi)
            })
            .collect()
    }

    fn check_monotonic(&self) -> Result<(), PlotError> {
        for run in &self.runs {
            for (i, w) in run.windows(2).enumerate() {
                if w[1].0 <= w[0].0 {
                    return Err(PlotError::NonMonotonic {
                        label: self.label.clone(),
                        row: i + 1,
                    });
                }
            }
        }
        Ok(())
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 720.0;
const H: f64 = 420.0;
const M: f64 = 56.0;

/// Renders the series as an SVG document.
pub fn render_svg(series: &[Series], title: &str) -> Result<String, PlotError> {
    if series.is_empty() || series.iter().all(|s| s.runs.iter().all(Vec::is_empty)) {
        return Err(PlotError::Empty);
    }
    for s in series {
        s.check_monotonic()?;
    }
    let bands: Vec<_> = series.iter().map(Series::band).collect();
    let pts = bands.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, _, lo, hi) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(xv), H - M + 16.0, fmt_num(xv));
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, M - 6.0, sy(yv) + 4.0, fmt_num(yv));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">episode reward</text>"#,
        H / 2.0,
        H / 2.0
    );

    for (k, (s, band)) in series.iter().zip(&bands).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if band.is_empty() {
            continue;
        }
        if s.runs.len() > 1 {
            let mut d = String::new();
            for (i, &(x, _, _, hi)) in band.iter().enumerate() {
                let _ = write!(d, "{}{:.1} {:.1} ", if i == 0 { "M" } else { "L" }, sx(x), sy(hi));
            }
            for &(x, _, lo, _) in band.iter().rev() {
                let _ = write!(d, "L{:.1} {:.1} ", sx(x), sy(lo));
            }
            let _ = writeln!(svg, r#"<path d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, d);
        }
        let points: Vec<String> = band.iter().map(|&(x, m, _, _)| format!("{:.1},{:.1}", sx(x), sy(m))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = M + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" fill="{color}">{} (n={})</text>"#,
            W - M - 150.0,
            escape(&s.label),
            s.runs.len()
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_svg(series: &[Series], title: &str, out: &Path) -> Result<(), PlotError> {
    let svg = render_svg(series, title)?;
    std::fs::write(out, svg)?;
    Ok(())
}

fn fmt_num(v: f64) -> String {
    if v.abs() >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if v.abs() >= 1e3 {
        format!("{:.0}k", v / 1e3)
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| ((i + 1) as f64 * 800.0, i as f64)).collect()
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(render_svg(&[], "t"), Err(PlotError::Empty)));
    }

    #[test]
    fn one_series_one_polyline() {
        let s = Series {
            label: "a".into(),
            runs: vec![run(5)],
        };
        let svg = render_svg(&[s], "t").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("fill-opacity").count(), 0);
    }

    #[test]
    fn seed_band_drawn_for_multiple_runs() {
        let s = Series {
            label: "a".into(),
            runs: vec![run(5), run(4)],
        };
        assert_eq!(s.band().len(), 4);
        let svg = render_svg(&[s], "t").unwrap();
        assert_eq!(svg.matches("fill-opacity").count(), 1);
    }

    #[test]
    fn non_monotonic_steps_rejected() {
        let s = Series {
            label: "a".into(),
            runs: vec![vec![(1.0, 0.0), (1.0, 1.0)]],
        };
        assert!(matches!(render_svg(&[s], "t"), Err(PlotError::NonMonotonic { .. })));
    }
}
