use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pixelworld::Suite;

use super::metrics::{read_metrics, RunRecord, METRICS_FILE};
use super::Variant;

pub const PLOT_FILE: &str = "returns.svg";

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 210.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn color(v: Variant) -> &'static str {
    match v {
        Variant::Base => "#4c72b0",
        Variant::Cn => "#dd8452",
        Variant::Sn => "#55a868",
        Variant::Cnsn => "#c44e52",
        Variant::CnsnNocrop => "#8172b3",
        Variant::Bn => "#937860",
    }
}

fn dash(s: Suite) -> &'static str {
    match s {
        Suite::Train => "none",
        Suite::ColorHard => "7 4",
        Suite::VideoEasy => "2 3",
        Suite::VideoHard => "9 3 2 3",
    }
}

struct Series {
    variant: Variant,
    suite: Suite,
    /// `(step, mean, std)` over seeds.
    points: Vec<(f64, f64, f64)>,
}

fn series(records: &[RunRecord]) -> Vec<Series> {
    let mut groups: BTreeMap<(Variant, Suite), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.variant, r.suite))
            .or_default()
            .entry(r.step)
            .or_default()
            .push(r.mean_return);
    }
    groups
        .into_iter()
        .map(|((variant, suite), steps)| Series {
            variant,
            suite,
            points: steps
                .into_iter()
                .map(|(step, xs)| {
                    let n = xs.len() as f64;
                    let m = xs.iter().sum::<f64>() / n;
                    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                    (step as f64, m, var.sqrt())
                })
                .collect(),
        })
        .collect()
}

fn nice_step(span: f64, target_ticks: f64) -> f64 {
    let raw = (span / target_ticks).max(1e-12);
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

/// Seed-averaged return curves with ±1 std bands, one line per (variant, suite).
pub fn plot_to_string(records: &[RunRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Schema("no metrics rows to plot".into()));
    }
    let all = series(records);
    let x_max = records.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &all {
        for &(_, m, sd) in &s.points {
            y_lo = y_lo.min(m - sd);
            y_hi = y_hi.max(m + sd);
        }
    }
    if !(y_lo.is_finite() && y_hi.is_finite()) {
        return Err(Error::Schema("metrics contain non-finite returns".into()));
    }
    let y_step = nice_step((y_hi - y_lo).max(0.1), 6.0);
    y_lo = (y_lo / y_step).floor() * y_step;
    y_hi = ((y_hi / y_step).ceil() * y_step).max(y_lo + y_step);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + x / x_max * pw;
    let py = |y: f64| TOP + (y_hi - y) / (y_hi - y_lo) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    // Axes, grid and ticks.
    let _ = writeln!(svg, r##"<g class="axes" stroke="#444" stroke-width="1">"##);
    let _ = writeln!(svg, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/>"#, TOP + ph, LEFT + pw, TOP + ph);
    let _ = writeln!(svg, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/>"#, TOP + ph);
    let _ = writeln!(svg, "</g>");
    let x_step = nice_step(x_max, 5.0);
    let mut x = 0.0;
    while x <= x_max + 1e-9 {
        let _ = writeln!(
            svg,
            r##"<text class="tick" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            px(x),
            TOP + ph + 18.0,
            x
        );
        x += x_step;
    }
    let mut y = y_lo;
    while y <= y_hi + 1e-9 {
        let _ = writeln!(
            svg,
            r##"<line class="grid" x1="{LEFT}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text class="tick" x="{2:.1}" y="{3:.1}" text-anchor="end">{4:.2}</text>"##,
            py(y),
            LEFT + pw,
            LEFT - 6.0,
            py(y) + 4.0,
            y
        );
        y += y_step;
    }
    let _ = writeln!(
        svg,
        r#"<text class="label" x="{:.1}" y="{:.1}" text-anchor="middle">environment steps</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text class="label" transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">mean episode return</text>"#,
        TOP + ph / 2.0
    );

    for s in &all {
        let c = color(s.variant);
        let upper = s.points.iter().map(|&(x, m, sd)| format!("{:.2},{:.2}", px(x), py(m + sd)));
        let lower = s.points.iter().rev().map(|&(x, m, sd)| format!("{:.2},{:.2}", px(x), py(m - sd)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            svg,
            r#"<polygon class="band" data-series="{}/{}" points="{}" fill="{c}" fill-opacity="0.15" stroke="none"/>"#,
            s.variant,
            s.suite,
            band.join(" ")
        );
        let line: Vec<String> = s.points.iter().map(|&(x, m, _)| format!("{:.2},{:.2}", px(x), py(m))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="line" data-series="{}/{}" points="{}" fill="none" stroke="{c}" stroke-width="2" stroke-dasharray="{}"/>"#,
            s.variant,
            s.suite,
            line.join(" "),
            dash(s.suite)
        );
    }

    let lx = LEFT + pw + 18.0;
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, s) in all.iter().enumerate() {
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2" stroke-dasharray="{}"/><text x="{:.1}" y="{:.1}">{}/{}</text>"#,
            lx + 26.0,
            color(s.variant),
            dash(s.suite),
            lx + 32.0,
            ly + 4.0,
            s.variant,
            s.suite
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Read `metrics.csv` from every run directory and write [`PLOT_FILE`] into `out_dir`.
pub fn plot(run_dirs: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    let mut records = Vec::new();
    for dir in run_dirs {
        records.extend(read_metrics(&dir.join(METRICS_FILE))?);
    }
    let svg = plot_to_string(&records)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(PLOT_FILE);
    fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(variant: Variant, suite: Suite, seed: u64) -> Vec<RunRecord> {
        (0..4)
            .map(|i| RunRecord {
                step: i * 100,
                suite,
                seed,
                variant,
                mean_return: 0.2 * i as f64 + seed as f64 * 0.1,
                std_return: 0.1,
                episodes: 5,
            })
            .collect()
    }

    #[test]
    fn one_series_gives_one_line_and_band() {
        let svg = plot_to_string(&rows(Variant::Base, Suite::Train, 0)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("class=\"band\"").count(), 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn legend_names_each_variant() {
        let mut r = rows(Variant::Base, Suite::ColorHard, 0);
        r.extend(rows(Variant::Cnsn, Suite::ColorHard, 0));
        r.extend(rows(Variant::Cnsn, Suite::ColorHard, 1));
        let svg = plot_to_string(&r).unwrap();
        assert!(svg.contains(">base/color_hard</text>"));
        assert!(svg.contains(">cnsn/color_hard</text>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn empty_metrics_are_a_schema_error() {
        assert!(matches!(plot_to_string(&[]), Err(Error::Schema(_))));
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("r");
        std::fs::create_dir(&run).unwrap();
        std::fs::write(run.join(METRICS_FILE), "step,suite\n").unwrap();
        match plot(&[run], dir.path()) {
            Err(Error::Schema(msg)) => assert!(msg.contains("seed"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
