//! Chart data for effect-size curves: a delimited series per curve and an
//! optional SVG line chart.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::aggregate::Endpoint;
use crate::audit::CurveRecord;
use crate::ingest::EstimateVariant;

#[derive(Debug, Error)]
pub enum ChartError {
    #[error("curve has no points")]
    EmptyCurve,
    #[error("thresholds are not strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChartPoint {
    /// Threshold as a fraction in [0, 1].
    pub a: f64,
    pub t: f64,
    pub d: f64,
    pub mean_below: f64,
    pub mean_above: f64,
}

impl ChartPoint {
    pub fn raw_difference(&self) -> f64 {
        self.mean_below - self.mean_above
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChartSeries {
    pub attribute: String,
    pub outcome: String,
    pub endpoint: Endpoint,
    pub variant: EstimateVariant,
    pub include_raw: bool,
    pub points: Vec<ChartPoint>,
}

/// Maps a curve onto chart axes. Percentage attributes (`pct_*`) keep their
/// threshold as A; anything else (densities) is min-max scaled over the
/// observed attribute range.
pub fn emit_chart(curve: &CurveRecord, include_raw: bool) -> Result<ChartSeries, ChartError> {
    if curve.points.is_empty() {
        return Err(ChartError::EmptyCurve);
    }
    let fraction = curve.attribute.starts_with("pct_");
    let span = curve.x_max - curve.x_min;
    let points: Vec<ChartPoint> = curve
        .points
        .iter()
        .map(|p| ChartPoint {
            a: if fraction || span <= 0.0 {
                p.t
            } else {
                (p.t - curve.x_min) / span
            },
            t: p.t,
            d: p.d,
            mean_below: p.mean_below,
            mean_above: p.mean_above,
        })
        .collect();
    if let Some(i) = points.windows(2).position(|w| !(w[1].a > w[0].a)) {
        return Err(ChartError::NotIncreasing(i + 1));
    }
    Ok(ChartSeries {
        attribute: curve.attribute.clone(),
        outcome: curve.outcome.clone(),
        endpoint: curve.endpoint,
        variant: curve.variant,
        include_raw,
        points,
    })
}

impl ChartSeries {
    /// Base file name, e.g. `point_dropoff_pct_nonwhite_fare_per_mile`.
    pub fn stem(&self) -> String {
        format!("{}_{}_{}_{}", self.variant, self.endpoint, self.attribute, self.outcome)
    }

    /// Values are written with shortest round-trip formatting, so every
    /// number matches the report exactly.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ChartError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["a", "t", "d"];
        if self.include_raw {
            header.extend(["mean_below", "mean_above", "raw_difference"]);
        }
        w.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![p.a.to_string(), p.t.to_string(), p.d.to_string()];
            if self.include_raw {
                row.extend([
                    p.mean_below.to_string(),
                    p.mean_above.to_string(),
                    p.raw_difference().to_string(),
                ]);
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, ChartError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Line chart of d against A.
    pub fn to_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.a, p.d)).collect();
        let title = format!("{} vs {} ({}, {})", self.outcome, self.attribute, self.endpoint, self.variant);
        line_chart(&title, "A", "d", &pts)
    }

    /// Line chart of the raw outcome difference (below minus above) against A.
    pub fn raw_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.a, p.raw_difference())).collect();
        let title = format!(
            "{} difference, A <= X minus A > X ({}, {})",
            self.outcome, self.endpoint, self.variant
        );
        line_chart(&title, "A", &format!("{} difference", self.outcome), &pts)
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn line_chart(title: &str, x_label: &str, y_label: &str, pts: &[(f64, f64)]) -> String {
    let (x0, x1) = (0.0_f64, 1.0_f64);
    let mut y0 = pts.iter().map(|p| p.1).fold(0.0_f64, f64::min);
    let mut y1 = pts.iter().map(|p| p.1).fold(0.0_f64, f64::max);
    if y1 - y0 < 1e-12 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    // axes box
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let x = x0 + (x1 - x0) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.1}</text>"#,
            sx(x),
            TOP + ph + 16.0,
            x
        );
        let y = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
            LEFT - 6.0,
            sy(y) + 4.0,
            y
        );
    }
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
            sy(0.0),
            LEFT + pw
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0:.2}" text-anchor="middle" transform="rotate(-90 16 {0:.2})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        coords.join(" ")
    );
    s.push_str("</svg>\n");
    s
}
