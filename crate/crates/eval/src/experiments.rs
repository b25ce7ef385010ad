//! Dropout, ambiguous-label and map experiments.

use std::fmt::Write as _;

use pierce_core::geo::TimeStamp;
use pierce_core::qc::NodeLabel;
use pierce_core::windowing::DropoutSpec;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowSet;
use crate::error::Result;
use crate::forecaster::Forecaster;
use crate::report::{fmt_metric, score_source, MetricSet, ScoredPoint, Subset};

pub const DROPOUT_FRACTIONS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutRow {
    pub fraction: f64,
    pub retained: MetricSet,
    pub dropped: MetricSet,
    pub new: MetricSet,
}

pub fn dropout_experiment(
    f: &dyn Forecaster,
    windows: &WindowSet,
    fractions: &[f64],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<DropoutRow>> {
    fractions
        .iter()
        .map(|&fraction| {
            let set = windows.with_dropout(DropoutSpec::Fraction(fraction), seed);
            let pts = score_source(f, &set, batch_size)?;
            Ok(DropoutRow {
                fraction,
                retained: MetricSet::over(&pts, |p| Subset::Retained.contains(p)),
                dropped: MetricSet::over(&pts, |p| Subset::Dropped.contains(p)),
                new: MetricSet::over(&pts, |p| Subset::New.contains(p)),
            })
        })
        .collect()
}

pub fn dropout_csv(forecaster: &str, rows: &[DropoutRow]) -> String {
    let mut out = format!("forecaster,fraction,subset,{}\n", MetricSet::CSV_HEADER);
    for r in rows {
        for (name, m) in [("retained", &r.retained), ("dropped", &r.dropped), ("new", &r.new)] {
            let _ = writeln!(out, "{forecaster},{:.2},{name},{}", r.fraction, m.csv_fields());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: Option<f64>,
    pub above_half: Option<f64>,
    /// Counts over equal-width bins of `[0, 1]`.
    pub bins: Vec<usize>,
}

impl Distribution {
    pub fn of(values: &[f64], bins: usize) -> Self {
        let mut h = vec![0; bins.max(1)];
        for &v in values {
            let i = ((v * h.len() as f64) as usize).min(h.len() - 1);
            h[i] += 1;
        }
        let n = values.len();
        Self {
            count: n,
            mean: (n > 0).then(|| values.iter().sum::<f64>() / n as f64),
            above_half: (n > 0).then(|| values.iter().filter(|v| **v > 0.5).count() as f64 / n as f64),
            bins: h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousSummary {
    pub forecaster: String,
    pub unverified: Distribution,
    pub invalid: Distribution,
}

/// Predicted probabilities at positions labelled unverified or invalid.
pub fn ambiguous_distribution(forecaster: &str, points: &[ScoredPoint], bins: usize) -> AmbiguousSummary {
    let pick = |l: NodeLabel| points.iter().filter(|p| p.code == Some(l)).map(|p| p.p).collect::<Vec<_>>();
    AmbiguousSummary {
        forecaster: forecaster.to_string(),
        unverified: Distribution::of(&pick(NodeLabel::Unverified), bins),
        invalid: Distribution::of(&pick(NodeLabel::Invalid), bins),
    }
}

pub fn ambiguous_csv(rows: &[AmbiguousSummary]) -> String {
    let mut out = String::from("forecaster,label,count,mean,above_half,bin_lo,bin_hi,bin_count\n");
    for r in rows {
        for (name, d) in [("unverified", &r.unverified), ("invalid", &r.invalid)] {
            let w = 1.0 / d.bins.len() as f64;
            for (i, c) in d.bins.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{name},{},{},{},{:.3},{:.3},{c}",
                    r.forecaster,
                    d.count,
                    fmt_metric(d.mean),
                    fmt_metric(d.above_half),
                    i as f64 * w,
                    (i + 1) as f64 * w
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub value: f64,
}

/// Latitude-longitude grid of `values` at `res_deg` spacing covering their
/// extent plus `pad_deg`: each cell takes its nearest point's value, then
/// the grid is smoothed with a Gaussian of `sigma_deg` truncated at 3σ.
pub fn grid_export(values: &[(f64, f64, f64)], res_deg: f64, sigma_deg: f64, pad_deg: f64) -> Vec<GridCell> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo_lat = values.iter().map(|v| v.0).fold(f64::INFINITY, f64::min) - pad_deg;
    let hi_lat = values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max) + pad_deg;
    let lo_lon = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min) - pad_deg;
    let hi_lon = values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max) + pad_deg;
    let lat0 = (lo_lat / res_deg).floor() * res_deg;
    let lon0 = (lo_lon / res_deg).floor() * res_deg;
    let nlat = ((hi_lat - lat0) / res_deg).ceil() as usize + 1;
    let nlon = ((hi_lon - lon0) / res_deg).ceil() as usize + 1;
    let mut raw = vec![0.0; nlat * nlon];
    for i in 0..nlat {
        for j in 0..nlon {
            let (la, lo) = (lat0 + i as f64 * res_deg, lon0 + j as f64 * res_deg);
            let mut best = (f64::INFINITY, 0.0);
            for &(a, b, v) in values {
                let d = (a - la).powi(2) + (b - lo).powi(2);
                if d < best.0 {
                    best = (d, v);
                }
            }
            raw[i * nlon + j] = best.1;
        }
    }
    let s = sigma_deg / res_deg;
    let half = (3.0 * s).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half).map(|k| (-0.5 * (k as f64 / s).powi(2)).exp()).collect();
    // Separable pass along longitude then latitude, renormalized at edges.
    let smooth = |src: &[f64], along_lon: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for i in 0..nlat {
            for j in 0..nlon {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, w) in kernel.iter().enumerate() {
                    let off = k as isize - half;
                    let (ii, jj) = if along_lon { (i as isize, j as isize + off) } else { (i as isize + off, j as isize) };
                    if ii < 0 || jj < 0 || ii >= nlat as isize || jj >= nlon as isize {
                        continue;
                    }
                    acc += w * src[ii as usize * nlon + jj as usize];
                    wsum += w;
                }
                out[i * nlon + j] = acc / wsum;
            }
        }
        out
    };
    let sm = if s > 0.0 { smooth(&smooth(&raw, true), false) } else { raw };
    let mut cells = Vec::with_capacity(nlat * nlon);
    for i in 0..nlat {
        for j in 0..nlon {
            cells.push(GridCell { lat_deg: lat0 + i as f64 * res_deg, lon_deg: lon0 + j as f64 * res_deg, value: sm[i * nlon + j] });
        }
    }
    cells
}

/// Forecast probabilities for valid time `t` at the given lead, placed at
/// their IPPs.
pub fn forecast_map(points: &[ScoredPoint], windows: &WindowSet, t: TimeStamp, lead: usize) -> Vec<(f64, f64, f64)> {
    points
        .iter()
        .filter(|p| p.lead == lead && p.time() == t)
        .filter_map(|p| {
            let key = pierce_core::graph::NodeKey { station: p.station.clone(), sat: p.sat.clone() };
            windows.ipp(t, &key).map(|(la, lo)| (la, lo, p.p))
        })
        .collect()
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from("lat_deg,lon_deg,value\n");
    for c in cells {
        let _ = writeln!(out, "{:.2},{:.2},{:.6}", c.lat_deg, c.lon_deg, c.value);
    }
    out
}
