//! Event segmentation of ROTI series and zero-baseline cross-validation
//! into four-way labels, plus the chronological split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::{FeatureRow, MODEL_CADENCE_S};
use crate::geo::TimeStamp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcConfig {
    pub quiet_baseline: f64,
    pub peak_threshold: f64,
    pub min_overlap_fraction: f64,
    /// B must cover more than this fraction of a segment for a
    /// disagreement to count as invalid.
    pub min_coverage_fraction: f64,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            quiet_baseline: 0.15,
            peak_threshold: 0.3,
            min_overlap_fraction: 0.5,
            min_coverage_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSegment {
    pub station_id: Arc<str>,
    pub satellite_id: Arc<str>,
    pub start: TimeStamp,
    pub end: TimeStamp,
    pub peak_roti_tecu_per_min: f64,
    pub peak_time: TimeStamp,
}

impl EventSegment {
    pub fn epochs(&self) -> usize {
        ((self.end.0 - self.start.0) / MODEL_CADENCE_S) as usize + 1
    }

    pub fn contains(&self, t: TimeStamp) -> bool {
        t >= self.start && t <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeLabel {
    Confirmed,
    Quiet,
    Unverified,
    Invalid,
}

impl NodeLabel {
    pub fn value(self) -> i8 {
        match self {
            NodeLabel::Confirmed => 1,
            NodeLabel::Quiet => 0,
            NodeLabel::Unverified => -1,
            NodeLabel::Invalid => -2,
        }
    }

    pub fn from_value(v: i8) -> Option<Self> {
        match v {
            1 => Some(NodeLabel::Confirmed),
            0 => Some(NodeLabel::Quiet),
            -1 => Some(NodeLabel::Unverified),
            -2 => Some(NodeLabel::Invalid),
            _ => None,
        }
    }

    /// Confirmed or quiet: usable as a training target.
    pub fn is_valid(self) -> bool {
        matches!(self, NodeLabel::Confirmed | NodeLabel::Quiet)
    }

    pub fn is_ambiguous(self) -> bool {
        !self.is_valid()
    }

    pub fn target(self) -> f64 {
        if self == NodeLabel::Confirmed {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl Serialize for NodeLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for NodeLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i8::deserialize(d)?;
        NodeLabel::from_value(v)
            .ok_or_else(|| serde::de::Error::custom(format!("label {v} not in {{1,0,-1,-2}}")))
    }
}

/// Maximal runs above the quiet baseline, cut at gaps in the 5-minute
/// grid, keeping those whose peak exceeds the threshold. `series` must be
/// sorted by time.
pub fn detect_segments(
    station: &Arc<str>,
    sat: &Arc<str>,
    series: &[(TimeStamp, f64)],
    cfg: &QcConfig,
) -> Vec<EventSegment> {
    let mut out = Vec::new();
    let mut run: Option<EventSegment> = None;
    let mut prev_t: Option<TimeStamp> = None;
    let close = |run: &mut Option<EventSegment>, out: &mut Vec<EventSegment>| {
        if let Some(seg) = run.take() {
            if seg.peak_roti_tecu_per_min > cfg.peak_threshold {
                out.push(seg);
            }
        }
    };
    for &(t, v) in series {
        if prev_t.is_some_and(|p| t.0 - p.0 != MODEL_CADENCE_S) {
            close(&mut run, &mut out);
        }
        prev_t = Some(t);
        if v > cfg.quiet_baseline {
            match run.as_mut() {
                Some(seg) => {
                    seg.end = t;
                    if v > seg.peak_roti_tecu_per_min {
                        seg.peak_roti_tecu_per_min = v;
                        seg.peak_time = t;
                    }
                }
                None => {
                    run = Some(EventSegment {
                        station_id: station.clone(),
                        satellite_id: sat.clone(),
                        start: t,
                        end: t,
                        peak_roti_tecu_per_min: v,
                        peak_time: t,
                    })
                }
            }
        } else {
            close(&mut run, &mut out);
        }
    }
    close(&mut run, &mut out);
    out
}

/// Labels each segment of station A against station B's segments on the
/// same satellite. `coverage_b` holds the epochs where B has data.
pub fn cross_validate(
    segs_a: &[EventSegment],
    segs_b: &[EventSegment],
    coverage_b: &BTreeSet<TimeStamp>,
    cfg: &QcConfig,
) -> Vec<NodeLabel> {
    segs_a
        .iter()
        .map(|a| {
            let n = a.epochs() as f64;
            let best = segs_b
                .iter()
                .map(|b| {
                    let lo = a.start.max(b.start);
                    let hi = a.end.min(b.end);
                    if hi < lo {
                        0.0
                    } else {
                        ((hi.0 - lo.0) / MODEL_CADENCE_S + 1) as f64 / n
                    }
                })
                .fold(0.0, f64::max);
            if best >= cfg.min_overlap_fraction {
                return NodeLabel::Confirmed;
            }
            let covered = coverage_b.range(a.start..=a.end).count() as f64 / n;
            if covered <= cfg.min_coverage_fraction {
                NodeLabel::Unverified
            } else {
                NodeLabel::Invalid
            }
        })
        .collect()
}

/// Per-epoch labels of station A's series; `other` is B's series on the
/// same satellite, if B exists at all.
pub fn label_link(
    station: &Arc<str>,
    sat: &Arc<str>,
    series_a: &[(TimeStamp, f64)],
    series_b: Option<&[(TimeStamp, f64)]>,
    cfg: &QcConfig,
) -> Vec<(TimeStamp, NodeLabel)> {
    let segs_a = detect_segments(station, sat, series_a, cfg);
    let (segs_b, coverage_b) = match series_b {
        Some(b) => (
            detect_segments(station, sat, b, cfg),
            b.iter().map(|(t, _)| *t).collect(),
        ),
        None => (Vec::new(), BTreeSet::new()),
    };
    let labels = cross_validate(&segs_a, &segs_b, &coverage_b, cfg);
    let mut seg_iter = segs_a.iter().zip(labels).peekable();
    series_a
        .iter()
        .map(|&(t, _)| {
            while seg_iter.peek().is_some_and(|(s, _)| s.end < t) {
                seg_iter.next();
            }
            let label = match seg_iter.peek() {
                Some((s, l)) if s.contains(t) => *l,
                _ => NodeLabel::Quiet,
            };
            (t, label)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub t_s: TimeStamp,
    pub station: Arc<str>,
    pub sat: Arc<str>,
    pub label: NodeLabel,
}

/// Labels every feature row. Stations are cross-validated against their
/// listed zero-baseline partner; a station without a partner yields
/// unverified events.
pub fn label_features(
    rows: &[FeatureRow],
    pairs: &[(String, String)],
    cfg: &QcConfig,
) -> Vec<LabelRow> {
    let mut series: BTreeMap<(Arc<str>, Arc<str>), Vec<(TimeStamp, f64)>> = BTreeMap::new();
    for r in rows {
        series
            .entry((r.station.clone(), r.sat.clone()))
            .or_default()
            .push((r.t_s, r.roti_tecu_per_min));
    }
    for s in series.values_mut() {
        s.sort_by_key(|x| x.0);
    }
    let partner = |st: &str| -> Option<&str> {
        pairs.iter().find_map(|(a, b)| {
            if a == st {
                Some(b.as_str())
            } else if b == st {
                Some(a.as_str())
            } else {
                None
            }
        })
    };
    let empty: Vec<(TimeStamp, f64)> = Vec::new();
    let keys: Vec<&(Arc<str>, Arc<str>)> = series.keys().collect();
    let mut out: Vec<LabelRow> = keys
        .par_iter()
        .flat_map_iter(|(st, sat)| {
            let a = &series[&(st.clone(), sat.clone())];
            let b = partner(st).map(|p| {
                series
                    .get(&(Arc::from(p), sat.clone()))
                    .map(Vec::as_slice)
                    .unwrap_or(empty.as_slice())
            });
            label_link(st, sat, a, b, cfg).into_iter().map(move |(t, label)| LabelRow {
                t_s: t,
                station: st.clone(),
                sat: sat.clone(),
                label,
            })
        })
        .collect();
    out.sort_by(|a, b| (a.t_s, &a.station, &a.sat).cmp(&(b.t_s, &b.station, &b.sat)));
    out
}

/// Counts per label, in the layout of a dataset summary table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub timesteps: usize,
    pub nodes: usize,
    pub confirmed: usize,
    pub quiet: usize,
    pub unverified: usize,
    pub invalid: usize,
}

impl LabelStats {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a LabelRow>) -> Self {
        let mut s = LabelStats::default();
        let mut times = BTreeSet::new();
        for r in rows {
            times.insert(r.t_s);
            s.nodes += 1;
            match r.label {
                NodeLabel::Confirmed => s.confirmed += 1,
                NodeLabel::Quiet => s.quiet += 1,
                NodeLabel::Unverified => s.unverified += 1,
                NodeLabel::Invalid => s.invalid += 1,
            }
        }
        s.timesteps = times.len();
        s
    }

    /// Confirmed share of confirmed and quiet nodes.
    pub fn event_rate(&self) -> f64 {
        self.confirmed as f64 / (self.confirmed + self.quiet).max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub gap_steps: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15, gap_steps: 24 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A contiguous block of timesteps plus the steps removed from supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRange {
    pub start: TimeStamp,
    pub end: TimeStamp,
    pub excluded: BTreeSet<TimeStamp>,
}

impl SplitRange {
    pub fn contains(&self, t: TimeStamp) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn supervised(&self, t: TimeStamp) -> bool {
        self.contains(t) && !self.excluded.contains(&t)
    }

    pub fn steps(&self) -> usize {
        ((self.end.0 - self.start.0) / MODEL_CADENCE_S) as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: SplitRange,
    pub val: SplitRange,
    pub test: SplitRange,
}

impl Splits {
    pub fn get(&self, s: Split) -> &SplitRange {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Chronological split of the grid `first..=last` with gaps at both
/// boundaries. In train and val, timesteps where every non-quiet label is
/// ambiguous are excluded from supervision; test keeps everything.
pub fn split_and_filter(
    first: TimeStamp,
    last: TimeStamp,
    labels: &[LabelRow],
    cfg: &SplitConfig,
) -> Result<Splits> {
    let ratios = [cfg.train, cfg.val, cfg.test];
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!("ratios {ratios:?} must be positive and sum to 1")));
    }
    if last < first {
        return Err(Error::InvalidSplit("empty time range".into()));
    }
    let n = ((last.0 - first.0) / MODEL_CADENCE_S) as usize + 1;
    let usable = n
        .checked_sub(2 * cfg.gap_steps)
        .ok_or_else(|| Error::InvalidSplit(format!("{n} steps cannot hold two gaps of {}", cfg.gap_steps)))?;
    let n_train = (cfg.train * usable as f64).round() as usize;
    let n_val = (cfg.val * usable as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= usable {
        return Err(Error::InvalidSplit(format!(
            "split boundaries overlap for {n} steps with gap {}",
            cfg.gap_steps
        )));
    }
    let at = |i: usize| first.offset(i as i64 * MODEL_CADENCE_S);
    let val_start = n_train + cfg.gap_steps;
    let test_start = val_start + n_val + cfg.gap_steps;

    let mut confirmed = BTreeSet::new();
    let mut ambiguous = BTreeSet::new();
    for r in labels {
        match r.label {
            NodeLabel::Confirmed => {
                confirmed.insert(r.t_s);
            }
            NodeLabel::Unverified | NodeLabel::Invalid => {
                ambiguous.insert(r.t_s);
            }
            NodeLabel::Quiet => {}
        }
    }
    let filtered = |start: TimeStamp, end: TimeStamp| SplitRange {
        start,
        end,
        excluded: ambiguous
            .range(start..=end)
            .filter(|t| !confirmed.contains(t))
            .copied()
            .collect(),
    };
    Ok(Splits {
        train: filtered(at(0), at(n_train - 1)),
        val: filtered(at(val_start), at(val_start + n_val - 1)),
        test: SplitRange { start: at(test_start), end: at(n - 1), excluded: BTreeSet::new() },
    })
}

pub fn write_labels<W: Write>(w: W, rows: &[LabelRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_labels<R: Read>(r: R) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
