//! Scored forecast positions and the metric tables built from them.

use std::fmt::Write as _;
use std::sync::Arc;

use pierce_core::geo::TimeStamp;
use pierce_core::qc::NodeLabel;
use pierce_core::windowing::{collate, Sample};
use pierce_nn::train::SampleSource;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::forecaster::Forecaster;
use crate::metrics::{brier_score, brier_skill, pr_auc, roc_auc, Contingency, DEFAULT_THRESHOLD};

pub const UNDEFINED: &str = "undefined";

/// One forecast position where the node exists (`M_pred = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint {
    pub anchor: TimeStamp,
    /// 1-based forecast step.
    pub lead: usize,
    pub station: Arc<str>,
    pub sat: Arc<str>,
    pub p: f64,
    pub code: Option<NodeLabel>,
    pub target: f64,
    /// Counted by the metrics (`M_valid = 1`).
    pub valid: bool,
    pub new: bool,
    pub dropped: bool,
}

impl ScoredPoint {
    pub fn time(&self) -> TimeStamp {
        self.anchor.offset(self.lead as i64 * pierce_core::features::MODEL_CADENCE_S)
    }

    pub fn retained(&self) -> bool {
        !self.new && !self.dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    New,
    Dropped,
    Retained,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::All, Subset::New, Subset::Dropped, Subset::Retained];

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::New => "new",
            Subset::Dropped => "dropped",
            Subset::Retained => "retained",
        }
    }

    pub fn contains(self, p: &ScoredPoint) -> bool {
        match self {
            Subset::All => true,
            Subset::New => p.new,
            Subset::Dropped => p.dropped && !p.new,
            Subset::Retained => p.retained(),
        }
    }
}

fn sample_points(s: &Sample, pred: &[f64], n_max: usize, m: usize, b: usize) -> Vec<ScoredPoint> {
    let n = s.n();
    let mut out = Vec::new();
    for k in 0..s.t_out {
        for v in 0..n {
            let row = k * n + v;
            if s.masks.m_pred[row] == 0.0 {
                continue;
            }
            out.push(ScoredPoint {
                anchor: s.anchor,
                lead: k + 1,
                station: s.keys[v].station.clone(),
                sat: s.keys[v].sat.clone(),
                p: pred[k * m + b * n_max + v],
                code: s.label_codes[row],
                target: s.labels[row],
                valid: s.masks.m_valid[row] > 0.0,
                new: s.masks.m_new[row] > 0.0,
                dropped: s.dropped[v],
            });
        }
    }
    out
}

/// Runs `f` over every window of `src` in batches of `batch_size`.
pub fn score_source(f: &dyn Forecaster, src: &dyn SampleSource, batch_size: usize) -> Result<Vec<ScoredPoint>> {
    let idx: Vec<usize> = (0..src.len()).collect();
    let parts: Vec<Result<Vec<ScoredPoint>>> = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let samples = chunk.iter().map(|&i| src.get(i)).collect::<pierce_nn::Result<Vec<_>>>()?;
            let batch = collate(&samples)?;
            let pred = f.predict(&batch)?;
            let m = batch.m();
            Ok(samples
                .iter()
                .enumerate()
                .flat_map(|(b, s)| sample_points(s, &pred, batch.n_max, m, b))
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: usize,
    pub events: usize,
    pub bss: Option<f64>,
    pub brier: Option<f64>,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub pod: Option<f64>,
    pub far: Option<f64>,
    pub csi: Option<f64>,
}

impl MetricSet {
    pub fn compute(p: &[f64], y: &[f64]) -> Self {
        let c = Contingency::from_scores(p, y, DEFAULT_THRESHOLD);
        Self {
            n: p.len(),
            events: y.iter().filter(|v| **v > 0.5).count(),
            bss: brier_skill(p, y).ok(),
            brier: brier_score(p, y).ok(),
            roc_auc: roc_auc(p, y).ok(),
            pr_auc: pr_auc(p, y).ok(),
            pod: c.pod(),
            far: c.far(),
            csi: c.csi(),
        }
    }

    /// Metrics over the valid points selected by `keep`.
    pub fn over<'a>(points: impl IntoIterator<Item = &'a ScoredPoint>, keep: impl Fn(&ScoredPoint) -> bool) -> Self {
        let (p, y): (Vec<f64>, Vec<f64>) = points.into_iter().filter(|q| q.valid && keep(q)).map(|q| (q.p, q.target)).unzip();
        Self::compute(&p, &y)
    }

    pub const CSV_HEADER: &'static str = "n,events,bss,brier,roc_auc,pr_auc,pod,far,csi";

    pub fn csv_fields(&self) -> String {
        let f = [self.bss, self.brier, self.roc_auc, self.pr_auc, self.pod, self.far, self.csi].map(fmt_metric);
        format!("{},{},{}", self.n, self.events, f.join(","))
    }
}

pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => UNDEFINED.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub forecaster: String,
    pub subsets: Vec<(Subset, MetricSet)>,
    /// Per subset, metrics at leads `1..=t_out`.
    pub per_lead: Vec<(Subset, Vec<MetricSet>)>,
}

impl MetricsReport {
    pub fn from_points(forecaster: &str, points: &[ScoredPoint], t_out: usize) -> Self {
        let subsets = Subset::ALL.map(|s| (s, MetricSet::over(points, |p| s.contains(p)))).to_vec();
        let per_lead = Subset::ALL
            .map(|s| {
                let mut by_lead: Vec<Vec<&ScoredPoint>> = vec![Vec::new(); t_out];
                for p in points.iter().filter(|p| p.lead >= 1 && p.lead <= t_out) {
                    by_lead[p.lead - 1].push(p);
                }
                (s, by_lead.into_iter().map(|v| MetricSet::over(v, |p| s.contains(p))).collect())
            })
            .to_vec();
        Self { forecaster: forecaster.to_string(), subsets, per_lead }
    }

    pub fn subset(&self, s: Subset) -> &MetricSet {
        &self.subsets.iter().find(|(k, _)| *k == s).expect("all subsets present").1
    }

    pub fn lead_curve(&self, s: Subset) -> &[MetricSet] {
        &self.per_lead.iter().find(|(k, _)| *k == s).expect("all subsets present").1
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "forecaster: {}", self.forecaster);
        for (s, m) in &self.subsets {
            let _ = writeln!(out, "[{}]", s.name());
            let _ = writeln!(out, "  positions = {}", m.n);
            let _ = writeln!(out, "  events = {}", m.events);
            for (k, v) in [("bss", m.bss), ("brier", m.brier), ("roc_auc", m.roc_auc), ("pr_auc", m.pr_auc), ("pod", m.pod), ("far", m.far), ("csi", m.csi)] {
                let _ = writeln!(out, "  {k} = {}", fmt_metric(v));
            }
        }
        out
    }

    pub fn subsets_csv(&self) -> String {
        let mut out = format!("forecaster,subset,{}\n", MetricSet::CSV_HEADER);
        for (s, m) in &self.subsets {
            let _ = writeln!(out, "{},{},{}", self.forecaster, s.name(), m.csv_fields());
        }
        out
    }

    pub fn lead_csv(&self) -> String {
        let mut out = format!("forecaster,subset,lead,{}\n", MetricSet::CSV_HEADER);
        for (s, curve) in &self.per_lead {
            for (k, m) in curve.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", self.forecaster, s.name(), k + 1, m.csv_fields());
            }
        }
        out
    }
}
