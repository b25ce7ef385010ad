use std::collections::BTreeMap;
use std::sync::Arc;

use pierce_core::geo::TimeStamp;
use pierce_core::graph::{GraphSnapshot, NodeKey, NormStats};
use pierce_core::qc::{LabelRow, NodeLabel, SplitRange};
use pierce_core::windowing::{build_sample, simulate_dropout, window_starts, DropoutSpec, Sample, WindowConfig};
use pierce_nn::train::SampleSource;

/// Windows of one split, built from shared snapshots on demand.
#[derive(Clone)]
pub struct WindowSet {
    snaps: Arc<Vec<GraphSnapshot>>,
    norm: Arc<NormStats>,
    cfg: WindowConfig,
    range: SplitRange,
    starts: Vec<usize>,
    dropout: Option<(DropoutSpec, u64)>,
}

impl WindowSet {
    pub fn new(snaps: Arc<Vec<GraphSnapshot>>, norm: Arc<NormStats>, cfg: WindowConfig, range: SplitRange, stride: usize) -> Self {
        let starts = window_starts(&snaps, &range, &cfg, stride);
        Self { snaps, norm, cfg, range, starts, dropout: None }
    }

    pub fn with_dropout(&self, spec: DropoutSpec, seed: u64) -> Self {
        Self { dropout: Some((spec, seed)), ..self.clone() }
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn snapshots(&self) -> &[GraphSnapshot] {
        &self.snaps
    }

    /// IPP latitude and longitude of `key` at `t`.
    pub fn ipp(&self, t: TimeStamp, key: &NodeKey) -> Option<(f64, f64)> {
        let i = self.snaps.binary_search_by_key(&t, |s| s.t_s).ok()?;
        let snap = &self.snaps[i];
        let j = snap.nodes.binary_search_by(|n| n.key.cmp(key)).ok()?;
        Some((snap.nodes[j].lat_deg, snap.nodes[j].lon_deg))
    }
}

impl SampleSource for WindowSet {
    fn len(&self) -> usize {
        self.starts.len()
    }

    fn get(&self, i: usize) -> pierce_nn::Result<Sample> {
        let s = self.starts[i];
        let range = &self.range;
        let sample = build_sample(&self.snaps[s..s + self.cfg.len()], &self.cfg, &self.norm, &|t| range.supervised(t))?;
        Ok(match &self.dropout {
            Some((spec, seed)) => simulate_dropout(&sample, spec, *seed),
            None => sample,
        })
    }
}

/// Event rate over the confirmed and quiet labels of supervised steps.
pub fn event_rate(labels: &[LabelRow], range: &SplitRange) -> f64 {
    let mut counts: BTreeMap<bool, usize> = BTreeMap::new();
    for r in labels.iter().filter(|r| r.label.is_valid() && range.supervised(r.t_s)) {
        *counts.entry(r.label == NodeLabel::Confirmed).or_default() += 1;
    }
    let pos = counts.get(&true).copied().unwrap_or(0);
    let total = pos + counts.get(&false).copied().unwrap_or(0);
    if total == 0 {
        0.0
    } else {
        pos as f64 / total as f64
    }
}
