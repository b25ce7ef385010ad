//! Training windows over a unified node index, masks, and disjoint-graph
//! batching.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MODEL_CADENCE_S;
use crate::graph::{GraphSnapshot, NodeKey, NormStats, EDGE_DIM, EPH_DIM, OBS_DIM};
use crate::geo::TimeStamp;
use crate::qc::{NodeLabel, SplitRange};

pub const HIST_DIM: usize = OBS_DIM + EPH_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub t_in: usize,
    pub t_out: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { t_in: 24, t_out: 24 }
    }
}

impl WindowConfig {
    pub fn len(&self) -> usize {
        self.t_in + self.t_out
    }
}

/// Edge list of one step, with normalized edge features (`EDGE_DIM` per edge).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepGraph {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub feats: Vec<f64>,
}

impl StepGraph {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// 0/1 masks stored as floats, row-major `[T, N]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskSet {
    /// Present and observed.
    pub m_hist: Vec<f64>,
    /// Present in the snapshot, observed or not.
    pub hist_present: Vec<f64>,
    pub m_pred: Vec<f64>,
    pub m_valid: Vec<f64>,
    pub m_new: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Last history step.
    pub anchor: TimeStamp,
    pub t_in: usize,
    pub t_out: usize,
    pub keys: Vec<NodeKey>,
    /// `[t_in, n, HIST_DIM]`: normalized `x_obs ‖ x_eph`.
    pub x_hist: Vec<f64>,
    /// `[t_out, n, EPH_DIM]`.
    pub x_pred: Vec<f64>,
    pub hist_graphs: Vec<StepGraph>,
    pub pred_graphs: Vec<StepGraph>,
    /// `[t_out, n]` binary targets (confirmed = 1).
    pub labels: Vec<f64>,
    pub label_codes: Vec<Option<NodeLabel>>,
    pub hist_labels: Vec<Option<NodeLabel>>,
    pub masks: MaskSet,
    /// Nodes whose history was removed by simulated dropout.
    pub dropped: Vec<bool>,
}

impl Sample {
    pub fn n(&self) -> usize {
        self.keys.len()
    }

    /// True for nodes that have at least one observed history step.
    pub fn has_history(&self, v: usize) -> bool {
        let n = self.n();
        (0..self.t_in).any(|t| self.masks.m_hist[t * n + v] > 0.0)
    }

    pub fn valid_positions(&self) -> usize {
        self.masks.m_valid.iter().filter(|m| **m > 0.0).count()
    }
}

fn step_graph(snap: &GraphSnapshot, index: &[usize], norm: &NormStats) -> StepGraph {
    let mut g = StepGraph {
        src: Vec::with_capacity(snap.edges.len()),
        dst: Vec::with_capacity(snap.edges.len()),
        feats: Vec::with_capacity(snap.edges.len() * EDGE_DIM),
    };
    for (&(s, d), f) in snap.edges.iter().zip(&snap.edge_feats) {
        g.src.push(index[s as usize] as u32);
        g.dst.push(index[d as usize] as u32);
        g.feats.extend_from_slice(&norm.edge.apply(f));
    }
    g
}

/// Builds one sample from `t_in + t_out` consecutive snapshots. Targets are
/// supervised only where `supervised(t)` holds (split filtering).
pub fn build_sample(
    snaps: &[GraphSnapshot],
    cfg: &WindowConfig,
    norm: &NormStats,
    supervised: &dyn Fn(TimeStamp) -> bool,
) -> Result<Sample> {
    if snaps.len() != cfg.len() {
        return Err(Error::WindowLength { expected: cfg.len(), found: snaps.len() });
    }
    for w in snaps.windows(2) {
        let expected = w[0].t_s.0 + MODEL_CADENCE_S;
        if w[1].t_s.0 != expected {
            return Err(Error::NonConsecutive { expected, found: w[1].t_s.0 });
        }
    }
    let keys: Vec<NodeKey> = snaps
        .iter()
        .flat_map(|s| s.nodes.iter().map(|n| n.key.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = keys.len();
    let (t_in, t_out) = (cfg.t_in, cfg.t_out);
    let mut s = Sample {
        anchor: snaps[t_in - 1].t_s,
        t_in,
        t_out,
        x_hist: vec![0.0; t_in * n * HIST_DIM],
        x_pred: vec![0.0; t_out * n * EPH_DIM],
        hist_graphs: Vec::with_capacity(t_in),
        pred_graphs: Vec::with_capacity(t_out),
        labels: vec![0.0; t_out * n],
        label_codes: vec![None; t_out * n],
        hist_labels: vec![None; t_in * n],
        masks: MaskSet {
            m_hist: vec![0.0; t_in * n],
            hist_present: vec![0.0; t_in * n],
            m_pred: vec![0.0; t_out * n],
            m_valid: vec![0.0; t_out * n],
            m_new: vec![0.0; t_out * n],
        },
        dropped: vec![false; n],
        keys,
    };
    let mut in_history = vec![false; n];
    for (t, snap) in snaps.iter().enumerate() {
        let index: Vec<usize> = snap
            .nodes
            .iter()
            .map(|node| s.keys.binary_search(&node.key).expect("key in union"))
            .collect();
        let graph = step_graph(snap, &index, norm);
        if t < t_in {
            for (node, &v) in snap.nodes.iter().zip(&index) {
                let row = t * n + v;
                in_history[v] = true;
                s.masks.hist_present[row] = 1.0;
                let x = &mut s.x_hist[row * HIST_DIM..(row + 1) * HIST_DIM];
                x[OBS_DIM..].copy_from_slice(&norm.eph.apply(&node.x_eph));
                if let Some(obs) = &node.x_obs {
                    x[..OBS_DIM].copy_from_slice(&norm.obs.apply(obs));
                    s.masks.m_hist[row] = 1.0;
                }
                s.hist_labels[row] = node.label;
            }
            s.hist_graphs.push(graph);
        } else {
            let k = t - t_in;
            let sup = supervised(snap.t_s);
            for (node, &v) in snap.nodes.iter().zip(&index) {
                let row = k * n + v;
                s.masks.m_pred[row] = 1.0;
                s.x_pred[row * EPH_DIM..(row + 1) * EPH_DIM].copy_from_slice(&norm.eph.apply(&node.x_eph));
                s.label_codes[row] = node.label;
                if let Some(l) = node.label {
                    s.labels[row] = l.target();
                    if l.is_valid() && sup {
                        s.masks.m_valid[row] = 1.0;
                    }
                }
            }
            s.pred_graphs.push(graph);
        }
    }
    for k in 0..t_out {
        for v in 0..n {
            if !in_history[v] && s.masks.m_pred[k * n + v] > 0.0 {
                s.masks.m_new[k * n + v] = 1.0;
            }
        }
    }
    Ok(s)
}

/// Start indices of every window of `snaps` (with the given stride) that
/// lies entirely inside `range`.
pub fn window_starts(snaps: &[GraphSnapshot], range: &SplitRange, cfg: &WindowConfig, stride: usize) -> Vec<usize> {
    let len = cfg.len();
    if snaps.len() < len {
        return Vec::new();
    }
    (0..=snaps.len() - len)
        .filter(|&i| range.contains(snaps[i].t_s) && range.contains(snaps[i + len - 1].t_s))
        .step_by(stride.max(1))
        .collect()
}

/// A disjoint union of samples padded to `n_max` nodes each. Row `m` of
/// step `t` is `t * (b * n_max) + (sample * n_max + node)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub n_max: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub sizes: Vec<usize>,
    pub anchors: Vec<TimeStamp>,
    pub keys: Vec<Vec<NodeKey>>,
    pub x_hist: Vec<f64>,
    pub x_pred: Vec<f64>,
    pub hist_graphs: Vec<StepGraph>,
    pub pred_graphs: Vec<StepGraph>,
    pub labels: Vec<f64>,
    pub label_codes: Vec<Option<NodeLabel>>,
    pub hist_labels: Vec<Option<NodeLabel>>,
    pub masks: MaskSet,
    pub dropped: Vec<bool>,
}

impl Batch {
    /// Nodes per step across the batch.
    pub fn m(&self) -> usize {
        self.b * self.n_max
    }
}

fn scatter<T: Clone>(dst: &mut [T], src: &[T], steps: usize, n: usize, n_max: usize, b: usize, bn: usize, width: usize) {
    for t in 0..steps {
        for v in 0..n {
            let from = (t * n + v) * width;
            let to = (t * bn + b * n_max + v) * width;
            dst[to..to + width].clone_from_slice(&src[from..from + width]);
        }
    }
}

fn gather<T: Clone>(src: &[T], steps: usize, n: usize, n_max: usize, b: usize, bn: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(steps * n * width);
    for t in 0..steps {
        for v in 0..n {
            let from = (t * bn + b * n_max + v) * width;
            out.extend_from_slice(&src[from..from + width]);
        }
    }
    out
}

/// Pads and stacks samples, shifting each sample's edges by `b * n_max`.
pub fn collate(samples: &[Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Malformed("cannot collate zero samples".into()))?;
    let (t_in, t_out) = (first.t_in, first.t_out);
    if samples.iter().any(|s| s.t_in != t_in || s.t_out != t_out) {
        return Err(Error::Malformed("samples with different window lengths".into()));
    }
    let b = samples.len();
    let n_max = samples.iter().map(Sample::n).max().unwrap_or(0);
    let bn = b * n_max;
    let mut batch = Batch {
        b,
        n_max,
        t_in,
        t_out,
        sizes: samples.iter().map(Sample::n).collect(),
        anchors: samples.iter().map(|s| s.anchor).collect(),
        keys: samples.iter().map(|s| s.keys.clone()).collect(),
        x_hist: vec![0.0; t_in * bn * HIST_DIM],
        x_pred: vec![0.0; t_out * bn * EPH_DIM],
        hist_graphs: vec![StepGraph::default(); t_in],
        pred_graphs: vec![StepGraph::default(); t_out],
        labels: vec![0.0; t_out * bn],
        label_codes: vec![None; t_out * bn],
        hist_labels: vec![None; t_in * bn],
        masks: MaskSet {
            m_hist: vec![0.0; t_in * bn],
            hist_present: vec![0.0; t_in * bn],
            m_pred: vec![0.0; t_out * bn],
            m_valid: vec![0.0; t_out * bn],
            m_new: vec![0.0; t_out * bn],
        },
        dropped: vec![false; bn],
    };
    for (i, s) in samples.iter().enumerate() {
        let n = s.n();
        scatter(&mut batch.x_hist, &s.x_hist, t_in, n, n_max, i, bn, HIST_DIM);
        scatter(&mut batch.x_pred, &s.x_pred, t_out, n, n_max, i, bn, EPH_DIM);
        scatter(&mut batch.labels, &s.labels, t_out, n, n_max, i, bn, 1);
        scatter(&mut batch.label_codes, &s.label_codes, t_out, n, n_max, i, bn, 1);
        scatter(&mut batch.hist_labels, &s.hist_labels, t_in, n, n_max, i, bn, 1);
        scatter(&mut batch.masks.m_hist, &s.masks.m_hist, t_in, n, n_max, i, bn, 1);
        scatter(&mut batch.masks.hist_present, &s.masks.hist_present, t_in, n, n_max, i, bn, 1);
        scatter(&mut batch.masks.m_pred, &s.masks.m_pred, t_out, n, n_max, i, bn, 1);
        scatter(&mut batch.masks.m_valid, &s.masks.m_valid, t_out, n, n_max, i, bn, 1);
        scatter(&mut batch.masks.m_new, &s.masks.m_new, t_out, n, n_max, i, bn, 1);
        scatter(&mut batch.dropped, &s.dropped, 1, n, n_max, i, bn, 1);
        let off = (i * n_max) as u32;
        for (dst, src) in batch
            .hist_graphs
            .iter_mut()
            .zip(&s.hist_graphs)
            .chain(batch.pred_graphs.iter_mut().zip(&s.pred_graphs))
        {
            dst.src.extend(src.src.iter().map(|x| x + off));
            dst.dst.extend(src.dst.iter().map(|x| x + off));
            dst.feats.extend_from_slice(&src.feats);
        }
    }
    Ok(batch)
}

/// Inverse of [`collate`].
pub fn unpad(batch: &Batch) -> Vec<Sample> {
    let bn = batch.m();
    let (t_in, t_out, n_max) = (batch.t_in, batch.t_out, batch.n_max);
    // Edges were appended sample by sample, so each sample owns a
    // contiguous run per step.
    let split_graphs = |graphs: &[StepGraph]| -> Vec<Vec<StepGraph>> {
        let mut per: Vec<Vec<StepGraph>> = vec![Vec::with_capacity(graphs.len()); batch.b];
        for g in graphs {
            for (i, slot) in per.iter_mut().enumerate() {
                let lo = (i * n_max) as u32;
                let hi = lo + n_max as u32;
                let mut sg = StepGraph::default();
                for e in 0..g.len() {
                    if g.dst[e] >= lo && g.dst[e] < hi {
                        sg.src.push(g.src[e] - lo);
                        sg.dst.push(g.dst[e] - lo);
                        sg.feats.extend_from_slice(&g.feats[e * EDGE_DIM..(e + 1) * EDGE_DIM]);
                    }
                }
                slot.push(sg);
            }
        }
        per
    };
    let mut hist = split_graphs(&batch.hist_graphs).into_iter();
    let mut pred = split_graphs(&batch.pred_graphs).into_iter();
    (0..batch.b)
        .map(|i| {
            let n = batch.sizes[i];
            Sample {
                anchor: batch.anchors[i],
                t_in,
                t_out,
                keys: batch.keys[i].clone(),
                x_hist: gather(&batch.x_hist, t_in, n, n_max, i, bn, HIST_DIM),
                x_pred: gather(&batch.x_pred, t_out, n, n_max, i, bn, EPH_DIM),
                hist_graphs: hist.next().expect("per-sample graphs"),
                pred_graphs: pred.next().expect("per-sample graphs"),
                labels: gather(&batch.labels, t_out, n, n_max, i, bn, 1),
                label_codes: gather(&batch.label_codes, t_out, n, n_max, i, bn, 1),
                hist_labels: gather(&batch.hist_labels, t_in, n, n_max, i, bn, 1),
                masks: MaskSet {
                    m_hist: gather(&batch.masks.m_hist, t_in, n, n_max, i, bn, 1),
                    hist_present: gather(&batch.masks.hist_present, t_in, n, n_max, i, bn, 1),
                    m_pred: gather(&batch.masks.m_pred, t_out, n, n_max, i, bn, 1),
                    m_valid: gather(&batch.masks.m_valid, t_out, n, n_max, i, bn, 1),
                    m_new: gather(&batch.masks.m_new, t_out, n, n_max, i, bn, 1),
                },
                dropped: gather(&batch.dropped, 1, n, n_max, i, bn, 1),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSpec {
    /// Drop this fraction of the nodes that have observed history.
    Fraction(f64),
    /// Drop every node of these stations that has observed history.
    Stations(Vec<String>),
}

/// Removes the observed history of chosen nodes: `x_obs` zeroed and
/// `M_hist` cleared at every history step. Graph structure, ephemeris
/// features, labels and the other masks are untouched.
pub fn simulate_dropout(sample: &Sample, spec: &DropoutSpec, seed: u64) -> Sample {
    let mut out = sample.clone();
    let n = sample.n();
    let candidates: Vec<usize> = (0..n).filter(|&v| sample.has_history(v)).collect();
    let chosen: Vec<usize> = match spec {
        DropoutSpec::Fraction(f) => {
            let k = (f.clamp(0.0, 1.0) * candidates.len() as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (sample.anchor.0 as u64).rotate_left(17));
            let mut c = candidates;
            c.shuffle(&mut rng);
            c.truncate(k);
            c
        }
        DropoutSpec::Stations(names) => candidates
            .into_iter()
            .filter(|&v| names.iter().any(|s| *s == *sample.keys[v].station))
            .collect(),
    };
    for v in chosen {
        out.dropped[v] = true;
        for t in 0..sample.t_in {
            let row = t * n + v;
            out.masks.m_hist[row] = 0.0;
            out.x_hist[row * HIST_DIM..row * HIST_DIM + OBS_DIM].fill(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_snapshot, fit_norm, IppNode};
    use crate::ephemeris::LosLink;
    use crate::geo::GeoPoint;
    use proptest::prelude::*;
    use rand::Rng;

    const T0: i64 = 1_709_251_200;

    fn node(station: &str, sat: &str, lat: f64, lon: f64, observed: bool, label: NodeLabel) -> IppNode {
        let link = LosLink {
            station_id: station.into(),
            satellite_id: sat.into(),
            elevation_deg: 45.0,
            azimuth_deg: 30.0,
            ipp: GeoPoint { lat_deg: lat, lon_deg: lon },
            mag_lat_deg: lat - 9.0,
            mag_lon_deg: lon - 175.0,
            local_solar_time_h: 20.0,
        };
        let mut n = IppNode::from_link(&link, TimeStamp(T0));
        if observed {
            n.x_obs = Some([0.1 + lat.abs() * 0.01, 0.0, 40.0, -10.0, 150.0]);
            n.label = Some(label);
        }
        n
    }

    /// Random sequence of snapshots where each of `sats` links appears over
    /// a random contiguous span.
    fn random_snaps(seed: u64, len: usize, sats: usize) -> Vec<GraphSnapshot> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans: Vec<(usize, usize, f64, f64)> = (0..sats)
            .map(|_| {
                let a = rng.random_range(0..len);
                let b = rng.random_range(a..len);
                (a, b, rng.random_range(-3.0..3.0), rng.random_range(100.0..106.0))
            })
            .collect();
        (0..len)
            .map(|t| {
                let mut nodes = Vec::new();
                for (i, &(a, b, lat, lon)) in spans.iter().enumerate() {
                    if t >= a && t <= b {
                        for st in ["A", "B"] {
                            let obs = rng.random_bool(0.8);
                            let lab = match rng.random_range(0..10) {
                                0 => NodeLabel::Unverified,
                                1 => NodeLabel::Invalid,
                                2 | 3 => NodeLabel::Confirmed,
                                _ => NodeLabel::Quiet,
                            };
                            nodes.push(node(st, &format!("G{i:02}"), lat + 0.01 * t as f64, lon, obs, lab));
                        }
                    }
                }
                build_snapshot(TimeStamp(T0 + t as i64 * 300), nodes, 4)
            })
            .collect()
    }

    fn norm_for(snaps: &[GraphSnapshot]) -> NormStats {
        let mut all = snaps.to_vec();
        all.push(build_snapshot(
            TimeStamp(0),
            vec![
                node("A", "X1", 0.0, 100.0, true, NodeLabel::Quiet),
                node("B", "X1", 1.0, 101.0, true, NodeLabel::Quiet),
            ],
            4,
        ));
        fit_norm(&all).unwrap()
    }

    fn always(_: TimeStamp) -> bool {
        true
    }

    #[test]
    fn mask_examples() {
        let cfg = WindowConfig { t_in: 4, t_out: 4 };
        let snaps: Vec<GraphSnapshot> = (0..8)
            .map(|t| {
                let mut nodes = vec![node("A", "G01", 0.0, 100.0, true, NodeLabel::Quiet)];
                if t >= 5 {
                    nodes.push(node("A", "G02", 1.0, 101.0, false, NodeLabel::Quiet));
                }
                if t == 6 {
                    nodes.push(node("A", "G03", 2.0, 101.0, true, NodeLabel::Unverified));
                }
                build_snapshot(TimeStamp(T0 + t * 300), nodes, 4)
            })
            .collect();
        let s = build_sample(&snaps, &cfg, &norm_for(&snaps), &always).unwrap();
        assert_eq!(s.n(), 3);
        assert_eq!(s.anchor, TimeStamp(T0 + 900));
        // G01 everywhere.
        assert!((0..4).all(|t| s.masks.m_hist[t * 3] == 1.0));
        assert!((0..4).all(|k| s.masks.m_new[k * 3] == 0.0 && s.masks.m_valid[k * 3] == 1.0));
        // G02 appears at forecast steps 1..=3, unobserved.
        assert_eq!((0..4).map(|k| s.masks.m_new[k * 3 + 1]).collect::<Vec<_>>(), vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(s.masks.m_valid[3 + 1], 0.0);
        // Unverified node: predicted but not valid.
        assert_eq!(s.masks.m_pred[2 * 3 + 2], 1.0);
        assert_eq!(s.masks.m_valid[2 * 3 + 2], 0.0);
        let mut gap = snaps.clone();
        gap.remove(3);
        gap.push(snaps[7].clone());
        assert!(matches!(build_sample(&gap, &cfg, &norm_for(&snaps), &always), Err(Error::NonConsecutive { .. })));
        assert!(build_sample(&snaps[..7], &cfg, &norm_for(&snaps), &always).is_err());
    }

    #[test]
    fn supervision_filter_clears_valid() {
        let cfg = WindowConfig { t_in: 4, t_out: 4 };
        let snaps = random_snaps(3, 8, 5);
        let norm = norm_for(&snaps);
        let s = build_sample(&snaps, &cfg, &norm, &|t| t.0 != T0 + 5 * 300).unwrap();
        let n = s.n();
        assert!((0..n).all(|v| s.masks.m_valid[n + v] == 0.0));
    }

    #[test]
    fn collate_offsets() {
        let cfg = WindowConfig { t_in: 3, t_out: 3 };
        let a = random_snaps(1, 6, 5);
        let b = random_snaps(2, 6, 9);
        let norm = norm_for(&a);
        let sa = build_sample(&a, &cfg, &norm, &always).unwrap();
        let sb = build_sample(&b, &cfg, &norm, &always).unwrap();
        let single = collate(std::slice::from_ref(&sa)).unwrap();
        assert_eq!(single.x_hist, sa.x_hist);
        assert_eq!(single.hist_graphs, sa.hist_graphs);
        let batch = collate(&[sa.clone(), sb.clone()]).unwrap();
        let n_max = sa.n().max(sb.n()) as u32;
        assert_eq!(batch.n_max as u32, n_max);
        for (t, g) in batch.hist_graphs.iter().enumerate() {
            let ea = sa.hist_graphs[t].len();
            assert!(g.dst[..ea].iter().chain(&g.src[..ea]).all(|&x| x < n_max));
            assert!(g.dst[ea..].iter().chain(&g.src[ea..]).all(|&x| x >= n_max && x < 2 * n_max));
        }
        assert!(collate(&[]).is_err());
    }

    #[test]
    fn dropout_cases() {
        let cfg = WindowConfig { t_in: 4, t_out: 4 };
        let snaps = random_snaps(7, 8, 8);
        let s = build_sample(&snaps, &cfg, &norm_for(&snaps), &always).unwrap();
        assert_eq!(simulate_dropout(&s, &DropoutSpec::Fraction(0.0), 1), s);
        let all = simulate_dropout(&s, &DropoutSpec::Fraction(1.0), 1);
        assert!(all.masks.m_hist.iter().all(|m| *m == 0.0));
        assert_eq!(all.hist_graphs, s.hist_graphs);
        let st = simulate_dropout(&s, &DropoutSpec::Stations(vec!["B".into()]), 1);
        for v in 0..s.n() {
            assert_eq!(st.dropped[v], &*s.keys[v].station == "B" && s.has_history(v));
        }
    }

    proptest! {
        #[test]
        fn new_nodes_have_no_history(seed in 0u64..300) {
            let cfg = WindowConfig { t_in: 5, t_out: 5 };
            let snaps = random_snaps(seed, 10, 7);
            let s = build_sample(&snaps, &cfg, &norm_for(&snaps), &always).unwrap();
            let n = s.n();
            for v in 0..n {
                let new = (0..5).any(|k| s.masks.m_new[k * n + v] > 0.0);
                let hist: f64 = (0..5).map(|t| s.masks.m_hist[t * n + v]).sum();
                if new {
                    prop_assert_eq!(hist, 0.0);
                }
                for k in 0..5 {
                    prop_assert!(s.masks.m_valid[k * n + v] <= s.masks.m_pred[k * n + v]);
                }
            }
        }

        #[test]
        fn collate_round_trips(seeds in proptest::collection::vec(0u64..1000, 1..5)) {
            let cfg = WindowConfig { t_in: 3, t_out: 3 };
            let samples: Vec<Sample> = seeds
                .iter()
                .map(|&sd| {
                    let snaps = random_snaps(sd, 6, 1 + (sd % 7) as usize);
                    build_sample(&snaps, &cfg, &norm_for(&snaps), &always).unwrap()
                })
                .collect();
            let batch = collate(&samples).unwrap();
            let bn = batch.m() as u32;
            for g in batch.hist_graphs.iter().chain(&batch.pred_graphs) {
                prop_assert!(g.src.iter().chain(&g.dst).all(|&x| x < bn));
            }
            let total: usize = samples.iter().map(|s| s.hist_graphs.iter().map(StepGraph::len).sum::<usize>()).sum();
            prop_assert_eq!(total, batch.hist_graphs.iter().map(StepGraph::len).sum::<usize>());
            prop_assert_eq!(unpad(&batch), samples);
        }

        #[test]
        fn dropout_preserves_structure(seed in 0u64..300, f in 0.0f64..1.0) {
            let cfg = WindowConfig { t_in: 4, t_out: 4 };
            let snaps = random_snaps(seed, 8, 6);
            let s = build_sample(&snaps, &cfg, &norm_for(&snaps), &always).unwrap();
            let d = simulate_dropout(&s, &DropoutSpec::Fraction(f), seed);
            prop_assert_eq!(&d.masks.m_pred, &s.masks.m_pred);
            prop_assert_eq!(&d.masks.m_valid, &s.masks.m_valid);
            prop_assert_eq!(&d.masks.m_new, &s.masks.m_new);
            prop_assert_eq!(&d.masks.hist_present, &s.masks.hist_present);
            prop_assert_eq!(&d.labels, &s.labels);
            prop_assert_eq!(&d.hist_graphs, &s.hist_graphs);
            prop_assert_eq!(&d.pred_graphs, &s.pred_graphs);
            prop_assert_eq!(&d.x_pred, &s.x_pred);
            let n = s.n();
            for v in 0..n {
                for t in 0..4 {
                    let row = t * n + v;
                    prop_assert_eq!(&d.x_hist[row * HIST_DIM + OBS_DIM..(row + 1) * HIST_DIM], &s.x_hist[row * HIST_DIM + OBS_DIM..(row + 1) * HIST_DIM]);
                    if d.dropped[v] {
                        prop_assert_eq!(d.masks.m_hist[row], 0.0);
                    } else {
                        prop_assert_eq!(d.masks.m_hist[row], s.masks.m_hist[row]);
                    }
                }
            }
        }
    }
}
