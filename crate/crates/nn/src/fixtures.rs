//! Random well-formed samples for tests and benchmarks.

use std::sync::Arc;

use pierce_core::geo::TimeStamp;
use pierce_core::graph::{NodeKey, EDGE_DIM, EPH_DIM, OBS_DIM};
use pierce_core::qc::NodeLabel;
use pierce_core::windowing::{MaskSet, Sample, StepGraph, HIST_DIM};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn step_graph(rng: &mut ChaCha8Rng, present: &[usize]) -> StepGraph {
    let mut g = StepGraph::default();
    for &d in present {
        let mut others: Vec<usize> = present.iter().copied().filter(|&s| s != d).collect();
        others.shuffle(rng);
        for &s in others.iter().take(2) {
            g.src.push(s as u32);
            g.dst.push(d as u32);
            g.feats.extend((0..EDGE_DIM).map(|_| rng.random_range(0.0..1.0)));
        }
    }
    g
}

/// Sample with `n` nodes. Node 0 is always new (absent from the history
/// window); the rest are present with probability 0.8 per step and
/// observed with probability 0.85 when present.
pub fn random_sample(rng: &mut ChaCha8Rng, n: usize, t_in: usize, t_out: usize) -> Sample {
    let keys: Vec<NodeKey> = (0..n)
        .map(|i| NodeKey { station: Arc::from("FX01"), sat: Arc::from(format!("G{i:02}").as_str()) })
        .collect();
    let mut s = Sample {
        anchor: TimeStamp(300 * t_in as i64),
        t_in,
        t_out,
        keys,
        x_hist: vec![0.0; t_in * n * HIST_DIM],
        x_pred: vec![0.0; t_out * n * EPH_DIM],
        hist_graphs: Vec::new(),
        pred_graphs: Vec::new(),
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
    };
    for t in 0..t_in {
        let present: Vec<usize> = (1..n).filter(|_| rng.random_bool(0.8)).collect();
        for &v in &present {
            let row = t * n + v;
            s.masks.hist_present[row] = 1.0;
            let x = &mut s.x_hist[row * HIST_DIM..(row + 1) * HIST_DIM];
            for e in &mut x[OBS_DIM..] {
                *e = rng.random_range(0.0..1.0);
            }
            if rng.random_bool(0.85) {
                s.masks.m_hist[row] = 1.0;
                for e in &mut x[..OBS_DIM] {
                    *e = rng.random_range(0.0..1.0);
                }
            }
            s.hist_labels[row] = Some(if rng.random_bool(0.2) { NodeLabel::Confirmed } else { NodeLabel::Quiet });
        }
        let g = step_graph(rng, &present);
        s.hist_graphs.push(g);
    }
    let in_history: Vec<bool> = (0..n).map(|v| (0..t_in).any(|t| s.masks.hist_present[t * n + v] > 0.0)).collect();
    for k in 0..t_out {
        let present: Vec<usize> = (0..n).filter(|&v| v == 0 || rng.random_bool(0.8)).collect();
        for &v in &present {
            let row = k * n + v;
            s.masks.m_pred[row] = 1.0;
            for e in &mut s.x_pred[row * EPH_DIM..(row + 1) * EPH_DIM] {
                *e = rng.random_range(0.0..1.0);
            }
            let label = match rng.random_range(0..10) {
                0..=2 => NodeLabel::Confirmed,
                3 => NodeLabel::Unverified,
                _ => NodeLabel::Quiet,
            };
            s.label_codes[row] = Some(label);
            s.labels[row] = label.target();
            if label.is_valid() {
                s.masks.m_valid[row] = 1.0;
            }
            if !in_history[v] {
                s.masks.m_new[row] = 1.0;
            }
        }
        let g = step_graph(rng, &present);
        s.pred_graphs.push(g);
    }
    s
}
