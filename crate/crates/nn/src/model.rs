//! History and prediction modules with graph and temporal attention.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use pierce_core::graph::{EDGE_DIM, EPH_DIM, ZERO_BASELINE_FLAG};
use pierce_core::windowing::{Batch, StepGraph, HIST_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tape::{sigmoid, GatGraph, Sequences, Tape, Var, PROB_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoGraph,
    NoConditioning,
    NoHistory,
    #[serde(alias = "no_zero_baseline")]
    NoZeroBaselineFlag,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGraph,
        Variant::NoConditioning,
        Variant::NoHistory,
        Variant::NoZeroBaselineFlag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGraph => "no_graph",
            Variant::NoConditioning => "no_conditioning",
            Variant::NoHistory => "no_history",
            Variant::NoZeroBaselineFlag => "no_zero_baseline",
        }
    }

    fn uses_graph(self) -> bool {
        self != Variant::NoGraph
    }

    fn uses_history(self) -> bool {
        self != Variant::NoHistory
    }

    fn uses_prediction(self) -> bool {
        self != Variant::NoConditioning
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_zero_baseline_flag" => Ok(Variant::NoZeroBaselineFlag),
            _ => Variant::ALL
                .into_iter()
                .find(|v| v.name() == s)
                .ok_or_else(|| NnError::Config(format!("unknown variant {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_d: usize,
    pub history_layers: usize,
    pub prediction_layers: usize,
    pub heads: usize,
    pub t_out: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_d: 64,
            history_layers: 2,
            prediction_layers: 1,
            heads: 4,
            t_out: 24,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_d == 0 || self.heads == 0 || self.hidden_d % self.heads != 0 {
            return Err(NnError::Config(format!(
                "hidden_d {} must be a positive multiple of heads {}",
                self.hidden_d, self.heads
            )));
        }
        if self.hidden_d % 2 != 0 {
            return Err(NnError::Config("hidden_d must be even for positional encoding".into()));
        }
        Ok(())
    }
}

/// Interleaved sine/cosine positions, `[t, d]`.
pub fn sinusoidal_pe(t: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(t, d);
    for p in 0..t {
        for i in 0..d / 2 {
            let w = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            out.data[p * d + 2 * i] = (p as f64 * w).sin();
            out.data[p * d + 2 * i + 1] = (p as f64 * w).cos();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct GatParams {
    wq: usize,
    wk: usize,
    wv: usize,
    we: usize,
    a: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TemporalParams {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    hist_enc: Option<Linear>,
    hist_gat: Vec<GatParams>,
    hist_tmp: Option<TemporalParams>,
    pred_enc: Option<Linear>,
    fuse: Option<Linear>,
    pred_gat: Vec<GatParams>,
    pred_tmp: Option<TemporalParams>,
    head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn gat_params(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> GatParams {
    GatParams {
        wq: p.add_uniform(format!("{prefix}.wq"), d, d, d, rng),
        wk: p.add_uniform(format!("{prefix}.wk"), d, d, d, rng),
        wv: p.add_uniform(format!("{prefix}.wv"), d, d, d, rng),
        we: p.add_uniform(format!("{prefix}.we"), EDGE_DIM, d, EDGE_DIM, rng),
        a: p.add_uniform(format!("{prefix}.a"), 1, d, d, rng),
        ln_g: p.add_const(format!("{prefix}.ln_g"), 1, d, 1.0),
        ln_b: p.add_const(format!("{prefix}.ln_b"), 1, d, 0.0),
    }
}

fn temporal_params(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> TemporalParams {
    TemporalParams {
        wq: p.add_uniform(format!("{prefix}.wq"), d, d, d, rng),
        wk: p.add_uniform(format!("{prefix}.wk"), d, d, d, rng),
        wv: p.add_uniform(format!("{prefix}.wv"), d, d, d, rng),
        wo: p.add_uniform(format!("{prefix}.wo"), d, d, d, rng),
        ln_g: p.add_const(format!("{prefix}.ln_g"), 1, d, 1.0),
        ln_b: p.add_const(format!("{prefix}.ln_b"), 1, d, 0.0),
    }
}

fn linear(p: &mut ParamStore, prefix: &str, fan_in: usize, out: usize, rng: &mut ChaCha8Rng) -> Linear {
    Linear {
        w: p.add_uniform(format!("{prefix}.w"), fan_in, out, fan_in, rng),
        b: p.add_uniform(format!("{prefix}.b"), 1, out, fan_in, rng),
    }
}

/// Rows of a `[steps, m]` layout that exist, in row order.
struct Compact {
    m: usize,
    rows: Vec<u32>,
    /// Full row to compact row, `u32::MAX` where absent.
    index: Vec<u32>,
}

impl Compact {
    fn new(keep: &[f64], m: usize) -> Self {
        let mut rows = Vec::new();
        let mut index = vec![u32::MAX; keep.len()];
        for (r, &k) in keep.iter().enumerate() {
            if k > 0.0 {
                index[r] = rows.len() as u32;
                rows.push(r as u32);
            }
        }
        Self { m, rows, index }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn gather(&self, src: &[f64], width: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows.len() * width);
        for &r in &self.rows {
            let r = r as usize;
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        out
    }

    /// One sequence per node column, in step order.
    fn sequences(&self) -> Sequences {
        let mut groups = vec![Vec::new(); self.m];
        for (c, &r) in self.rows.iter().enumerate() {
            groups[r as usize % self.m].push(c as u32);
        }
        Sequences::new(groups)
    }

    /// Sinusoidal position of each row's step.
    fn positions(&self, steps: usize, d: usize) -> Tensor {
        let pe = sinusoidal_pe(steps, d);
        let mut out = Tensor::zeros(self.len(), d);
        for (c, &r) in self.rows.iter().enumerate() {
            out.row_mut(c).copy_from_slice(pe.row(r as usize / self.m));
        }
        out
    }

    /// Union of the step graphs over compact rows. Edges touching an
    /// absent row are dropped.
    fn graph(&self, graphs: &[StepGraph], zero_flag: bool) -> Flat {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut feats = Vec::new();
        for (t, g) in graphs.iter().enumerate() {
            let off = t * self.m;
            for e in 0..g.src.len() {
                let (a, b) = (self.index[off + g.src[e] as usize], self.index[off + g.dst[e] as usize]);
                if a == u32::MAX || b == u32::MAX {
                    continue;
                }
                src.push(a);
                dst.push(b);
                feats.extend_from_slice(&g.feats[e * EDGE_DIM..(e + 1) * EDGE_DIM]);
            }
        }
        if zero_flag {
            for row in feats.chunks_mut(EDGE_DIM) {
                row[ZERO_BASELINE_FLAG] = 0.0;
            }
        }
        let e = src.len();
        Flat {
            graph: Arc::new(GatGraph::new(self.len(), &src, &dst)),
            edge_feats: Tensor { rows: e, cols: EDGE_DIM, data: feats },
        }
    }
}

struct Flat {
    graph: Arc<GatGraph>,
    edge_feats: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let v = cfg.variant;
        let mut layout = Layout {
            hist_enc: None,
            hist_gat: Vec::new(),
            hist_tmp: None,
            pred_enc: None,
            fuse: None,
            pred_gat: Vec::new(),
            pred_tmp: None,
            head: Linear { w: 0, b: 0 },
        };
        if v.uses_history() {
            layout.hist_enc = Some(linear(&mut p, "hist.enc", HIST_DIM, d, &mut rng));
            if v.uses_graph() {
                for l in 0..cfg.history_layers {
                    layout.hist_gat.push(gat_params(&mut p, &format!("hist.gat{l}"), d, &mut rng));
                }
            }
            layout.hist_tmp = Some(temporal_params(&mut p, "hist.tmp", d, &mut rng));
        }
        if v.uses_prediction() {
            layout.pred_enc = Some(linear(&mut p, "pred.enc", EPH_DIM, d, &mut rng));
            layout.fuse = Some(linear(&mut p, "pred.fuse", 2 * d, d, &mut rng));
            if v.uses_graph() {
                for l in 0..cfg.prediction_layers {
                    layout.pred_gat.push(gat_params(&mut p, &format!("pred.gat{l}"), d, &mut rng));
                }
            }
            layout.pred_tmp = Some(temporal_params(&mut p, "pred.tmp", d, &mut rng));
            layout.head = linear(&mut p, "head", d, 1, &mut rng);
        } else {
            layout.head = linear(&mut p, "head", d, cfg.t_out, &mut rng);
        }
        Ok(Self { cfg, params: p, layout })
    }

    fn check(&self, b: &Batch) -> Result<()> {
        let m = b.m();
        let ok = b.x_hist.len() == b.t_in * m * HIST_DIM
            && b.x_pred.len() == b.t_out * m * EPH_DIM
            && b.masks.m_hist.len() == b.t_in * m
            && b.masks.hist_present.len() == b.t_in * m
            && b.masks.m_pred.len() == b.t_out * m
            && b.masks.m_valid.len() == b.t_out * m
            && b.labels.len() == b.t_out * m
            && b.hist_graphs.len() == b.t_in
            && b.pred_graphs.len() == b.t_out
            && b.hist_graphs.iter().chain(&b.pred_graphs).all(|g| {
                g.src.len() == g.dst.len()
                    && g.feats.len() == g.src.len() * EDGE_DIM
                    && g.src.iter().chain(&g.dst).all(|&x| (x as usize) < m)
            });
        if !ok {
            return Err(NnError::Shape("batch arrays inconsistent with its dimensions".into()));
        }
        if b.t_out != self.cfg.t_out {
            return Err(NnError::Shape(format!("model decodes {} steps, batch has {}", self.cfg.t_out, b.t_out)));
        }
        Ok(())
    }

    fn gat(&self, tape: &mut Tape, h: Var, lp: &GatParams, flat: &Flat, ef: Var) -> Var {
        let p = &self.params;
        let (wq, wk, wv, we, a) = (tape.param(p, lp.wq), tape.param(p, lp.wk), tape.param(p, lp.wv), tape.param(p, lp.we), tape.param(p, lp.a));
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let eb = tape.matmul(ef, we);
        let att = tape.graph_attention(q, k, v, eb, a, flat.graph.clone(), self.cfg.heads);
        let r = tape.add(h, att);
        let (g, b) = (tape.param(p, lp.ln_g), tape.param(p, lp.ln_b));
        tape.layer_norm(r, g, b)
    }

    fn temporal(&self, tape: &mut Tape, h: Var, tp: &TemporalParams, rows: &Compact, steps: usize, mask: Vec<f64>) -> Var {
        let pe = tape.leaf(rows.positions(steps, self.cfg.hidden_d));
        let x = tape.add(h, pe);
        let p = &self.params;
        let (wq, wk, wv, wo) = (tape.param(p, tp.wq), tape.param(p, tp.wk), tape.param(p, tp.wv), tape.param(p, tp.wo));
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let att = tape.sequence_attention(q, k, v, Arc::new(rows.sequences()), self.cfg.heads, Arc::new(mask));
        let o = tape.matmul(att, wo);
        let r = tape.add(x, o);
        let (g, b) = (tape.param(p, tp.ln_g), tape.param(p, tp.ln_b));
        tape.layer_norm(r, g, b)
    }

    fn encode(&self, tape: &mut Tape, x: Tensor, lin: &Linear, gate: Option<Vec<f64>>) -> Var {
        let x = tape.leaf(x);
        let (w, b) = (tape.param(&self.params, lin.w), tape.param(&self.params, lin.b));
        let h = tape.linear(x, w, b);
        let h = tape.gelu(h);
        match gate {
            Some(g) => tape.gate_rows(h, Arc::new(g)),
            None => h,
        }
    }

    /// Per-node hidden embedding `[m, d]`, taken at each node's last history
    /// step present in the snapshot. Nodes absent from the whole history
    /// window get zeros. Only present rows are computed.
    fn history(&self, tape: &mut Tape, b: &Batch) -> Var {
        let (m, d) = (b.m(), self.cfg.hidden_d);
        let rows = Compact::new(&b.masks.hist_present, m);
        let (Some(enc), Some(tmp)) = (&self.layout.hist_enc, &self.layout.hist_tmp) else {
            return tape.leaf(Tensor::zeros(m, d));
        };
        if rows.len() == 0 {
            return tape.leaf(Tensor::zeros(m, d));
        }
        let m_hist = rows.gather(&b.masks.m_hist, 1);
        let x = Tensor { rows: rows.len(), cols: HIST_DIM, data: rows.gather(&b.x_hist, HIST_DIM) };
        let mut h = self.encode(tape, x, enc, Some(m_hist.clone()));
        if !self.layout.hist_gat.is_empty() {
            let flat = rows.graph(&b.hist_graphs, self.cfg.variant == Variant::NoZeroBaselineFlag);
            let ef = tape.leaf(flat.edge_feats.clone());
            for lp in &self.layout.hist_gat {
                h = self.gat(tape, h, lp, &flat, ef);
            }
        }
        let z = self.temporal(tape, h, tmp, &rows, b.t_in, m_hist);
        let mut last = vec![u32::MAX; m];
        for (c, &r) in rows.rows.iter().enumerate() {
            last[r as usize % m] = c as u32;
        }
        tape.gather_rows(z, Arc::new(last))
    }

    /// Logits `[t_out * m, 1]`, row `t * m + j`; zero where the node is
    /// absent.
    pub fn forward(&self, tape: &mut Tape, b: &Batch) -> Result<Var> {
        self.check(b)?;
        let (m, t_out) = (b.m(), b.t_out);
        let hidden = self.history(tape, b);
        let p = &self.params;
        let head = self.layout.head;
        let (hw, hb) = (tape.param(p, head.w), tape.param(p, head.b));
        let (Some(enc), Some(fuse), Some(tmp)) = (&self.layout.pred_enc, &self.layout.fuse, &self.layout.pred_tmp) else {
            let y = tape.linear(hidden, hw, hb);
            let yt = tape.transpose(y);
            return Ok(tape.reshape(yt, t_out * m, 1));
        };
        let rows = Compact::new(&b.masks.m_pred, m);
        if rows.len() == 0 {
            return Ok(tape.leaf(Tensor::zeros(t_out * m, 1)));
        }
        let x = Tensor { rows: rows.len(), cols: EPH_DIM, data: rows.gather(&b.x_pred, EPH_DIM) };
        let e = self.encode(tape, x, enc, None);
        let idx: Vec<u32> = rows.rows.iter().map(|&r| r % m as u32).collect();
        let hb_rows = tape.gather_rows(hidden, Arc::new(idx));
        let cat = tape.concat_cols(hb_rows, e);
        let (fw, fb) = (tape.param(p, fuse.w), tape.param(p, fuse.b));
        let f = tape.linear(cat, fw, fb);
        let mut h = tape.gelu(f);
        if !self.layout.pred_gat.is_empty() {
            let flat = rows.graph(&b.pred_graphs, self.cfg.variant == Variant::NoZeroBaselineFlag);
            let ef = tape.leaf(flat.edge_feats.clone());
            for lp in &self.layout.pred_gat {
                h = self.gat(tape, h, lp, &flat, ef);
            }
        }
        let z = self.temporal(tape, h, tmp, &rows, t_out, vec![1.0; rows.len()]);
        let logits = tape.linear(z, hw, hb);
        Ok(tape.gather_rows(logits, Arc::new(rows.index.clone())))
    }

    /// Masked mean cross-entropy over `M_valid` with an explicit divisor.
    pub fn loss(&self, tape: &mut Tape, b: &Batch, denom: f64) -> Result<Var> {
        let z = self.forward(tape, b)?;
        let mask: Vec<f64> = b.masks.m_valid.iter().zip(&b.masks.m_pred).map(|(v, p)| v * p).collect();
        Ok(tape.masked_bce(z, Arc::new(b.labels.clone()), Arc::new(mask), denom))
    }

    /// Event probabilities `[t_out * m]` in `(0, 1)`.
    pub fn predict(&self, b: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = self.forward(&mut tape, b)?;
        Ok(tape
            .value(z)
            .data
            .iter()
            .map(|&x| sigmoid(x).clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect())
    }
}

/// Serialized model: config, named arrays, optimizer state, progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: std::collections::BTreeMap<String, Tensor>,
    pub optimizer: Option<crate::optim::AdamWState>,
    pub epoch: usize,
    pub val_bss: Option<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<crate::optim::AdamWState>, epoch: usize, val_bss: Option<f64>) -> Self {
        Self { config: model.cfg, params: model.params.to_map(), optimizer, epoch, val_bss }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::new(self.config, 0)?;
        m.params.load_map(&self.params)?;
        Ok(m)
    }

    pub fn write<W: std::io::Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read<R: std::io::Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_values() {
        let pe = sinusoidal_pe(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        // Position 2 with d=4: frequencies 1 and 1/100.
        let want = [2f64.sin(), 2f64.cos(), 0.02f64.sin(), 0.02f64.cos()];
        for (a, b) in pe.row(2).iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(sinusoidal_pe(50, 16).data.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("persistence".parse::<Variant>().is_err());
        assert!(Model::new(ModelConfig { hidden_d: 10, heads: 4, ..ModelConfig::default() }, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig { hidden_d: 8, heads: 2, ..ModelConfig::default() };
        assert_eq!(Model::new(cfg, 3).unwrap(), Model::new(cfg, 3).unwrap());
        assert_ne!(Model::new(cfg, 3).unwrap().params, Model::new(cfg, 4).unwrap().params);
    }
}
