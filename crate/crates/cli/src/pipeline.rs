//! In-memory pipeline steps shared by the CLI stages and the tests.

use std::sync::Arc;

use anyhow::Result;
use pierce_core::ephemeris::SatelliteTrack;
use pierce_core::features::{FeatureRow, MODEL_CADENCE_S};
use pierce_core::geo::TimeStamp;
use pierce_core::graph::{build_snapshots, fit_norm, GraphContext, GraphSnapshot, NormStats};
use pierce_core::qc::{label_features, split_and_filter, LabelRow, Split, Splits};
use pierce_core::synth::{IndexRow, ScenarioConfig, World};
use pierce_eval::dataset::{event_rate, WindowSet};
use pierce_eval::experiments::{ambiguous_distribution, dropout_experiment, AmbiguousSummary, DropoutRow};
use pierce_eval::report::{score_source, MetricSet, MetricsReport, ScoredPoint, Subset};
use pierce_eval::{Forecaster, NeuralForecaster};
use pierce_nn::train::{train, EpochLog, TrainOutcome};
use pierce_nn::Variant;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub fn station_pairs(s: &ScenarioConfig) -> Vec<(String, String)> {
    s.stations
        .chunks(2)
        .filter(|c| c.len() == 2)
        .map(|c| (c[0].id.to_string(), c[1].id.to_string()))
        .collect()
}

pub fn time_range(s: &ScenarioConfig) -> (TimeStamp, TimeStamp) {
    let first = TimeStamp(s.start_s);
    (first, first.offset((s.steps as i64 - 1) * MODEL_CADENCE_S))
}

pub fn tracks(s: &ScenarioConfig) -> Result<Vec<SatelliteTrack>> {
    let mut out = Vec::new();
    for c in &s.constellations {
        out.extend(c.build()?.into_iter().map(SatelliteTrack::Circular));
    }
    Ok(out)
}

/// Scenario features and labels without the raw-record files.
pub struct Simulated {
    pub world: World,
    pub rows: Vec<FeatureRow>,
    pub labels: Vec<LabelRow>,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulated> {
    let world = World::new(&cfg.scenario)?;
    let rows = world.features(&cfg.features)?;
    let labels = label_features(&rows, &station_pairs(&cfg.scenario), &cfg.qc);
    Ok(Simulated { world, rows, labels })
}

/// Split metadata stored next to the snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub splits: Splits,
    /// Training-split event rate.
    pub climatology: f64,
}

pub struct Dataset {
    pub snaps: Arc<Vec<GraphSnapshot>>,
    pub norm: Arc<NormStats>,
    pub info: DatasetInfo,
}

pub fn build_dataset(cfg: &ExperimentConfig, rows: &[FeatureRow], labels: &[LabelRow], indices: &[IndexRow]) -> Result<Dataset> {
    let (first, last) = time_range(&cfg.scenario);
    let splits = split_and_filter(first, last, labels, &cfg.split)?;
    let tracks = tracks(&cfg.scenario)?;
    let mut ctx = GraphContext::new(&cfg.scenario.stations, &tracks);
    ctx.elevation_mask_deg = cfg.features.elevation_mask_deg;
    ctx.k = cfg.window.k;
    ctx.day_of_year = cfg.window.day_of_year;
    ctx.space_weather = cfg.window.space_weather;
    let snaps = build_snapshots(&ctx, first, last, rows, labels, indices)?;
    let norm = fit_norm(snaps.iter().filter(|s| splits.train.contains(s.t_s)))?;
    let climatology = event_rate(labels, &splits.train);
    Ok(Dataset { snaps: Arc::new(snaps), norm: Arc::new(norm), info: DatasetInfo { splits, climatology } })
}

impl Dataset {
    pub fn windows(&self, cfg: &ExperimentConfig, split: Split) -> WindowSet {
        let stride = if split == Split::Train { cfg.window.train_stride } else { cfg.window.eval_stride };
        WindowSet::new(self.snaps.clone(), self.norm.clone(), cfg.window.window(), self.info.splits.get(split).clone(), stride)
    }
}

/// Trains `variant`, selecting the epoch with the best validation skill.
pub fn train_variant(cfg: &ExperimentConfig, ds: &Dataset, variant: Variant, log: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let train_set = ds.windows(cfg, Split::Train);
    let val_set = ds.windows(cfg, Split::Val);
    let batch = cfg.eval.batch_size;
    let mut validate = |m: &pierce_nn::Model| -> pierce_nn::Result<Option<f64>> {
        let f = NeuralForecaster::new(m.clone());
        let pts = score_source(&f, &val_set, batch).map_err(|e| pierce_nn::NnError::Config(e.to_string()))?;
        Ok(MetricSet::over(&pts, |_| true).bss)
    };
    let model_cfg = pierce_nn::ModelConfig { variant, ..cfg.model };
    Ok(train(model_cfg, &cfg.train, &train_set, &mut validate, log)?)
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub points: Vec<ScoredPoint>,
    pub ambiguous: AmbiguousSummary,
    pub dropout: Option<Vec<DropoutRow>>,
}

pub fn evaluate(cfg: &ExperimentConfig, ds: &Dataset, f: &dyn Forecaster, with_dropout: bool) -> Result<Evaluation> {
    let test = ds.windows(cfg, Split::Test);
    let points = score_source(f, &test, cfg.eval.batch_size)?;
    let report = MetricsReport::from_points(f.name(), &points, cfg.window.t_out);
    let ambiguous = ambiguous_distribution(f.name(), &points, cfg.eval.histogram_bins);
    let dropout = if with_dropout {
        Some(dropout_experiment(f, &test, &cfg.eval.dropout_fractions, cfg.seed, cfg.eval.batch_size)?)
    } else {
        None
    };
    Ok(Evaluation { report, points, ambiguous, dropout })
}

/// Valid time with the most confirmed labels at `lead`, earliest first.
pub fn busiest_time(points: &[ScoredPoint], lead: usize) -> Option<TimeStamp> {
    let mut counts: std::collections::BTreeMap<TimeStamp, usize> = Default::default();
    for p in points.iter().filter(|p| p.lead == lead) {
        *counts.entry(p.time()).or_default() += (p.target > 0.5) as usize;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(t, _)| t)
}

pub fn subset_bss(r: &MetricsReport, s: Subset) -> Option<f64> {
    r.subset(s).bss
}
