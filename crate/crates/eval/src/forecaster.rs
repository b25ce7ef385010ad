//! Forecasters behind one trait, constructed by name at runtime.

use std::collections::BTreeMap;

use pierce_core::qc::NodeLabel;
use pierce_core::windowing::Batch;
use pierce_nn::{Checkpoint, Model, Variant};

use crate::error::{EvalError, Result};

pub trait Forecaster: Send + Sync {
    fn name(&self) -> &str;

    /// Event probabilities `[t_out * m]` in batch row order.
    fn predict(&self, batch: &Batch) -> Result<Vec<f64>>;
}

pub struct NeuralForecaster {
    name: String,
    model: Model,
}

impl NeuralForecaster {
    pub fn new(model: Model) -> Self {
        Self { name: model.cfg.variant.name().to_string(), model }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Forecaster for NeuralForecaster {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        Ok(self.model.predict(batch)?)
    }
}

/// Repeats each node's last observed label over the whole forecast window.
/// Nodes without an observed label get the climatological rate.
pub struct Persistence {
    pub climatology: f64,
}

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn predict(&self, b: &Batch) -> Result<Vec<f64>> {
        let m = b.m();
        let mut last = vec![self.climatology; m];
        for t in 0..b.t_in {
            for (j, slot) in last.iter_mut().enumerate() {
                let row = t * m + j;
                if b.masks.m_hist[row] > 0.0 {
                    if let Some(l) = b.hist_labels[row] {
                        *slot = if l == NodeLabel::Confirmed { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        Ok((0..b.t_out * m).map(|r| last[r % m]).collect())
    }
}

/// Inputs a factory may draw on.
#[derive(Default)]
pub struct BuildContext<'a> {
    pub checkpoint: Option<&'a Checkpoint>,
    /// Training-split event rate.
    pub climatology: f64,
}

type Factory = Box<dyn Fn(&BuildContext) -> Result<Box<dyn Forecaster>> + Send + Sync>;

struct Entry {
    variant: Option<Variant>,
    factory: Factory,
}

pub struct Registry {
    entries: BTreeMap<String, Entry>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        for v in Variant::ALL {
            r.register(v.name(), Some(v), Box::new(move |ctx| neural_from(v, ctx)));
        }
        r.register("persistence", None, Box::new(|ctx| Ok(Box::new(Persistence { climatology: ctx.climatology }))));
        r
    }
}

fn neural_from(v: Variant, ctx: &BuildContext) -> Result<Box<dyn Forecaster>> {
    let ck = ctx.checkpoint.ok_or_else(|| EvalError::MissingCheckpoint(v.name().into()))?;
    if ck.config.variant != v {
        return Err(EvalError::VariantMismatch { expected: v.name().into(), found: ck.config.variant.name().into() });
    }
    Ok(Box::new(NeuralForecaster::new(ck.to_model()?)))
}

impl Registry {
    /// Adds or replaces a forecaster. `variant` marks trainable entries.
    pub fn register(&mut self, name: &str, variant: Option<Variant>, factory: Factory) {
        self.entries.insert(name.to_string(), Entry { variant, factory });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Model variant trained for `name`, `None` for fixed baselines.
    pub fn variant(&self, name: &str) -> Result<Option<Variant>> {
        self.entries
            .get(name)
            .map(|e| e.variant)
            .ok_or_else(|| EvalError::UnknownForecaster(name.into()))
    }

    pub fn build(&self, name: &str, ctx: &BuildContext) -> Result<Box<dyn Forecaster>> {
        let e = self.entries.get(name).ok_or_else(|| EvalError::UnknownForecaster(name.into()))?;
        (e.factory)(ctx)
    }
}
