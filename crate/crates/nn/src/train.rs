//! Mini-batch training with AdamW and best-validation checkpoint selection.

use pierce_core::windowing::{collate, Sample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{adamw_step, AdamWConfig, AdamWState, LrSchedule};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Indexed access to windows, built on demand.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Result<Sample> {
        Ok(self[i].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub warmup_epochs: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            lr_floor: 0.0,
            warmup_epochs: 3,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_bss: Option<f64>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation score.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_bss: Option<f64>,
    /// Optimizer state after the final epoch.
    pub optimizer: AdamWState,
    pub logs: Vec<EpochLog>,
}

/// Loss and parameter gradients for one batch of samples, divided by the
/// total number of supervised positions. Per-sample gradients are reduced
/// in sample order so the result does not depend on thread scheduling.
pub fn batch_gradients(model: &Model, samples: &[Sample]) -> Result<(f64, Vec<Option<Tensor>>)> {
    let denom: usize = samples.iter().map(Sample::valid_positions).sum();
    if denom == 0 {
        return Ok((0.0, vec![None; model.params.len()]));
    }
    let denom = denom as f64;
    let parts: Vec<Result<(f64, Vec<Option<Tensor>>)>> = samples
        .par_iter()
        .map(|s| {
            let batch = collate(std::slice::from_ref(s))?;
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &batch, denom)?;
            let value = tape.value(loss).data[0];
            let grads = tape.backward(loss);
            Ok((value, tape.param_grads(&grads, &model.params)))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Vec<Option<Tensor>> = vec![None; model.params.len()];
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (a, gi) in acc.iter_mut().zip(g) {
            match (a.as_mut(), gi) {
                (Some(a), Some(gi)) => a.add_assign(&gi),
                (None, Some(gi)) => *a = Some(gi),
                _ => {}
            }
        }
    }
    Ok((total, acc))
}

/// Trains a fresh model. `validate` scores a model on held-out data and
/// returns its skill (higher is better); `None` counts as worse than any
/// score.
pub fn train(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    data: &dyn SampleSource,
    validate: &mut dyn FnMut(&Model) -> Result<Option<f64>>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(NnError::Config("batch_size and epochs must be positive".into()));
    }
    let mut usable = Vec::new();
    for i in 0..data.len() {
        if data.get(i)?.valid_positions() > 0 {
            usable.push(i);
        }
    }
    if usable.is_empty() {
        return Err(NnError::EmptyTrainingSet);
    }
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut opt = AdamWState::new(&model.params);
    let steps_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let sched = LrSchedule::from_epochs(cfg.lr, cfg.lr_floor, steps_per_epoch, cfg.warmup_epochs, cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_7EA1);
    let mut best: Option<(usize, Option<f64>, Model)> = None;
    let mut logs = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = std::time::Instant::now();
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples = chunk.iter().map(|&i| data.get(i)).collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_gradients(&model, &samples)?;
            step += 1;
            lr = sched.lr(step);
            adamw_step(&mut model.params, &grads, &mut opt, lr, &cfg.adamw);
            loss_sum += loss;
        }
        if !model.params.is_finite() {
            return Err(NnError::Config(format!("non-finite parameters after epoch {}", epoch + 1)));
        }
        let val_bss = validate(&model)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / steps_per_epoch as f64,
            lr,
            val_bss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log(&entry);
        logs.push(entry);
        let better = match &best {
            None => true,
            Some((_, prev, _)) => score(val_bss) >= score(*prev),
        };
        if better {
            best = Some((epoch + 1, val_bss, model.clone()));
        }
    }
    let (best_epoch, best_val_bss, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model: best_model, best_epoch, best_val_bss, optimizer: opt, logs })
}

fn score(v: Option<f64>) -> f64 {
    v.filter(|x| x.is_finite()).unwrap_or(f64::NEG_INFINITY)
}
