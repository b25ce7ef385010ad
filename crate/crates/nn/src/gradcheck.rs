//! Central finite-difference checks of tape gradients.

use pierce_core::windowing::Batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates rejected because the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `eval` at `coords`
/// uniformly drawn scalar coordinates. `eval` returns the loss and a
/// signature of its non-smooth branch choices; coordinates whose `±h`
/// evaluations disagree on the signature are redrawn.
pub fn check_gradients(
    params: &ParamStore,
    analytic: &[Option<Tensor>],
    eval: &mut dyn FnMut(&ParamStore) -> Result<(f64, u64)>,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let total = params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport { checked: 0, skipped: 0, max_rel_err: 0.0, worst: None };
    let mut attempts = 0;
    while report.checked < coords && attempts < coords * 20 {
        attempts += 1;
        let mut flat = rng.random_range(0..total);
        let mut i = 0;
        while flat >= params.tensor(i).len() {
            flat -= params.tensor(i).len();
            i += 1;
        }
        let orig = params.tensor(i).data[flat];
        work.tensor_mut(i).data[flat] = orig + h;
        let (lp, sp) = eval(&work)?;
        work.tensor_mut(i).data[flat] = orig - h;
        let (lm, sm) = eval(&work)?;
        work.tensor_mut(i).data[flat] = orig;
        if sp != sm {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[i].as_ref().map_or(0.0, |g| g.data[flat]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((params.name(i).to_string(), flat));
        }
    }
    Ok(report)
}

/// Gradient check of the masked training loss of `model` on `batch`.
pub fn check_model(model: &Model, batch: &Batch, coords: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    let denom = batch.masks.m_valid.iter().filter(|m| **m > 0.0).count().max(1) as f64;
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, batch, denom)?;
    let grads = tape.backward(loss);
    let analytic = tape.param_grads(&grads, &model.params);
    let mut probe = model.clone();
    let mut eval = |p: &ParamStore| -> Result<(f64, u64)> {
        probe.params = p.clone();
        let mut t = Tape::new();
        let l = probe.loss(&mut t, batch, denom)?;
        Ok((t.value(l).data[0], t.kink_signature))
    };
    check_gradients(&model.params, &analytic, &mut eval, coords, h, seed)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use pierce_core::windowing::collate;

    use super::*;
    use crate::fixtures::random_sample;
    use crate::model::{ModelConfig, Variant};

    #[test]
    fn linear_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamStore::default();
        let w = p.add_uniform("w", 5, 3, 5, &mut rng);
        let b = p.add_uniform("b", 1, 3, 5, &mut rng);
        let x = Tensor::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let forward = |p: &ParamStore, tape: &mut Tape| {
            let xv = tape.leaf(x.clone());
            let (wv, bv) = (tape.param(p, w), tape.param(p, b));
            let y = tape.linear(xv, wv, bv);
            let g = tape.gelu(y);
            let z = tape.reshape(g, 12, 1);
            let targets = Arc::new((0..12).map(|i| (i % 2) as f64).collect::<Vec<_>>());
            tape.masked_bce(z, targets, Arc::new(vec![1.0; 12]), 12.0)
        };
        let mut tape = Tape::new();
        let l = forward(&p, &mut tape);
        let grads = tape.backward(l);
        let analytic = tape.param_grads(&grads, &p);
        let mut eval = |q: &ParamStore| -> Result<(f64, u64)> {
            let mut t = Tape::new();
            let l = forward(q, &mut t);
            Ok((t.value(l).data[0], 0))
        };
        let r = check_gradients(&p, &analytic, &mut eval, 18, 1e-5, 1).unwrap();
        assert_eq!(r.checked, 18);
        assert!(r.max_rel_err < 1e-7, "{r:?}");
    }

    #[test]
    fn tiny_model_gradients_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = vec![random_sample(&mut rng, 6, 4, 4), random_sample(&mut rng, 5, 4, 4)];
        let batch = collate(&samples).unwrap();
        for v in Variant::ALL {
            let cfg = ModelConfig { hidden_d: 8, heads: 2, t_out: 4, variant: v, ..ModelConfig::default() };
            let model = Model::new(cfg, 9).unwrap();
            let r = check_model(&model, &batch, 120, 1e-5, 3).unwrap();
            assert_eq!(r.checked, 120, "{v}: {r:?}");
            assert!(r.max_rel_err < 1e-4, "{v}: {r:?}");
        }
    }

    #[test]
    fn zero_inputs_give_finite_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = random_sample(&mut rng, 4, 4, 4);
        s.x_hist.iter_mut().for_each(|x| *x = 0.0);
        s.x_pred.iter_mut().for_each(|x| *x = 0.0);
        for g in s.hist_graphs.iter_mut().chain(s.pred_graphs.iter_mut()) {
            g.feats.iter_mut().for_each(|x| *x = 0.0);
        }
        let batch = collate(&[s]).unwrap();
        let cfg = ModelConfig { hidden_d: 8, heads: 2, t_out: 4, ..ModelConfig::default() };
        let model = Model::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, &batch, 1.0).unwrap();
        let grads = tape.backward(l);
        assert!(tape.value(l).is_finite());
        for g in tape.param_grads(&grads, &model.params).into_iter().flatten() {
            assert!(g.is_finite());
        }
    }
}
