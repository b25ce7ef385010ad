//! Probabilistic, ranking and contingency scores for binary events.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no samples")]
    Empty,
    #[error("{0} probabilities for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("labels contain a single class")]
    SingleClass,
}

pub type MetricResult = Result<f64, MetricError>;

fn check(p: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if p.len() != y.len() {
        return Err(MetricError::LengthMismatch(p.len(), y.len()));
    }
    if p.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn class_counts(y: &[f64]) -> Result<(usize, usize), MetricError> {
    let pos = y.iter().filter(|v| **v > 0.5).count();
    let neg = y.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((pos, neg))
}

pub fn brier_score(p: &[f64], y: &[f64]) -> MetricResult {
    check(p, y)?;
    Ok(p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
}

/// `1 - BS / (ybar (1 - ybar))`, with the event rate of `y` itself.
pub fn brier_skill(p: &[f64], y: &[f64]) -> MetricResult {
    let bs = brier_score(p, y)?;
    let (pos, _) = class_counts(y)?;
    let ybar = pos as f64 / y.len() as f64;
    Ok(1.0 - bs / (ybar * (1.0 - ybar)))
}

/// Indices sorted by descending score; ties keep input order.
fn descending(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(p: &[f64], y: &[f64]) -> MetricResult {
    check(p, y)?;
    let (pos, neg) = class_counts(y)?;
    let idx = descending(p);
    // Walk tie groups from the top; each positive beats every negative
    // below its group and half of those inside it.
    let mut negs_above = 0usize;
    let mut wins = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < idx.len() && p[idx[j]] == p[idx[i]] {
            if y[idx[j]] > 0.5 {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        let below = neg - negs_above - gn;
        wins += gp as f64 * (below as f64 + 0.5 * gn as f64);
        negs_above += gn;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Area under the precision-recall step curve: the sum over distinct
/// thresholds of recall increment times precision.
pub fn pr_auc(p: &[f64], y: &[f64]) -> MetricResult {
    check(p, y)?;
    let (pos, _) = class_counts(y)?;
    let idx = descending(p);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let before = tp;
        while j < idx.len() && p[idx[j]] == p[idx[i]] {
            if y[idx[j]] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp > before {
            area += (tp - before) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub hits: usize,
    pub misses: usize,
    pub false_alarms: usize,
    pub correct_negatives: usize,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Contingency {
    /// Events are predicted where `p >= threshold`.
    pub fn from_scores(p: &[f64], y: &[f64], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&pi, &yi) in p.iter().zip(y) {
            match (pi >= threshold, yi > 0.5) {
                (true, true) => c.hits += 1,
                (false, true) => c.misses += 1,
                (true, false) => c.false_alarms += 1,
                (false, false) => c.correct_negatives += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    pub fn pod(&self) -> Option<f64> {
        ratio(self.hits, self.hits + self.misses)
    }

    pub fn far(&self) -> Option<f64> {
        ratio(self.false_alarms, self.hits + self.false_alarms)
    }

    pub fn csi(&self) -> Option<f64> {
        ratio(self.hits, self.hits + self.misses + self.false_alarms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(p: &[f64], y: &[f64]) -> f64 {
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..p.len() {
            for j in 0..p.len() {
                if y[i] > 0.5 && y[j] < 0.5 {
                    n += 1.0;
                    s += if p[i] > p[j] { 1.0 } else if p[i] == p[j] { 0.5 } else { 0.0 };
                }
            }
        }
        s / n
    }

    #[test]
    fn brier_skill_cases() {
        let y = [1.0, 0.0, 0.0, 0.0];
        let bss = brier_skill(&[0.8, 0.1, 0.2, 0.1], &y).unwrap();
        assert!((bss - 0.866_666_666_666_666_7).abs() < 1e-12);
        assert_eq!(brier_skill(&[0.25; 4], &y).unwrap(), 0.0);
        assert_eq!(brier_skill(&y, &y).unwrap(), 1.0);
        assert_eq!(brier_skill(&[0.3, 0.2], &[0.0, 0.0]), Err(MetricError::SingleClass));
        assert_eq!(brier_skill(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn ranking_reference_values() {
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let p = [0.9, 0.4, 0.4, 0.7, 0.2, 0.7, 0.1, 0.05];
        assert!((roc_auc(&p, &y).unwrap() - 0.6875).abs() < 1e-12);
        assert!((pr_auc(&p, &y).unwrap() - 0.709_523_809_523_809_4).abs() < 1e-12);
        let sep = [0.9, 0.1, 0.8, 0.7, 0.2, 0.3, 0.6, 0.0];
        assert_eq!(roc_auc(&sep, &y).unwrap(), 1.0);
        assert_eq!(pr_auc(&sep, &y).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 8], &y).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.3; 2], &[1.0, 1.0]), Err(MetricError::SingleClass));
    }

    #[test]
    fn contingency_cases() {
        let c = Contingency { hits: 5, misses: 5, false_alarms: 5, correct_negatives: 3 };
        assert_eq!(c.pod(), Some(0.5));
        assert_eq!(c.far(), Some(0.5));
        assert!((c.csi().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let none = Contingency::from_scores(&[0.1, 0.2, 0.4], &[1.0, 0.0, 1.0], 0.5);
        assert_eq!(none.pod(), Some(0.0));
        assert_eq!(none.far(), None);
        let all = Contingency::from_scores(&[0.9, 0.2, 0.5], &[1.0, 0.0, 1.0], 0.5);
        assert_eq!((all.pod(), all.far(), all.csi()), (Some(1.0), Some(0.0), Some(1.0)));
    }

    proptest! {
        #[test]
        fn roc_matches_pairwise(v in prop::collection::vec((0u8..20, any::<bool>()), 2..300)) {
            let p: Vec<f64> = v.iter().map(|(s, _)| *s as f64 / 19.0).collect();
            let y: Vec<f64> = v.iter().map(|(_, b)| *b as u8 as f64).collect();
            prop_assume!(y.iter().any(|x| *x > 0.5) && y.iter().any(|x| *x < 0.5));
            prop_assert!((roc_auc(&p, &y).unwrap() - pairwise_auc(&p, &y)).abs() < 1e-9);
        }

        #[test]
        fn order_invariance_and_bounds(v in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..200), rot in 0usize..200) {
            let p: Vec<f64> = v.iter().map(|x| x.0).collect();
            let y: Vec<f64> = v.iter().map(|x| x.1 as u8 as f64).collect();
            prop_assume!(y.iter().any(|x| *x > 0.5) && y.iter().any(|x| *x < 0.5));
            let k = rot % p.len();
            let (mut pr, mut yr) = (p.clone(), y.clone());
            pr.rotate_left(k);
            yr.rotate_left(k);
            let b = brier_skill(&p, &y).unwrap();
            prop_assert!((b - brier_skill(&pr, &yr).unwrap()).abs() < 1e-12);
            prop_assert!(b <= 1.0);
            let (r, a) = (roc_auc(&p, &y).unwrap(), pr_auc(&p, &y).unwrap());
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&a));
            let c = Contingency::from_scores(&p, &y, 0.5);
            prop_assert_eq!(c.total(), p.len());
        }
    }
}
