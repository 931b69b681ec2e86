//! Evaluation metrics and the `step,split,metric,value` CSV log.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regression {
    pub mae: f64,
    pub rmse: f64,
    /// NaN when the targets have zero variance.
    pub r2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub auc: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::Invalid(format!("metrics need matching nonempty inputs, got {} and {}", pred.len(), target.len())));
    }
    Ok(())
}

pub fn regression(pred: &[f64], target: &[f64]) -> Result<Regression> {
    check(pred, target)?;
    let n = pred.len() as f64;
    let mae = pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
    let mean = target.iter().sum::<f64>() / n;
    let sst: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else {
        eprintln!("warning: targets have zero variance, R² is undefined");
        f64::NAN
    };
    Ok(Regression { mae, rmse: (sse / n).sqrt(), r2 })
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(f64::NAN);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `probs` are positive-class probabilities; decisions use threshold 0.5.
pub fn classification(probs: &[f64], target: &[f64]) -> Result<Classification> {
    check(probs, target)?;
    let labels: Vec<bool> = target.iter().map(|&y| y >= 0.5).collect();
    let (mut tp, mut tn, mut fp, mut fneg) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in probs.iter().zip(&labels) {
        match (p >= 0.5, y) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
    Ok(Classification {
        auc: auc(probs, &labels)?,
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fneg),
        sensitivity: ratio(tp, tp + fneg),
        specificity: ratio(tn, tn + fp),
        accuracy: (tp + tn) / probs.len() as f64,
    })
}

impl Regression {
    pub fn rows(&self) -> [(&'static str, f64); 3] {
        [("mae", self.mae), ("rmse", self.rmse), ("r2", self.r2)]
    }
}

impl Classification {
    pub fn rows(&self) -> [(&'static str, f64); 5] {
        [("auc", self.auc), ("f1", self.f1), ("sensitivity", self.sensitivity), ("specificity", self.specificity), ("accuracy", self.accuracy)]
    }
}

pub const CSV_HEADER: &str = "step,split,metric,value";

/// Append-only metrics log, flushed to disk in full on every `flush`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<(u64, String, String, f64)>,
}

impl MetricsLog {
    pub fn push(&mut self, step: u64, split: &str, metric: &str, value: f64) {
        self.rows.push((step, split.to_string(), metric.to_string(), value));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (step, split, metric, value) in &self.rows {
            let _ = writeln!(s, "{step},{split},{metric},{value:e}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Data("metrics CSV has an unexpected header".into()));
        }
        let mut log = Self::default();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("bad metrics row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            log.push(f[0].parse().map_err(|_| bad())?, f[1], f[2], f[3].parse().map_err(|_| bad())?);
        }
        Ok(log)
    }

    /// Drops rows logged after `step`.
    pub fn truncate_after(&mut self, step: u64) {
        self.rows.retain(|r| r.0 <= step);
    }

    pub fn values(&self, split: &str, metric: &str) -> Vec<(u64, f64)> {
        self.rows.iter().filter(|r| r.1 == split && r.2 == metric).map(|r| (r.0, r.3)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn regression_examples() {
        let y = [1.0, 2.0, 4.0, 7.0];
        let r = regression(&y, &y).unwrap();
        assert_eq!((r.mae, r.rmse, r.r2), (0.0, 0.0, 1.0));
        let r = regression(&[3.5; 4], &y).unwrap();
        assert_eq!(r.r2, 0.0);
        let r = regression(&[0.0, 2.0], &[1.0, 4.0]).unwrap();
        assert_eq!(r.mae, 1.5);
        assert_eq!(r.rmse, (2.5f64).sqrt());
        assert!(regression(&[1.0], &[2.0]).unwrap().r2.is_nan());
        assert!(regression(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert!(auc(&[0.2], &[true]).unwrap().is_nan());
    }

    #[test]
    fn classification_counts() {
        let c = classification(&[0.9, 0.6, 0.2, 0.4, 0.7], &[1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(c.accuracy, 0.6);
        assert_eq!(c.sensitivity, 2.0 / 3.0);
        assert_eq!(c.specificity, 0.5);
        assert_eq!(c.f1, 4.0 / 6.0);
    }

    #[test]
    fn csv_round_trip() {
        let mut log = MetricsLog::default();
        log.push(1, "train", "loss", 0.1 + 0.2);
        log.push(2, "val", "r2", f64::NAN);
        log.push(3, "val", "mae", 1e-300);
        let back = MetricsLog::parse(&log.to_csv()).unwrap();
        assert_eq!(back.to_csv(), log.to_csv());
        assert_eq!(back.rows[0].3, 0.1 + 0.2);
        let mut t = back.clone();
        t.truncate_after(2);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(back.values("val", "mae"), vec![(3, 1e-300)]);
    }

    proptest! {
        #[test]
        fn separable_scores_give_unit_auc(neg in proptest::collection::vec(-5.0f64..0.0, 1..20), pos in proptest::collection::vec(0.001f64..5.0, 1..20)) {
            let scores: Vec<f64> = neg.iter().chain(&pos).copied().collect();
            let labels: Vec<bool> = neg.iter().map(|_| false).chain(pos.iter().map(|_| true)).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        }

        #[test]
        fn mean_predictor_has_zero_r2(y in proptest::collection::vec(-50.0f64..50.0, 2..30)) {
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let r = regression(&vec![mean; y.len()], &y).unwrap();
            if r.r2.is_finite() {
                prop_assert!(r.r2.abs() < 1e-9);
            }
        }
    }
}
