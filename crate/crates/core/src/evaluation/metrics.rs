//! Binary classification metrics with ADHD (class 1) as the positive class.
//!
//! Precision, recall and F1 are computed per class and averaged two ways:
//! weighted by class support and unweighted (macro). A class that is never
//! predicted has precision 0, and F1 is 0 when precision + recall is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scn::midranks;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(labels: &[usize], preds: &[usize]) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(preds) {
            match (y, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (1, 0) => c.fn_ += 1,
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "binary labels expected, got ({y}, {p})"
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Metric values; all lie in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub balanced_accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub auc: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 8] = [
        "balanced_accuracy",
        "precision_weighted",
        "recall_weighted",
        "f1_weighted",
        "precision_macro",
        "recall_macro",
        "f1_macro",
        "auc",
    ];

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.balanced_accuracy,
            self.precision_weighted,
            self.recall_weighted,
            self.f1_weighted,
            self.precision_macro,
            self.recall_macro,
            self.f1_macro,
            self.auc,
        ]
    }
}

/// Confusion counts plus metrics; `values` is `None` when the labels hold a
/// single class and the metrics are undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub confusion: Confusion,
    pub values: Option<MetricValues>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Area under the ROC curve from the rank-sum statistic, ties at midrank.
pub fn auc_midrank(labels: &[usize], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&y, _)| y == 1)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn compute_metrics(labels: &[usize], preds: &[usize], scores: &[f64]) -> Result<MetricSet> {
    let confusion = Confusion::from_labels(labels, preds)?;
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let Confusion { tp, fp, tn, fn_ } = confusion;
    let (n_pos, n_neg) = (tp + fn_, tn + fp);
    if n_pos == 0 || n_neg == 0 {
        return Ok(MetricSet {
            confusion,
            values: None,
        });
    }
    let n = (n_pos + n_neg) as f64;
    let (w_pos, w_neg) = (n_pos as f64 / n, n_neg as f64 / n);

    let recall_pos = ratio(tp, n_pos);
    let recall_neg = ratio(tn, n_neg);
    let precision_pos = ratio(tp, tp + fp);
    let precision_neg = ratio(tn, tn + fn_);
    let f1_pos = f1(precision_pos, recall_pos);
    let f1_neg = f1(precision_neg, recall_neg);

    let values = MetricValues {
        balanced_accuracy: (recall_pos + recall_neg) / 2.0,
        precision_weighted: w_pos * precision_pos + w_neg * precision_neg,
        recall_weighted: w_pos * recall_pos + w_neg * recall_neg,
        f1_weighted: w_pos * f1_pos + w_neg * f1_neg,
        precision_macro: (precision_pos + precision_neg) / 2.0,
        recall_macro: (recall_pos + recall_neg) / 2.0,
        f1_macro: (f1_pos + f1_neg) / 2.0,
        auc: auc_midrank(labels, scores)?,
    };
    Ok(MetricSet {
        confusion,
        values: Some(values),
    })
}

/// ROC curve `(fpr, tpr)` points from the most to the least confident
/// threshold, starting at (0, 0) and ending at (1, 1). Tied scores move
/// diagonally in one step.
pub fn roc_points(labels: &[usize], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || labels.len() != scores.len() {
        return Err(Error::InvalidInput(
            "ROC needs both classes and one score per label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let rough = values.iter().sum::<f64>() / n;
    // second-pass correction removes the rounding error of the first sum
    let mean = rough + values.iter().map(|v| v - rough).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some(MeanStd {
        mean,
        std: var.sqrt(),
    })
}

/// Cross-validation aggregate: per-metric mean ± sample std over folds with
/// defined metrics, and the pooled confusion matrix over all folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvAggregate {
    pub n_folds: usize,
    pub n_valid_folds: usize,
    pub excluded_folds: Vec<usize>,
    pub metrics: Vec<(String, MeanStd)>,
    pub pooled_confusion: Confusion,
}

impl CvAggregate {
    pub fn get(&self, name: &str) -> Option<MeanStd> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

pub fn aggregate_cv(folds: &[MetricSet]) -> Result<CvAggregate> {
    let mut pooled = Confusion::default();
    let mut valid = Vec::new();
    let mut excluded = Vec::new();
    for (i, f) in folds.iter().enumerate() {
        pooled.add(&f.confusion);
        match f.values {
            Some(v) => valid.push(v.as_array()),
            None => excluded.push(i),
        }
    }
    if valid.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "aggregation needs at least 2 folds with both classes, have {}",
            valid.len()
        )));
    }
    let metrics = MetricValues::NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let column: Vec<f64> = valid.iter().map(|v| v[k]).collect();
            (
                name.to_string(),
                mean_std(&column).expect("at least two folds"),
            )
        })
        .collect();
    Ok(CvAggregate {
        n_folds: folds.len(),
        n_valid_folds: valid.len(),
        excluded_folds: excluded,
        metrics,
        pooled_confusion: pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion_example() {
        let m = compute_metrics(&[1, 1, 0, 0], &[1, 0, 0, 0], &[0.9, 0.4, 0.2, 0.1]).unwrap();
        assert_eq!(
            m.confusion,
            Confusion {
                tp: 1,
                fp: 0,
                tn: 2,
                fn_: 1
            }
        );
        let v = m.values.unwrap();
        assert_eq!(v.balanced_accuracy, 0.75);
        // HC: precision 2/3, recall 1; ADHD: precision 1, recall 1/2
        assert!((v.precision_weighted - (0.5 * 2.0 / 3.0 + 0.5)).abs() < 1e-15);
        assert!((v.f1_macro - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(v.auc, 1.0);
    }

    #[test]
    fn perfect_and_tied() {
        let v = compute_metrics(&[0, 1, 1], &[0, 1, 1], &[0.1, 0.8, 0.9])
            .unwrap()
            .values
            .unwrap();
        assert!(v.as_array().iter().all(|&x| x == 1.0));
        assert_eq!(auc_midrank(&[0, 1, 0, 1], &[0.3; 4]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        let m = compute_metrics(&[1, 1], &[1, 0], &[0.7, 0.2]).unwrap();
        assert!(m.values.is_none());
        assert_eq!(m.confusion.total(), 2);
    }

    #[test]
    fn aggregate_sample_std() {
        let fold = |ba: f64| MetricSet {
            confusion: Confusion {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1,
            },
            values: Some(MetricValues {
                balanced_accuracy: ba,
                precision_weighted: ba,
                recall_weighted: ba,
                f1_weighted: ba,
                precision_macro: ba,
                recall_macro: ba,
                f1_macro: ba,
                auc: ba,
            }),
        };
        let agg = aggregate_cv(&[fold(0.7), fold(0.9)]).unwrap();
        let ba = agg.get("balanced_accuracy").unwrap();
        assert!((ba.mean - 0.8).abs() < 1e-15);
        assert!((ba.std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg.pooled_confusion.total(), 8);

        let same = aggregate_cv(&vec![fold(0.8); 10]).unwrap();
        assert_eq!(same.get("auc").unwrap().std, 0.0);

        let undefined = MetricSet {
            confusion: Confusion::default(),
            values: None,
        };
        let agg = aggregate_cv(&[fold(0.7), undefined.clone(), fold(0.9)]).unwrap();
        assert_eq!(agg.excluded_folds, vec![1]);
        assert!(aggregate_cv(&[fold(0.7), undefined]).is_err());
    }

    #[test]
    fn roc_endpoints() {
        let pts = roc_points(&[0, 1, 1, 0], &[0.1, 0.9, 0.5, 0.5]).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }
}
