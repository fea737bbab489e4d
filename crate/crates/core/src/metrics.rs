//! Open-set scores: per-class accuracy, OS* (mean known-class accuracy),
//! UNK (unknown recall) and their harmonic mean HOS.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A prediction or ground-truth label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Known(usize),
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Keyed by 1-based class id.
    pub per_class: BTreeMap<String, f64>,
    pub os_star: f64,
    /// `None` when the ground truth contains no unknown samples.
    pub unk: Option<f64>,
    pub hos: Option<f64>,
    /// `(C+1)²` counts, rows = truth, columns = prediction, last index =
    /// unknown.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub confusion: Vec<Vec<u64>>,
}

pub fn hos(os_star: f64, unk: f64) -> f64 {
    if os_star + unk > 0.0 {
        2.0 * os_star * unk / (os_star + unk)
    } else {
        0.0
    }
}

impl MetricsReport {
    /// Report from already-computed per-class accuracies and unknown recall.
    pub fn from_accuracies(per_class: &[f64], unk: Option<f64>) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::Empty("no known classes".into()));
        }
        let os_star = per_class.iter().sum::<f64>() / per_class.len() as f64;
        Ok(MetricsReport {
            per_class: per_class
                .iter()
                .enumerate()
                .map(|(c, &a)| ((c + 1).to_string(), a))
                .collect(),
            os_star,
            unk,
            hos: unk.map(|u| hos(os_star, u)),
            confusion: Vec::new(),
        })
    }

    /// Report from a `(C+1)×(C+1)` confusion matrix.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let n = confusion.len();
        if n < 2 || confusion.iter().any(|r| r.len() != n) {
            return Err(Error::shape("confusion", &[n, n], &[confusion.len()]));
        }
        let acc = |r: usize| {
            let total: u64 = confusion[r].iter().sum();
            (total > 0).then(|| confusion[r][r] as f64 / total as f64)
        };
        let per: Vec<f64> = (0..n - 1)
            .map(|r| acc(r).ok_or_else(|| Error::Empty(format!("no ground-truth samples for class {}", r + 1))))
            .collect::<Result<_>>()?;
        let mut r = Self::from_accuracies(&per, acc(n - 1))?;
        r.confusion = confusion;
        Ok(r)
    }
}

/// Known samples predicted unknown count as errors for their class.
pub fn compute_metrics(pred: &[Label], truth: &[Label], classes: usize) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape("compute_metrics", &[truth.len()], &[pred.len()]));
    }
    if truth.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let idx = |l: Label| -> Result<usize> {
        match l {
            Label::Known(c) if c < classes => Ok(c),
            Label::Known(c) => Err(Error::LabelOutOfRange { label: c, classes }),
            Label::Unknown => Ok(classes),
        }
    };
    let mut confusion = vec![vec![0u64; classes + 1]; classes + 1];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[idx(t)?][idx(p)?] += 1;
    }
    MetricsReport::from_confusion(confusion)
}
