use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality summary.
///
/// Macro scores are unweighted means over classes. A class that is never
/// predicted has precision 0; a class absent from the labels has recall 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Support-weighted variants.
    pub weighted_precision: f64,
    pub weighted_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn compute_metrics(pred: &[usize], labels: &[usize], k: usize) -> Result<MetricsReport> {
    if pred.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("no predictions".into()));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in pred.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(Error::Argument(format!("class index out of range 0..{k}")));
        }
        confusion[y][p] += 1;
    }
    let n = pred.len() as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut support = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c];
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        support.push(actual as f64 / n);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
    let weighted = |v: &[f64]| v.iter().zip(&support).map(|(a, w)| a * w).sum::<f64>();
    Ok(MetricsReport {
        accuracy: (0..k).map(|c| confusion[c][c]).sum::<usize>() as f64 / n,
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        weighted_precision: weighted(&precision),
        weighted_f1: weighted(&f1),
        precision,
        recall,
        f1,
        confusion,
    })
}
