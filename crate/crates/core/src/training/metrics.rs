use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(preds: &[usize], labels: &[usize], k: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&y| y >= k) {
        return Err(Error::invalid(format!("class {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check(preds, labels, k)?;
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y][p] += 1;
    }
    Ok(m)
}

fn f1_from_confusion(m: &[Vec<usize>]) -> Vec<f64> {
    let k = m.len();
    (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let predicted: usize = (0..k).map(|r| m[r][c]).sum();
            let actual: usize = m[c].iter().sum();
            let denom = predicted + actual;
            if denom == 0 || tp == 0.0 {
                0.0
            } else {
                2.0 * tp / denom as f64
            }
        })
        .collect()
}

/// F1 of every class; zero when precision and recall are both zero.
pub fn per_class_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    Ok(f1_from_confusion(&confusion_matrix(preds, labels, k)?))
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    let m = confusion_matrix(preds, labels, k)?;
    let f1 = f1_from_confusion(&m);
    let n = labels.len() as f64;
    Ok(m.iter()
        .zip(&f1)
        .map(|(row, f)| row.iter().sum::<usize>() as f64 * f)
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: IndexMap<String, f64>,
    pub support: IndexMap<String, usize>,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn compute(preds: &[usize], labels: &[usize], label_names: &[String]) -> Result<Self> {
        let k = label_names.len();
        let confusion = confusion_matrix(preds, labels, k)?;
        let f1 = f1_from_confusion(&confusion);
        let n = labels.len();
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let weighted_f1 = support.iter().zip(&f1).map(|(&s, f)| s as f64 * f).sum::<f64>() / n as f64;
        Ok(MetricsReport {
            count: n,
            accuracy: correct as f64 / n as f64,
            weighted_f1,
            per_class_f1: label_names.iter().cloned().zip(f1).collect(),
            support: label_names.iter().cloned().zip(support).collect(),
            confusion,
        })
    }
}
