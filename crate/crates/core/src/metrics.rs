use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class scores for every class that occurs in `predictions` or `labels`.
pub fn class_scores(predictions: &[usize], labels: &[usize]) -> Result<Vec<ClassScores>> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("metrics of an empty set".into()));
    }
    let classes = predictions.iter().chain(labels).copied().max().unwrap_or(0) + 1;
    // tp, predicted count, actual count
    let mut counts = vec![(0usize, 0usize, 0usize); classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        counts[p].1 += 1;
        counts[y].2 += 1;
        if p == y {
            counts[p].0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .filter(|(_, (_, pred, actual))| pred + actual > 0)
        .map(|(class, (tp, pred, actual))| {
            let precision = ratio(tp, pred);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                class,
                precision,
                recall,
                f1,
            }
        })
        .collect())
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    let per_class = class_scores(predictions, labels)?;
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    let k = per_class.len() as f64;
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    Ok(Metrics {
        accuracy: ratio(correct, labels.len()),
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
    })
}
