//! Top-1 accuracy and mean average precision.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn top1(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", scores.len(), labels.len())));
    }
    let hits = scores.iter().zip(labels).filter(|(s, &y)| argmax(s) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Average precision of one class: mean precision at each positive when
/// samples are ranked by descending score. Equal scores keep sample order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let positives = positive.iter().filter(|&&p| p).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    /// In `[0, 1]`.
    pub map: f64,
    /// Classes left out because no sample carries them.
    pub skipped: Vec<usize>,
}

/// One-vs-rest mAP over `num_classes` classes.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<MapResult> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", scores.len(), labels.len())));
    }
    if let Some(row) = scores.iter().find(|s| s.len() != num_classes) {
        return Err(Error::Metric(format!("score row of length {} for {num_classes} classes", row.len())));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = Vec::new();
    for c in 0..num_classes {
        let column: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        match average_precision(&column, &positive) {
            Some(ap) => {
                total += ap;
                counted += 1;
            }
            None => skipped.push(c),
        }
    }
    if counted == 0 {
        return Err(Error::Metric("no class has a positive sample".into()));
    }
    if !skipped.is_empty() {
        log::warn!("mAP skips classes without positives: {skipped:?}");
    }
    Ok(MapResult { map: total / counted as f64, skipped })
}
