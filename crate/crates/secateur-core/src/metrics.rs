//! Evaluation metrics: accuracy for classification, Pearson correlation for
//! regression.

use alloc::vec::Vec;

use crate::data::{Batch, Labels, TaskKind, TokenDataset};
use crate::error::CoreError;
use crate::gates::GateSet;
use crate::model::GatedTransformer;

/// Fraction of rows whose argmax (lowest index wins ties) equals the label.
pub fn accuracy(logits: &[f64], num_classes: usize, labels: &[u32]) -> f64 {
    debug_assert_eq!(logits.len(), labels.len() * num_classes);
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * num_classes..(r + 1) * num_classes];
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == label as usize {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Standard sample Pearson correlation; undefined (error) when either side
/// has zero variance.
pub fn pearson(pred: &[f64], target: &[f64]) -> Result<f64, CoreError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(CoreError::Shape("pearson requires equal, nonempty inputs".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (p, t) in pred.iter().zip(target) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(CoreError::Invalid("pearson undefined under zero variance".into()));
    }
    Ok(cov / libm::sqrt(vp * vt))
}

/// Metric of a model over a dataset: accuracy or Pearson per the task kind.
pub fn evaluate_dataset(
    model: &GatedTransformer,
    gates: Option<&GateSet>,
    ds: &TokenDataset,
    task_id: &str,
    batch_size: usize,
) -> Result<f64, CoreError> {
    let batches = ds.ordered_batches(batch_size);
    match ds.kind {
        TaskKind::Classification { num_classes } => {
            let mut correct = 0.0;
            let mut total = 0usize;
            for Batch { tokens, labels, size } in &batches {
                let logits = model.forward(tokens, *size, gates, task_id)?;
                if let Labels::Class(ls) = labels {
                    correct += accuracy(&logits, num_classes, ls) * *size as f64;
                    total += size;
                }
            }
            Ok(correct / total as f64)
        }
        TaskKind::Regression => {
            let mut preds: Vec<f64> = Vec::with_capacity(ds.len());
            let mut targets: Vec<f64> = Vec::with_capacity(ds.len());
            for Batch { tokens, labels, size } in &batches {
                let out = model.forward(tokens, *size, gates, task_id)?;
                preds.extend_from_slice(&out);
                if let Labels::Real(ts) = labels {
                    targets.extend_from_slice(ts);
                }
            }
            pearson(&preds, &targets)
        }
    }
}
