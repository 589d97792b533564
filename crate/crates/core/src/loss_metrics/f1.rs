use serde::{Deserialize, Serialize};

use super::{check_shapes, LabelMatrix, MetricsError, ProbMatrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// F1 with the degenerate cases pinned: no positives anywhere scores 1,
    /// positives present but none found scores 0.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        // 2PR / (P + R) with the counts substituted: one rounding only
        (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_au: Vec<f64>,
    pub average: f64,
    pub counts: Vec<ConfusionCounts>,
    pub threshold: f64,
}

/// Per-AU F1 of thresholded predictions (`p >= threshold`) and their unweighted mean.
pub fn f1_per_label(probs: &ProbMatrix, labels: &LabelMatrix, threshold: f64) -> Result<F1Report, MetricsError> {
    check_shapes(probs, labels)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::Threshold(threshold));
    }
    let mut counts = vec![ConfusionCounts::default(); labels.cols()];
    for r in 0..labels.rows() {
        for (c, cc) in counts.iter_mut().enumerate() {
            let predicted = probs.get(r, c) >= threshold;
            match (predicted, labels.get(r, c) == 1) {
                (true, true) => cc.tp += 1,
                (true, false) => cc.fp += 1,
                (false, true) => cc.fn_ += 1,
                (false, false) => cc.tn += 1,
            }
        }
    }
    let per_au: Vec<f64> = counts.iter().map(ConfusionCounts::f1).collect();
    let average = if per_au.is_empty() {
        0.0
    } else {
        per_au.iter().sum::<f64>() / per_au.len() as f64
    };
    Ok(F1Report {
        per_au,
        average,
        counts,
        threshold,
    })
}
