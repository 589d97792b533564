//! Offset-stabilized multi-label loss, per-AU F1 scoring and subject folds.

mod f1;
mod folds;
pub mod report;

pub use f1::{f1_per_label, ConfusionCounts, F1Report};
pub use folds::{subject_kfold_split, FoldAssignment};

use crate::tensor_core::{Graph, NodeId, Tensor, TensorError};

/// Additive offset inside both log terms of the loss.
pub const LOSS_OFFSET: f64 = 0.05;
/// Normalizer keeping each log argument at most 1.
pub const LOSS_SCALE: f64 = 1.0 + LOSS_OFFSET;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("probability {value} at ({row},{col}) is outside [0,1]")]
    ProbabilityRange { row: usize, col: usize, value: f64 },
    #[error("label {value} at ({row},{col}) is not binary")]
    NonBinaryLabel { row: usize, col: usize, value: u8 },
    #[error("cannot split {subjects} subjects into {k} folds")]
    TooFewSubjects { subjects: usize, k: usize },
    #[error("threshold {0} must lie in (0,1)")]
    Threshold(f64),
}

/// Binary per-frame AU labels, row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self, MetricsError> {
        if data.len() != rows * cols {
            return Err(MetricsError::Shape(format!(
                "{rows}x{cols} labels need {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(MetricsError::NonBinaryLabel {
                row: i / cols,
                col: i % cols,
                value: data[i],
            });
        }
        Ok(LabelMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, MetricsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MetricsError::Shape("ragged label rows".into()));
        }
        LabelMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Predicted per-AU probabilities, row-major `rows x cols`, entries in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProbMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MetricsError> {
        if data.len() != rows * cols {
            return Err(MetricsError::Shape(format!(
                "{rows}x{cols} probabilities need {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(MetricsError::ProbabilityRange {
                row: i / cols,
                col: i % cols,
                value: data[i],
            });
        }
        Ok(ProbMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Stacks matrices with equal column counts.
    pub fn vstack(parts: &[ProbMatrix]) -> Result<Self, MetricsError> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(MetricsError::Shape("vstack column mismatch".into()));
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        ProbMatrix::new(data.len() / cols.max(1), cols, data)
    }
}

fn check_shapes(probs: &ProbMatrix, labels: &LabelMatrix) -> Result<(), MetricsError> {
    if probs.rows != labels.rows || probs.cols != labels.cols {
        return Err(MetricsError::Shape(format!(
            "probs {}x{} vs labels {}x{}",
            probs.rows, probs.cols, labels.rows, labels.cols
        )));
    }
    Ok(())
}

/// Loss contribution of one (probability, label) pair.
#[inline]
pub fn offset_loss_term(p: f64, label: u8) -> f64 {
    if label == 1 {
        -((p + LOSS_OFFSET) / LOSS_SCALE).ln()
    } else {
        -((LOSS_SCALE - p) / LOSS_SCALE).ln()
    }
}

/// Offset multi-label loss summed over every entry:
/// `-sum( l*log((p+0.05)/1.05) + (1-l)*log((1.05-p)/1.05) )`.
pub fn multilabel_loss(probs: &ProbMatrix, labels: &LabelMatrix) -> Result<f64, MetricsError> {
    check_shapes(probs, labels)?;
    Ok(probs
        .data
        .iter()
        .zip(&labels.data)
        .map(|(&p, &l)| offset_loss_term(p, l))
        .sum())
}

/// Same loss divided by the number of entries, as reported in logs.
pub fn multilabel_loss_mean(probs: &ProbMatrix, labels: &LabelMatrix) -> Result<f64, MetricsError> {
    let n = (probs.rows * probs.cols).max(1) as f64;
    Ok(multilabel_loss(probs, labels)? / n)
}

/// Records the summed loss on a graph. `probs` holds values in [0,1] and
/// `labels` matches its element count (0.0 / 1.0 entries).
pub fn multilabel_loss_node(g: &mut Graph, probs: NodeId, labels: &[f64]) -> Result<NodeId, TensorError> {
    let shape = g.shape(probs).to_vec();
    let l = g.constant(Tensor::new(shape.clone(), labels.to_vec())?);
    let not_l = g.constant(Tensor::new(shape, labels.iter().map(|v| 1.0 - v).collect())?);
    let pos_arg = g.affine(probs, 1.0 / LOSS_SCALE, LOSS_OFFSET / LOSS_SCALE);
    let neg_arg = g.affine(probs, -1.0 / LOSS_SCALE, 1.0);
    let pos = g.ln(pos_arg);
    let neg = g.ln(neg_arg);
    let a = g.mul(l, pos)?;
    let b = g.mul(not_l, neg)?;
    let both = g.add(a, b)?;
    let total = g.sum(both);
    Ok(g.affine(total, -1.0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::grad_check;

    fn pm(rows: usize, cols: usize, d: Vec<f64>) -> ProbMatrix {
        ProbMatrix::new(rows, cols, d).unwrap()
    }

    fn lm(rows: usize, cols: usize, d: Vec<u8>) -> LabelMatrix {
        LabelMatrix::new(rows, cols, d).unwrap()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let l = lm(2, 3, vec![1, 0, 1, 0, 0, 1]);
        let p = pm(2, 3, l.to_f64());
        assert_eq!(multilabel_loss(&p, &l).unwrap(), 0.0);
    }

    #[test]
    fn worked_values() {
        let one = lm(1, 1, vec![1]);
        let v = multilabel_loss(&pm(1, 1, vec![0.0]), &one).unwrap();
        assert!((v - 21f64.ln()).abs() < 1e-12);
        assert!((v - 3.0445224377234230).abs() < 1e-12);
        let v = multilabel_loss(&pm(1, 1, vec![0.5]), &one).unwrap();
        assert!((v - (1.05f64 / 0.55).ln()).abs() < 1e-15);
        assert!((v - 0.6466271649250525).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_probability_rejected() {
        assert!(matches!(
            ProbMatrix::new(1, 2, vec![0.5, 1.2]),
            Err(MetricsError::ProbabilityRange { row: 0, col: 1, .. })
        ));
        assert!(LabelMatrix::new(1, 1, vec![2]).is_err());
        let err = multilabel_loss(&pm(1, 2, vec![0.5, 0.5]), &lm(2, 1, vec![0, 1]));
        assert!(matches!(err, Err(MetricsError::Shape(_))));
    }

    #[test]
    fn graph_loss_matches_direct_and_is_differentiable_at_endpoints() {
        let probs = vec![0.0, 1.0, 0.3, 1.0, 0.0, 0.75];
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let direct = multilabel_loss(
            &pm(2, 3, probs.clone()),
            &lm(2, 3, labels.iter().map(|&v| v as u8).collect()),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = g.variable(Tensor::new(vec![2, 3], probs.clone()).unwrap());
        let loss = multilabel_loss_node(&mut g, p, &labels).unwrap();
        assert!((g.scalar(loss) - direct).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let d = grads.get(p).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
        // d/dp at p=0, l=1 is -1/(0+0.05)
        assert!((d[0] + 20.0).abs() < 1e-12);
        // d/dp at p=1, l=0 is 1/(1.05-1)
        assert!((d[1] - 20.0).abs() < 1e-9);

        // interior points agree with finite differences
        let inner = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.9]).unwrap();
        let r = grad_check(
            |g, ins| multilabel_loss_node(g, ins[0], &[1.0, 0.0, 1.0]),
            &[inner],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
