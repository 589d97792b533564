use super::{Graph, NodeId, Op, Tensor, TensorError};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    /// Coordinates whose +/-eps evaluations switched a ReLU sign or a
    /// max-pool winner relative to the unperturbed point. Central
    /// differences straddle a kink there and are not a valid reference.
    /// Those coordinates are re-differenced with steps eps/10, eps/100, ...
    /// until neither side crosses.
    pub kink_crossings: usize,
    /// Crossing coordinates no smaller step could separate from the kink;
    /// they are not compared.
    pub unresolved: usize,
}

/// Step reductions tried for a coordinate whose difference straddles a kink.
const KINK_REFINEMENTS: i32 = 4;

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.unresolved == 0
    }
}

/// Compares reverse-mode gradients of a scalar-valued closure against
/// central differences, coordinate by coordinate over every input.
///
/// The closure receives a fresh graph and one leaf per input, and returns the
/// scalar output node.
pub fn grad_check<F>(op: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument(format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }
    let eval = |values: &[Tensor], track: bool| -> Result<(Graph, Vec<NodeId>, NodeId), TensorError> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values
            .iter()
            .map(|t| g.leaf(t.clone().with_grad(track)))
            .collect();
        let out = op(&mut g, &leaves)?;
        if g.value(out).len() != 1 {
            return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok((g, leaves, out))
    };

    let (g, leaves, out) = eval(inputs, true)?;
    let base_pattern = activation_pattern(&g);
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&l, t)| grads.get_or_zeros(l, t.len()))
        .collect();
    drop(g);
    for (i, a) in analytic.iter().enumerate() {
        if let Some(j) = a.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteGradient {
                input: i,
                coordinate: j,
            });
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        kink_crossings: 0,
        unresolved: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    // central difference at step `h`, and whether either side left the
    // unperturbed point's linear piece
    let mut difference = |i: usize, j: usize, h: f64| -> Result<(f64, bool), TensorError> {
        let orig = inputs[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let (gp, _, op_) = eval(&work, false)?;
        let plus = gp.scalar(op_);
        let mut crossed = activation_pattern(&gp) != base_pattern;
        work[i].data_mut()[j] = orig - h;
        let (gm, _, om) = eval(&work, false)?;
        let minus = gm.scalar(om);
        crossed |= activation_pattern(&gm) != base_pattern;
        work[i].data_mut()[j] = orig;
        Ok(((plus - minus) / (2.0 * h), crossed))
    };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let (mut numeric, crossed) = difference(i, j, eps)?;
            if crossed {
                // retry with smaller steps until both sides stay on one piece
                report.kink_crossings += 1;
                let mut resolved = false;
                for k in 1..=KINK_REFINEMENTS {
                    let (n, c) = difference(i, j, eps * 0.1f64.powi(k))?;
                    if !c {
                        numeric = n;
                        resolved = true;
                        break;
                    }
                }
                if !resolved {
                    report.unresolved += 1;
                    continue;
                }
            }
            let a = analytic[i][j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFiniteGradient {
                    input: i,
                    coordinate: j,
                });
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Which side of every kink the graph's values sit on: the sign of each
/// ReLU input and the winner of each max-pool window.
fn activation_pattern(g: &Graph) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..g.len() {
        let node = g.node(NodeId(i));
        match &node.op {
            Op::Relu => out.extend(g.data(node.inputs[0]).iter().map(|&v| usize::from(v > 0.0))),
            Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
            _ => {}
        }
    }
    out
}
