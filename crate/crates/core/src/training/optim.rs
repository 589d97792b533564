use indexmap::IndexMap;

use super::{LrDecay, TrainError};
use crate::tensor_core::ParamSet;

/// Momentum buffers, one per trainable parameter, zero-initialized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VelocityState {
    buffers: IndexMap<String, Vec<f64>>,
}

impl VelocityState {
    pub fn new(params: &ParamSet) -> Self {
        VelocityState {
            buffers: params
                .iter()
                .filter(|(_, t)| t.requires_grad)
                .map(|(k, t)| (k.to_string(), vec![0.0; t.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }
}

/// One SGD-with-momentum step on the gradients accumulated in each
/// parameter's `grad` buffer: `v <- momentum * v - lr * g; p <- p + v`,
/// for trainable parameters only (a missing gradient counts as zero).
///
/// Every gradient is checked before anything is touched, so a non-finite
/// gradient aborts the whole step and names the offending parameter.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    velocity: &mut VelocityState,
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    for (name, t) in params.iter().filter(|(_, t)| t.requires_grad) {
        let v = velocity
            .buffers
            .get(name)
            .ok_or_else(|| TrainError::Config(format!("no velocity buffer for trainable parameter {name}")))?;
        if v.len() != t.len() {
            return Err(TrainError::Config(format!(
                "velocity for {name} has {} entries, parameter has {}",
                v.len(),
                t.len()
            )));
        }
        if let Some(g) = &t.grad {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: name.to_string(),
                    index: i,
                });
            }
        }
    }
    for (name, t) in params.iter_mut().filter(|(_, t)| t.requires_grad) {
        let v = velocity.buffers.get_mut(name).expect("checked above");
        let grad = t.grad.take();
        let data = t.data_mut();
        match &grad {
            Some(g) => {
                for ((p, v), g) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = momentum * *v - lr * g;
                    *p += *v;
                }
            }
            None => {
                for (p, v) in data.iter_mut().zip(v.iter_mut()) {
                    *v *= momentum;
                    *p += *v;
                }
            }
        }
        t.grad = grad;
    }
    Ok(())
}

/// Learning rate with stagnation-triggered decay (see [`LrDecay`]).
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    lr: f64,
    decay: LrDecay,
    window: Vec<f64>,
    previous_mean: Option<f64>,
}

impl LrSchedule {
    pub fn new(lr: f64, decay: LrDecay) -> Self {
        LrSchedule {
            lr,
            decay,
            window: Vec::new(),
            previous_mean: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one iteration's loss; returns true when the rate was just decayed.
    pub fn record(&mut self, loss: f64) -> bool {
        if self.decay.patience == 0 {
            return false;
        }
        self.window.push(loss);
        if self.window.len() < self.decay.patience {
            return false;
        }
        let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
        self.window.clear();
        let decayed = match self.previous_mean {
            Some(prev) => prev - mean < self.decay.min_improvement * prev.abs(),
            None => false,
        };
        if decayed {
            self.lr *= self.decay.factor;
        }
        self.previous_mean = Some(mean);
        decayed
    }
}
