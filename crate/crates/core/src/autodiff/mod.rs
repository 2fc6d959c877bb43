//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Values recorded on a [`GradTape`] are immutable. Each op stores whatever it needs
//! for its vector-Jacobian product (unfolded patches for convolution, normalized
//! activations for batch norm, argmax indices for pooling), so the backward pass is a
//! single reverse sweep over the tape.

mod kernels;
mod tape;
mod tensor;

pub use tape::{BatchStats, GradTape, Gradients, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Momentum of the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
/// Negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Per-channel batch normalization state: affine `gamma`/`beta` plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(channels: usize, gamma_init: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], gamma_init),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [("beta", &self.beta), ("running_mean", &self.running_mean), ("running_var", &self.running_var)] {
            if t.len() != c {
                return Err(Error::shape(format!("batch norm {name} has {} entries, gamma has {c}", t.len())));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("batch norm epsilon must be positive"));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("batch norm running variance must be nonnegative"));
        }
        Ok(())
    }

    /// Exponential moving average update of the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = BN_MOMENTUM;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Output of [`batchnorm_forward`]: the normalized activation and the tape handles of the
/// affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormVars {
    pub output: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Batch normalization of `input`. In training mode the batch statistics are used and the
/// layer's running statistics are advanced; otherwise the running statistics are used.
pub fn batchnorm_forward(
    tape: &mut GradTape,
    input: Var,
    layer: &mut BatchNormLayer,
    training: bool,
) -> Result<BatchNormVars> {
    layer.validate()?;
    let gamma = tape.param(&layer.gamma);
    let beta = tape.param(&layer.beta);
    let output = if training {
        let (out, stats) = tape.batch_norm_train(input, gamma, beta, layer.epsilon)?;
        layer.update_running(&stats);
        out
    } else {
        tape.batch_norm_eval(
            input,
            gamma,
            beta,
            layer.running_mean.data(),
            layer.running_var.data(),
            layer.epsilon,
        )?
    };
    Ok(BatchNormVars { output, gamma, beta })
}
