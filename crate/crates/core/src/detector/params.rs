use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DetectorConfig;
use crate::autodiff::{BatchNormLayer, BatchStats, Gradients, Tensor, Var};
use crate::error::{Error, Result};

/// Initial value of every batch-norm scale factor.
pub const GAMMA_INIT: f64 = 0.5;

/// Convolution (3×3, stride 1, padding 1, no bias) followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bn: BatchNormLayer,
}

/// 1×1 convolution with bias mapping the last block to per-cell predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Addresses one tensor inside [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Kernel(usize),
    Gamma(usize),
    Beta(usize),
    RunningMean(usize),
    RunningVar(usize),
    HeadKernel,
    HeadBias,
}

impl Slot {
    pub fn is_trainable(self) -> bool {
        !matches!(self, Slot::RunningMean(_) | Slot::RunningVar(_))
    }

    pub fn name(self) -> String {
        match self {
            Slot::Kernel(i) => format!("block{i}.kernel"),
            Slot::Gamma(i) => format!("block{i}.gamma"),
            Slot::Beta(i) => format!("block{i}.beta"),
            Slot::RunningMean(i) => format!("block{i}.running_mean"),
            Slot::RunningVar(i) => format!("block{i}.running_var"),
            Slot::HeadKernel => "head.kernel".into(),
            Slot::HeadBias => "head.bias".into(),
        }
    }
}

/// Ordered parameters of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: DetectorConfig,
    pub blocks: Vec<ConvBlock>,
    pub head: DetectionHead,
}

/// Deterministic He-normal initialization from `seed`; batch-norm `gamma = 0.5`, `beta = 0`.
pub fn build_model(config: &DetectorConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_in = config.in_channels;
    let mut blocks = Vec::with_capacity(config.channel_widths.len());
    for &width in &config.channel_widths {
        let fan_in = c_in * 9;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let kernel = Tensor::from_fn(&[width, c_in, 3, 3], |_| normal.sample(&mut rng));
        blocks.push(ConvBlock { kernel, bn: BatchNormLayer::new(width, GAMMA_INIT) });
        c_in = width;
    }
    let depth = config.cell_depth();
    let normal = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).expect("positive std");
    let head = DetectionHead {
        kernel: Tensor::from_fn(&[depth, c_in, 1, 1], |_| normal.sample(&mut rng)),
        bias: Tensor::zeros(&[depth]),
    };
    Ok(ModelParams { config: config.clone(), blocks, head })
}

impl ModelParams {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Every tensor in canonical order: per block kernel, gamma, beta, running mean,
    /// running variance; then head kernel and bias.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.blocks.len() * 5 + 2);
        for i in 0..self.blocks.len() {
            out.extend([
                Slot::Kernel(i),
                Slot::Gamma(i),
                Slot::Beta(i),
                Slot::RunningMean(i),
                Slot::RunningVar(i),
            ]);
        }
        out.extend([Slot::HeadKernel, Slot::HeadBias]);
        out
    }

    pub fn trainable_slots(&self) -> Vec<Slot> {
        self.slots().into_iter().filter(|s| s.is_trainable()).collect()
    }

    pub fn get(&self, slot: Slot) -> &Tensor {
        match slot {
            Slot::Kernel(i) => &self.blocks[i].kernel,
            Slot::Gamma(i) => &self.blocks[i].bn.gamma,
            Slot::Beta(i) => &self.blocks[i].bn.beta,
            Slot::RunningMean(i) => &self.blocks[i].bn.running_mean,
            Slot::RunningVar(i) => &self.blocks[i].bn.running_var,
            Slot::HeadKernel => &self.head.kernel,
            Slot::HeadBias => &self.head.bias,
        }
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut Tensor {
        match slot {
            Slot::Kernel(i) => &mut self.blocks[i].kernel,
            Slot::Gamma(i) => &mut self.blocks[i].bn.gamma,
            Slot::Beta(i) => &mut self.blocks[i].bn.beta,
            Slot::RunningMean(i) => &mut self.blocks[i].bn.running_mean,
            Slot::RunningVar(i) => &mut self.blocks[i].bn.running_var,
            Slot::HeadKernel => &mut self.head.kernel,
            Slot::HeadBias => &mut self.head.bias,
        }
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.trainable_slots().iter().map(|&s| self.get(s).len()).sum()
    }

    /// Rebuilds parameters from tensors in [`ModelParams::slots`] order.
    pub fn from_tensors(config: &DetectorConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut params = build_model(config, 0)?;
        let slots = params.slots();
        if tensors.len() != slots.len() {
            return Err(Error::Architecture {
                layer: "model".into(),
                reason: format!("expected {} tensors, got {}", slots.len(), tensors.len()),
            });
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            let dst = params.get_mut(slot);
            if dst.shape() != t.shape() {
                return Err(Error::Architecture {
                    layer: slot.name(),
                    reason: format!("expected shape {:?}, got {:?}", dst.shape(), t.shape()),
                });
            }
            *dst = t;
        }
        Ok(params)
    }

    /// Errors unless `other` has identical tensor shapes.
    pub fn check_same_architecture(&self, other: &ModelParams) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Architecture {
                layer: "model".into(),
                reason: format!("{} blocks vs {}", self.blocks.len(), other.blocks.len()),
            });
        }
        for slot in self.slots() {
            if self.get(slot).shape() != other.get(slot).shape() {
                return Err(Error::Architecture {
                    layer: slot.name(),
                    reason: format!("{:?} vs {:?}", self.get(slot).shape(), other.get(slot).shape()),
                });
            }
        }
        Ok(())
    }

    /// Copies gradients from a backward pass onto the trainable tensors.
    pub fn set_grads(&mut self, vars: &ParamVars, grads: &Gradients) -> Result<()> {
        for &(slot, var) in &vars.entries {
            let g = grads.get(var).ok_or_else(|| Error::MissingGrad(slot.name()))?;
            self.get_mut(slot).set_grad(g.to_vec())?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots() {
            self.get_mut(slot).clear_grad();
        }
    }

    /// Plain SGD: `w ← w − α·∇w` on every trainable tensor, then clears gradients.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        let slots = self.trainable_slots();
        if let Some(missing) = slots.iter().find(|&&s| self.get(s).grad().is_none()) {
            return Err(Error::MissingGrad(missing.name()));
        }
        for slot in slots {
            let t = self.get_mut(slot);
            let grad = t.grad().expect("checked above").to_vec();
            t.data_mut().iter_mut().zip(&grad).for_each(|(w, g)| *w -= learning_rate * g);
            t.clear_grad();
        }
        Ok(())
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.bn.update_running(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots().into_iter().all(|s| self.get(s).all_finite())
    }

    /// Concatenated absolute batch-norm scale factors, layer by layer.
    pub fn gamma_magnitudes(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.bn.gamma.data().iter().map(|g| g.abs())).collect()
    }
}

/// Tape handles of the trainable tensors bound during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    pub(crate) entries: Vec<(Slot, Var)>,
}

impl ParamVars {
    pub fn get(&self, slot: Slot) -> Option<Var> {
        self.entries.iter().find(|(s, _)| *s == slot).map(|&(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Slot, Var)> + '_ {
        self.entries.iter().copied()
    }

    pub fn gammas(&self) -> Vec<Var> {
        self.entries.iter().filter(|(s, _)| matches!(s, Slot::Gamma(_))).map(|&(_, v)| v).collect()
    }
}
