//! Channel sparsification driven by batch-norm scale factors: L1 penalty, global
//! |γ| threshold, channel masks and their expansion to individual weights.
//!
//! Pruning a channel of block `L` zeroes its `gamma` and `beta`, its output filter in
//! block `L`'s kernel, and the matching input slice of the next kernel (the head for the
//! last block). The head itself has no scale factors and is never pruned.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradTape, Var};
use crate::detector::{ModelParams, ParamVars, Slot};
use crate::error::{Error, Result};

pub const MIN_SPARSITY: f64 = 0.01;
pub const MAX_SPARSITY: f64 = 0.99;

/// Fraction of prunable channels a client removes each round.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SparsityRate(f64);

impl SparsityRate {
    pub fn new(s: f64) -> Result<Self> {
        if (MIN_SPARSITY..=MAX_SPARSITY).contains(&s) {
            Ok(Self(s))
        } else {
            Err(Error::invalid(format!("sparsity rate {s} outside [{MIN_SPARSITY}, {MAX_SPARSITY}]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `ceil(s·n)`, guarding against representation error in `s·n`.
    pub fn channels_to_prune(self, n: usize) -> usize {
        ((self.0 * n as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

impl TryFrom<f64> for SparsityRate {
    type Error = Error;
    fn try_from(s: f64) -> Result<Self> {
        Self::new(s)
    }
}

impl From<SparsityRate> for f64 {
    fn from(s: SparsityRate) -> f64 {
        s.0
    }
}

/// `λ·Σ|γ|` over every batch-norm layer, recorded on the tape.
pub fn l1_penalty(tape: &mut GradTape, vars: &ParamVars, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("L1 weight must be nonnegative, got {lambda}")));
    }
    let mut total: Option<Var> = None;
    for g in vars.gammas() {
        let part = tape.abs_sum(g);
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("model has no batch-norm layers"))?;
    Ok(tape.scale(total, lambda))
}

pub fn l1_penalty_value(params: &ModelParams, lambda: f64) -> f64 {
    lambda * params.gamma_magnitudes().iter().sum::<f64>()
}

/// `(block, channel)` of the `ceil(s·n)` channels with smallest |γ|; ties keep
/// block-then-channel order.
fn ranked_prune_set(params: &ModelParams, s: SparsityRate) -> Result<(Vec<(usize, usize)>, f64)> {
    let mut entries: Vec<(f64, usize, usize)> = params
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(l, b)| b.bn.gamma.data().iter().enumerate().map(move |(c, g)| (g.abs(), l, c)))
        .collect();
    let n = entries.len();
    if n == 0 {
        return Err(Error::invalid("no prunable channels"));
    }
    let k = s.channels_to_prune(n);
    if k >= n {
        return Err(Error::PruneAll(n));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let threshold = entries[k - 1].0;
    Ok((entries[..k].iter().map(|&(_, l, c)| (l, c)).collect(), threshold))
}

/// The k-th smallest |γ| over all prunable channels, `k = ceil(s·n)`.
pub fn global_threshold(params: &ModelParams, s: SparsityRate) -> Result<f64> {
    ranked_prune_set(params, s).map(|(_, t)| t)
}

/// Per-layer channel keep-bits (`true` = retained).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseMask {
    channels: Vec<Vec<bool>>,
}

impl SparseMask {
    /// Mask that keeps every channel of `params`.
    pub fn ones(params: &ModelParams) -> Self {
        Self { channels: params.blocks.iter().map(|b| vec![true; b.bn.channels()]).collect() }
    }

    pub fn from_channels(channels: Vec<Vec<bool>>) -> Self {
        Self { channels }
    }

    pub fn channels(&self) -> &[Vec<bool>] {
        &self.channels
    }

    pub fn total_channels(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn pruned_channels(&self) -> usize {
        self.channels.iter().flatten().filter(|&&b| !b).count()
    }

    pub fn is_dense(&self) -> bool {
        self.pruned_channels() == 0
    }

    /// Bytes needed to transmit the channel bitmap.
    pub fn bitmap_bytes(&self) -> usize {
        self.total_channels().div_ceil(8)
    }

    pub fn check_architecture(&self, params: &ModelParams) -> Result<()> {
        if self.channels.len() != params.blocks.len() {
            return Err(Error::Architecture {
                layer: "mask".into(),
                reason: format!("{} mask layers for {} blocks", self.channels.len(), params.blocks.len()),
            });
        }
        for (i, (bits, block)) in self.channels.iter().zip(&params.blocks).enumerate() {
            if bits.len() != block.bn.channels() {
                return Err(Error::Architecture {
                    layer: format!("block{i}"),
                    reason: format!("mask has {} channels, layer has {}", bits.len(), block.bn.channels()),
                });
            }
        }
        Ok(())
    }

    /// Per-weight keep-bits for every trainable tensor, in trainable-slot order.
    pub fn weight_mask(&self, params: &ModelParams) -> Result<Vec<(Slot, Vec<bool>)>> {
        self.check_architecture(params)?;
        let mut out: Vec<(Slot, Vec<bool>)> =
            params.trainable_slots().into_iter().map(|s| (s, vec![true; params.get(s).len()])).collect();
        let slots: Vec<Slot> = out.iter().map(|(s, _)| *s).collect();
        let index = |slot: Slot| slots.iter().position(|&s| s == slot).expect("trainable slot");
        for (l, bits) in self.channels.iter().enumerate() {
            for (c, _) in bits.iter().enumerate().filter(|(_, &keep)| !keep) {
                let gi = index(Slot::Gamma(l));
                out[gi].1[c] = false;
                let bi = index(Slot::Beta(l));
                out[bi].1[c] = false;

                let kernel = &params.blocks[l].kernel;
                let filter = kernel.len() / kernel.shape()[0];
                let ki = index(Slot::Kernel(l));
                out[ki].1[c * filter..(c + 1) * filter].fill(false);

                let next = if l + 1 < params.blocks.len() { Slot::Kernel(l + 1) } else { Slot::HeadKernel };
                let shape = params.get(next).shape().to_vec();
                let (c_out, c_in, area) = (shape[0], shape[1], shape[2] * shape[3]);
                let ni = index(next);
                for o in 0..c_out {
                    let start = (o * c_in + c) * area;
                    out[ni].1[start..start + area].fill(false);
                }
            }
        }
        Ok(out)
    }
}

/// Masks the `ceil(s·n)` lowest-|γ| channels. `threshold` must come from
/// [`global_threshold`] on the same parameters.
pub fn build_mask(params: &ModelParams, threshold: f64, s: SparsityRate) -> Result<SparseMask> {
    let (pruned, t) = ranked_prune_set(params, s)?;
    if t != threshold {
        return Err(Error::invalid(format!("threshold {threshold} does not match these parameters ({t})")));
    }
    let mut mask = SparseMask::ones(params);
    for (l, c) in pruned {
        mask.channels[l][c] = false;
    }
    Ok(mask)
}

/// `w ⊙ m`: every masked weight becomes exactly `0.0`; shapes are unchanged.
pub fn apply_mask(params: &ModelParams, mask: &SparseMask) -> Result<ModelParams> {
    let weight_mask = mask.weight_mask(params)?;
    let mut out = params.clone();
    for (slot, bits) in weight_mask {
        let t = out.get_mut(slot);
        for (v, keep) in t.data_mut().iter_mut().zip(bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub pruned_weights: usize,
    pub total_weights: usize,
}

/// Exact count of weights covered by the mask's expansion.
pub fn prune_report(mask: &SparseMask, params: &ModelParams) -> Result<PruneReport> {
    let wm = mask.weight_mask(params)?;
    let pruned_weights = wm.iter().map(|(_, bits)| bits.iter().filter(|&&b| !b).count()).sum();
    Ok(PruneReport { pruned_weights, total_weights: params.parameter_count() })
}
