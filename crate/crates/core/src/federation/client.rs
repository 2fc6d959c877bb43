use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::detector::{LossConfig, ModelParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::sparsifier::{apply_mask, build_mask, global_threshold, prune_report, PruneReport, SparseMask, SparsityRate};
use crate::training::train_step;

/// A simulated edge device.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub sparsity: SparsityRate,
    /// Indices of this client's images in the shared training set.
    pub partition: Vec<usize>,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Mask from the client's latest round; `None` before its first round.
    pub retained_mask: Option<SparseMask>,
}

impl ClientState {
    pub fn num_samples(&self) -> usize {
        self.partition.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.partition.is_empty() {
            return Err(Error::invalid(format!("client {} has no data", self.id)));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(format!("client {}: epochs and batch size must be ≥ 1", self.id)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("client {}: learning rate must be positive", self.id)));
        }
        Ok(())
    }
}

/// Objective and pruning behavior of local training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub loss: LossConfig,
    /// L1 weight on batch-norm scale factors.
    pub lambda: f64,
    /// Whether to threshold, mask and prune after training.
    pub sparse: bool,
}

/// What a client uploads after local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `w ⊙ m`.
    pub params: ModelParams,
    pub mask: SparseMask,
    /// Mean objective per local epoch.
    pub loss_trace: Vec<f64>,
    pub report: PruneReport,
    pub num_samples: usize,
}

/// Local sparse training of one client starting from the global model.
///
/// The incoming model is first multiplied by the client's retained mask, then trained
/// for `local_epochs` epochs of minibatch SGD, then pruned at the client's sparsity rate.
pub fn edge_model_update(
    client: &ClientState,
    global: &ModelParams,
    data: &Dataset,
    training: &LocalTraining,
    seed: u64,
) -> Result<ClientUpdate> {
    client.validate()?;
    let mut params = match (&client.retained_mask, training.sparse) {
        (Some(mask), true) => apply_mask(global, mask)?,
        _ => global.clone(),
    };
    let lambda = if training.sparse { training.lambda } else { 0.0 };
    let mut rng = rng::stream(seed, &[]);
    let mut order = client.partition.clone();
    let mut loss_trace = Vec::with_capacity(client.local_epochs);
    for epoch in 0..client.local_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(client.batch_size) {
            let (images, targets) = data.batch(batch);
            let step = train_step(&mut params, &images, &targets, &training.loss, lambda, client.learning_rate)
                .map_err(|e| Error::Diverged { client: client.id, reason: format!("epoch {epoch}: {e}") })?;
            total += step.objective() * batch.len() as f64;
        }
        if !params.all_finite() {
            return Err(Error::Diverged { client: client.id, reason: format!("non-finite weights after epoch {epoch}") });
        }
        loss_trace.push(total / order.len() as f64);
    }
    let (params, mask, report) = if training.sparse {
        let t = global_threshold(&params, client.sparsity)?;
        let mask = build_mask(&params, t, client.sparsity)?;
        let masked = apply_mask(&params, &mask)?;
        let report = prune_report(&mask, &masked)?;
        (masked, mask, report)
    } else {
        let mask = SparseMask::ones(&params);
        let report = PruneReport { pruned_weights: 0, total_weights: params.parameter_count() };
        (params, mask, report)
    };
    Ok(ClientUpdate { client_id: client.id, params, mask, loss_trace, report, num_samples: client.num_samples() })
}
