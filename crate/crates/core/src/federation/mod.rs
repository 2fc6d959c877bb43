//! Round-based federated simulation: client sampling, local sparse training,
//! aggregation and communication accounting.

mod aggregate;
mod client;

pub use aggregate::{fedavg_aggregate, fedavg_weights, fedweg_aggregate, fedweg_weights, mean, weighted_sum};
pub use client::{edge_model_update, ClientState, ClientUpdate, LocalTraining};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::detector::ModelParams;
use crate::error::{Error, Result};
use crate::rng;
use crate::training::{evaluate, EvalSettings};

/// Bytes per transmitted weight.
pub const BYTES_PER_WEIGHT: i64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Dense training, size-weighted averaging.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Sparse training, size-weighted averaging.
    #[serde(rename = "s-fedavg")]
    SFedAvg,
    /// Sparse training, inverse-sparsity weighting.
    #[serde(rename = "s-fedweg")]
    SFedWeg,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FedAvg, Method::SFedAvg, Method::SFedWeg];

    pub fn is_sparse(self) -> bool {
        !matches!(self, Method::FedAvg)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::SFedAvg => "s-fedavg",
            Method::SFedWeg => "s-fedweg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Method::FedAvg),
            "s-fedavg" | "sfedavg" => Ok(Method::SFedAvg),
            "s-fedweg" | "sfedweg" | "fedweg" => Ok(Method::SFedWeg),
            other => Err(Error::invalid(format!("unknown method `{other}` (fedavg, s-fedavg, s-fedweg)"))),
        }
    }
}

/// Draws `ceil(fraction·|K|)` distinct clients uniformly without replacement; the result
/// is sorted ascending.
pub fn sample_clients<R: Rng + ?Sized>(registry: &[usize], fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if registry.is_empty() {
        return Err(Error::invalid("client registry is empty"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("sampling fraction {fraction} outside (0, 1]")));
    }
    let n = registry.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut picked: Vec<usize> = if k == n {
        registry.to_vec()
    } else {
        rand::seq::index::sample(rng, n, k).into_iter().map(|i| registry[i]).collect()
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Bytes not transmitted thanks to pruning: 4 per pruned weight, minus the channel
/// bitmap. Dense updates save nothing and send no bitmap.
pub fn comm_accounting(update: &ClientUpdate) -> i64 {
    if update.mask.is_dense() {
        return 0;
    }
    update.report.pruned_weights as i64 * BYTES_PER_WEIGHT - update.mask.bitmap_bytes() as i64
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: ModelParams,
    /// Rounds completed so far.
    pub round: usize,
    pub sampling_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    pub method: Method,
    pub eval_loss: f64,
    /// mAP@0.5 on a 0–100 scale.
    pub map50: f64,
    /// Pruned weight count per registered client; `None` if it did not contribute.
    pub pruned_counts: Vec<Option<usize>>,
    pub failed_clients: Vec<usize>,
    pub bytes_saved_round: i64,
    pub bytes_saved_cumulative: i64,
}

/// A round's report together with the updates that were aggregated.
pub struct RoundOutcome {
    pub report: RoundReport,
    pub updates: Vec<ClientUpdate>,
}

const SAMPLE_STREAM: u64 = 0x5341_4d50;
const CLIENT_STREAM: u64 = 0x434c_4e54;

/// Server, clients and data of one federated experiment.
pub struct Simulation<'a> {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub method: Method,
    pub training: LocalTraining,
    pub eval: EvalSettings,
    pub train_data: &'a Dataset,
    pub test_data: &'a Dataset,
    /// Run client updates on the rayon pool; results are identical either way.
    pub parallel: bool,
    pub cumulative_bytes: i64,
}

impl Simulation<'_> {
    /// Per-client seed for `round`, independent of scheduling.
    pub fn client_seed(&self, round: usize, client: usize) -> u64 {
        rng::derive_seed(self.server.seed, &[CLIENT_STREAM, round as u64, client as u64])
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let round = self.server.round + 1;
        let training = LocalTraining { sparse: self.method.is_sparse(), ..self.training };
        if !training.sparse && self.training.lambda != 0.0 {
            log::debug!("dense method ignores lambda = {}", self.training.lambda);
        }
        let registry: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        let mut sample_rng = rng::stream(self.server.seed, &[SAMPLE_STREAM, round as u64]);
        let sampled = sample_clients(&registry, self.server.sampling_fraction, &mut sample_rng)?;
        let chosen: Vec<(&ClientState, u64)> = sampled
            .iter()
            .map(|id| {
                let c = self.clients.iter().find(|c| c.id == *id).expect("sampled from registry");
                (c, self.client_seed(round, c.id))
            })
            .collect();
        let global = &self.server.global;
        let data = self.train_data;
        let run = |&(c, seed): &(&ClientState, u64)| edge_model_update(c, global, data, &training, seed);
        let results: Vec<Result<ClientUpdate>> =
            if self.parallel { chosen.par_iter().map(run).collect() } else { chosen.iter().map(run).collect() };

        let mut updates = Vec::with_capacity(results.len());
        let mut failed = Vec::new();
        for ((c, _), r) in chosen.iter().zip(results) {
            match r {
                Ok(u) => updates.push(u),
                Err(Error::Diverged { client, reason }) => {
                    log::warn!("round {round}: client {client} excluded: {reason}");
                    failed.push(c.id);
                }
                Err(e) => return Err(e),
            }
        }
        if updates.is_empty() {
            return Err(Error::AllClientsFailed(round));
        }
        updates.sort_by_key(|u| u.client_id);

        let new_global = match self.method {
            Method::FedAvg | Method::SFedAvg => {
                let sizes: Vec<usize> = updates.iter().map(|u| u.num_samples).collect();
                fedavg_aggregate(&updates, &sizes)?
            }
            Method::SFedWeg => {
                let rates: Vec<_> = updates
                    .iter()
                    .map(|u| self.clients.iter().find(|c| c.id == u.client_id).expect("known client").sparsity)
                    .collect();
                fedweg_aggregate(&updates, &rates)?
            }
        };

        let bytes_saved_round: i64 = updates.iter().map(comm_accounting).sum();
        self.cumulative_bytes += bytes_saved_round;
        let pruned_counts = self
            .clients
            .iter()
            .map(|c| updates.iter().find(|u| u.client_id == c.id).map(|u| u.report.pruned_weights))
            .collect();
        if training.sparse {
            for u in &updates {
                if let Some(c) = self.clients.iter_mut().find(|c| c.id == u.client_id) {
                    c.retained_mask = Some(u.mask.clone());
                }
            }
        }
        self.server.global = new_global;
        self.server.round = round;

        let eval = evaluate(&self.server.global, self.test_data, &training.loss, &self.eval)?;
        let report = RoundReport {
            round,
            method: self.method,
            eval_loss: eval.loss,
            map50: eval.metrics.map,
            pruned_counts,
            failed_clients: failed,
            bytes_saved_round,
            bytes_saved_cumulative: self.cumulative_bytes,
        };
        Ok(RoundOutcome { report, updates })
    }
}
