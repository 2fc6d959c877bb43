use super::ClientUpdate;
use crate::detector::ModelParams;
use crate::error::{Error, Result};
use crate::sparsifier::SparsityRate;

/// `Σ weight_k · model_k` over every tensor (running statistics included), accumulated
/// in the given order.
pub fn weighted_sum(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let Some((&first, rest)) = models.split_first() else {
        return Err(Error::invalid("nothing to aggregate"));
    };
    if models.len() != weights.len() {
        return Err(Error::invalid(format!("{} models but {} weights", models.len(), weights.len())));
    }
    for m in rest {
        first.check_same_architecture(m)?;
    }
    let mut out = first.clone();
    out.zero_grad();
    for slot in first.slots() {
        let dst = out.get_mut(slot).data_mut();
        dst.iter_mut().zip(first.get(slot).data()).for_each(|(d, &v)| *d = weights[0] * v);
        for (m, &w) in rest.iter().zip(&weights[1..]) {
            dst.iter_mut().zip(m.get(slot).data()).for_each(|(d, &v)| *d += w * v);
        }
    }
    Ok(out)
}

/// Dataset-size weights `N_k / Σ N_j`.
pub fn fedavg_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || total == 0 {
        return Err(Error::invalid("FedAvg needs at least one client with data"));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Inverse-sparsity weights `(1/s_k) / Σ_j (1/s_j)`.
///
/// The inverses are first normalized by their maximum, so equal rates give exactly
/// `1/K` and a uniform rescaling of all inverses leaves the weights unchanged.
pub fn fedweg_weights(rates: &[SparsityRate]) -> Result<Vec<f64>> {
    if rates.is_empty() {
        return Err(Error::invalid("FedWeg needs at least one client"));
    }
    let inv: Vec<f64> = rates.iter().map(|s| 1.0 / s.get()).collect();
    let max = inv.iter().copied().fold(f64::MIN, f64::max);
    let rel: Vec<f64> = inv.iter().map(|v| v / max).collect();
    let total: f64 = rel.iter().sum();
    Ok(rel.iter().map(|r| r / total).collect())
}

fn sorted(updates: &[ClientUpdate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    order
}

/// Size-weighted average of client models, accumulated in ascending client id.
pub fn fedavg_aggregate(updates: &[ClientUpdate], sizes: &[usize]) -> Result<ModelParams> {
    if updates.len() != sizes.len() {
        return Err(Error::invalid("one dataset size per update required"));
    }
    let order = sorted(updates);
    let w = fedavg_weights(&order.iter().map(|&i| sizes[i]).collect::<Vec<_>>())?;
    weighted_sum(&order.iter().map(|&i| &updates[i].params).collect::<Vec<_>>(), &w)
}

/// Inverse-sparsity weighted sum of masked client models, one scalar weight per client,
/// accumulated in ascending client id.
pub fn fedweg_aggregate(updates: &[ClientUpdate], rates: &[SparsityRate]) -> Result<ModelParams> {
    if updates.len() != rates.len() {
        return Err(Error::invalid("one sparsity rate per update required"));
    }
    let order = sorted(updates);
    let w = fedweg_weights(&order.iter().map(|&i| rates[i]).collect::<Vec<_>>())?;
    weighted_sum(&order.iter().map(|&i| &updates[i].params).collect::<Vec<_>>(), &w)
}

/// Plain mean `Σ (1/K) · model_k`.
pub fn mean(models: &[&ModelParams]) -> Result<ModelParams> {
    let k = models.len() as f64;
    weighted_sum(models, &vec![1.0 / k; models.len()])
}
