#![allow(dead_code)]

use std::path::Path;

use fedsparse::experiment::ExperimentConfig;
use fedsparse::federation::{ClientUpdate, Method};
use fedsparse::sparsifier::{prune_report, SparseMask};
use fedsparse::ModelParams;

pub mod fed;
pub mod grad;
pub mod oracles;

/// A configuration small enough to run a few rounds in seconds.
pub fn tiny_config(method: Method, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides([
        ("method", method.as_str()),
        ("image_size", "32"),
        ("channel_widths", "4,8,8"),
        ("grid_size", "4"),
        ("train_images", "60"),
        ("test_images", "20"),
        ("rounds", "2"),
        ("local_epochs", "1"),
        ("batch_size", "10"),
        ("gamma_bins", "5"),
    ])
    .unwrap();
    cfg.out = Some(out.to_path_buf());
    cfg
}

/// Bytes saved by one update, recomputed from its parameters: exact zeros in the
/// trainable tensors at 4 bytes each, minus one mask bit per prunable channel.
pub fn replay_bytes(update: &ClientUpdate) -> i64 {
    let p = &update.params;
    let zeros: usize = p
        .trainable_slots()
        .into_iter()
        .map(|s| p.get(s).data().iter().filter(|&&v| v == 0.0).count())
        .sum();
    if zeros == 0 {
        return 0;
    }
    let channels: usize = p.blocks.iter().map(|b| b.bn.channels()).sum();
    zeros as i64 * 4 - channels.div_ceil(8) as i64
}

/// Share of all parameters that lie in the expansion of at least one prunable channel.
pub fn prunable_fraction(model: &ModelParams) -> f64 {
    let none = SparseMask::from_channels(model.blocks.iter().map(|b| vec![false; b.bn.channels()]).collect());
    let r = prune_report(&none, model).unwrap();
    r.pruned_weights as f64 / r.total_weights as f64
}

/// Header and records of a CSV file as strings.
pub fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut out = vec![r.headers().unwrap().iter().map(String::from).collect()];
    out.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    out
}

/// [`rows`] with the `timestamp` column removed.
pub fn without_timestamp(path: &Path) -> Vec<Vec<String>> {
    let all = rows(path);
    let col = all[0].iter().position(|h| h == "timestamp").unwrap();
    all.into_iter()
        .map(|mut r| {
            r.remove(col);
            r
        })
        .collect()
}
