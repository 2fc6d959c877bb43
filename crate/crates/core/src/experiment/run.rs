use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::ExperimentConfig;
use crate::dataset::{generate, load_split, partition, Dataset, SceneSpec};
use crate::detector::{build_model, ModelParams};
use crate::error::{Error, Result};
use crate::federation::{ClientState, LocalTraining, RoundOutcome, RoundReport, ServerState, Simulation};
use crate::rng;

/// Overrides the root directory for run outputs.
pub const OUT_ROOT_ENV: &str = "FEDSPARSE_OUT_ROOT";

pub const METRICS_FILE: &str = "metrics.csv";
pub const GAMMA_FILE: &str = "gamma_hist.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.fwm";
pub const CONFIG_FILE: &str = "config.txt";

const DATA_STREAM: u64 = 0x4441_5441;
const PARTITION_STREAM: u64 = 0x5041_5254;
const MODEL_STREAM: u64 = 0x4d4f_444c;

/// Where a run writes: absolute `out` as given, relative `out` under the output root,
/// otherwise `<root>/<method>-<hash>`. The root is `$FEDSPARSE_OUT_ROOT`, or `runs`
/// when `out` is unset and the current directory when it is relative.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    match &cfg.out {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => root.map(|r| r.join(p)).unwrap_or_else(|| p.clone()),
        None => root.unwrap_or_else(|| PathBuf::from("runs")).join(format!("{}-{}", cfg.method, cfg.hash())),
    }
}

fn scene(cfg: &ExperimentConfig, split: u64) -> SceneSpec {
    SceneSpec { seed: rng::derive_seed(cfg.seed, &[DATA_STREAM, split]), ..cfg.scene.clone() }
}

/// Generates the train and test sets a run with `cfg` would use.
pub fn generate_splits(cfg: &ExperimentConfig) -> Result<(Vec<crate::dataset::Sample>, Vec<crate::dataset::Sample>)> {
    Ok((generate(&scene(cfg, 0), cfg.train_images)?, generate(&scene(cfg, 1), cfg.test_images)?))
}

/// Train and test datasets: loaded from `data_dir` if set, generated otherwise.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data_dir {
        Some(dir) => (load_split(dir, "train")?, load_split(dir, "test")?),
        None => generate_splits(cfg)?,
    };
    let d = &cfg.detector;
    let build = |samples| Dataset::new(samples, d.grid_size, d.num_classes);
    let (train, test) = (build(train)?, build(test)?);
    let want = [d.in_channels, d.input_size.0, d.input_size.1];
    for (name, data) in [("train", &train), ("test", &test)] {
        if data.image_shape() != want {
            return Err(Error::invalid(format!(
                "{name} images are {:?}, detector expects {want:?}",
                data.image_shape()
            )));
        }
    }
    Ok((train, test))
}

/// Counts of `|γ|` over `[0, max|γ|]` split into equal-width bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaHistogram {
    pub max: f64,
    pub counts: Vec<usize>,
}

impl GammaHistogram {
    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        let w = self.max / self.counts.len() as f64;
        (bin as f64 * w, (bin + 1) as f64 * w)
    }
}

pub fn gamma_histogram(params: &ModelParams, bins: usize) -> Result<GammaHistogram> {
    if bins < 2 {
        return Err(Error::invalid("a histogram needs at least 2 bins"));
    }
    let mags = params.gamma_magnitudes();
    let max = mags.iter().copied().fold(0.0, f64::max);
    let mut counts = vec![0; bins];
    for m in mags {
        let bin = if max > 0.0 { ((m / max * bins as f64) as usize).min(bins - 1) } else { 0 };
        counts[bin] += 1;
    }
    Ok(GammaHistogram { max, counts })
}

/// What a finished run leaves behind, also written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub method: crate::federation::Method,
    pub parameter_count: usize,
    pub final_map50: f64,
    pub bytes_saved_total: i64,
    pub rounds: Vec<RoundReport>,
    pub out_dir: PathBuf,
    pub finished_at: String,
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

struct Outputs {
    metrics: csv::Writer<File>,
    gamma: csv::Writer<File>,
    hash: String,
}

impl Outputs {
    fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.render())?;
        let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE)).map_err(csv_err)?;
        let mut header: Vec<String> = [
            "round",
            "method",
            "map50",
            "eval_loss",
            "bytes_saved_round",
            "bytes_saved_cumulative",
        ]
        .map(String::from)
        .to_vec();
        header.extend((0..cfg.num_clients()).map(|k| format!("pruned_count_{k}")));
        header.extend(["config_hash".into(), "timestamp".into()]);
        metrics.write_record(&header).map_err(csv_err)?;
        metrics.flush()?;
        let mut gamma = csv::Writer::from_path(dir.join(GAMMA_FILE)).map_err(csv_err)?;
        gamma.write_record(["round", "bin", "lower", "upper", "count"]).map_err(csv_err)?;
        Ok(Self { metrics, gamma, hash: cfg.hash() })
    }

    fn record(&mut self, r: &RoundReport, hist: &GammaHistogram) -> Result<()> {
        let mut row = vec![
            r.round.to_string(),
            r.method.to_string(),
            r.map50.to_string(),
            r.eval_loss.to_string(),
            r.bytes_saved_round.to_string(),
            r.bytes_saved_cumulative.to_string(),
        ];
        row.extend(r.pruned_counts.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
        row.extend([self.hash.clone(), timestamp()]);
        self.metrics.write_record(&row).map_err(csv_err)?;
        self.metrics.flush()?;
        for (bin, count) in hist.counts.iter().enumerate() {
            let (lo, hi) = hist.bin_edges(bin);
            self.gamma
                .write_record([r.round.to_string(), bin.to_string(), lo.to_string(), hi.to_string(), count.to_string()])
                .map_err(csv_err)?;
        }
        self.gamma.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Mismatch(format!("csv: {other:?}")),
    }
}

/// Runs every round of `cfg` and writes its artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_experiment_with(cfg, |_, _| {})
}

/// Like [`run_experiment`], calling `on_round` with each round's outcome and the new
/// global model.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mut on_round: impl FnMut(&RoundOutcome, &ModelParams),
) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let dir = output_dir(cfg);
    let mut outputs = Outputs::create(&dir, cfg)?;

    let parts = partition(train.len(), cfg.num_clients(), &mut rng::stream(cfg.seed, &[PARTITION_STREAM]))?;
    let clients = parts
        .into_iter()
        .zip(&cfg.sparsity_rates)
        .enumerate()
        .map(|(id, (partition, &sparsity))| ClientState {
            id,
            sparsity,
            partition,
            learning_rate: cfg.learning_rate,
            local_epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            retained_mask: None,
        })
        .collect();
    let global = build_model(&cfg.detector, rng::derive_seed(cfg.seed, &[MODEL_STREAM]))?;
    let parameter_count = global.parameter_count();
    let mut sim = Simulation {
        server: ServerState { global, round: 0, sampling_fraction: cfg.sampling_fraction, seed: cfg.seed },
        clients,
        method: cfg.method,
        training: LocalTraining { loss: cfg.loss, lambda: cfg.lambda, sparse: cfg.method.is_sparse() },
        eval: cfg.eval,
        train_data: &train,
        test_data: &test,
        parallel: cfg.parallel,
        cumulative_bytes: 0,
    };

    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let outcome = sim.run_round()?;
        let hist = gamma_histogram(&sim.server.global, cfg.gamma_bins)?;
        outputs.record(&outcome.report, &hist)?;
        log::info!(
            "{} round {}: mAP@0.5 {:.2}, loss {:.4}, saved {} B",
            cfg.method,
            outcome.report.round,
            outcome.report.map50,
            outcome.report.eval_loss,
            outcome.report.bytes_saved_round
        );
        on_round(&outcome, &sim.server.global);
        reports.push(outcome.report);
    }

    save_checkpoint(&dir.join(MODEL_FILE), &sim.server.global)?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        method: cfg.method,
        parameter_count,
        final_map50: reports.last().map(|r| r.map50).unwrap_or(0.0),
        bytes_saved_total: sim.cumulative_bytes,
        rounds: reports,
        out_dir: dir.clone(),
        finished_at: timestamp(),
    };
    serde_json::to_writer_pretty(File::create(dir.join(SUMMARY_FILE))?, &summary)?;
    Ok(summary)
}
