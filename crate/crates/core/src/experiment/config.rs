use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::dataset::{SceneSpec, ShapeClass};
use crate::detector::{ConfidenceTarget, DetectorConfig, LossConfig};
use crate::error::{Error, Result};
use crate::federation::Method;
use crate::sparsifier::SparsityRate;
use crate::training::EvalSettings;

/// Everything needed to reproduce one federated run.
///
/// The text form is one `key = value` per line; `#` starts a comment. Lists are
/// comma-separated. See [`ExperimentConfig::KEYS`] for the accepted keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    /// One rate per client; its length is the client count.
    pub sparsity_rates: Vec<SparsityRate>,
    pub sampling_fraction: f64,
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    /// Load `train.*`/`test.*` from here instead of generating.
    pub data_dir: Option<PathBuf>,
    pub detector: DetectorConfig,
    pub scene: SceneSpec,
    pub loss: LossConfig,
    pub eval: EvalSettings,
    pub gamma_bins: usize,
    /// Train clients concurrently. Does not change results.
    pub parallel: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::SFedWeg,
            rounds: 15,
            local_epochs: 5,
            batch_size: 16,
            learning_rate: 0.01,
            lambda: 1e-4,
            sparsity_rates: [0.2, 0.3, 0.4].iter().map(|&s| SparsityRate::new(s).expect("in range")).collect(),
            sampling_fraction: 1.0,
            seed: 0,
            train_images: 600,
            test_images: 150,
            data_dir: None,
            detector: DetectorConfig::default(),
            scene: SceneSpec::default(),
            loss: LossConfig::default(),
            eval: EvalSettings::default(),
            gamma_bins: 20,
            parallel: true,
            out: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("cannot parse `{value}`"))
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value.split(',').map(|v| parse_num(v.trim())).collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

fn parse_size(value: &str) -> std::result::Result<(usize, usize), String> {
    match value.split_once('x') {
        Some((h, w)) => Ok((parse_num(h.trim())?, parse_num(w.trim())?)),
        None => {
            let s = parse_num(value)?;
            Ok((s, s))
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Accepted keys, in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "method",
        "rounds",
        "local_epochs",
        "batch_size",
        "learning_rate",
        "lambda",
        "sparsity_rates",
        "sampling_fraction",
        "seed",
        "train_images",
        "test_images",
        "data_dir",
        "image_size",
        "channel_widths",
        "grid_size",
        "boxes_per_cell",
        "classes",
        "min_objects",
        "max_objects",
        "object_size",
        "noise",
        "lambda_coord",
        "lambda_class",
        "lambda_conf",
        "lambda_noobj",
        "confidence_target",
        "conf_threshold",
        "nms_iou",
        "match_iou",
        "eval_batch_size",
        "gamma_bins",
        "parallel",
        "out",
    ];

    /// Keys that never change results and are left out of the config hash.
    const NON_SEMANTIC: &'static [&'static str] = &["parallel", "out", "eval_batch_size"];

    pub fn num_clients(&self) -> usize {
        self.sparsity_rates.len()
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        match key {
            "method" => self.method = value.parse().map_err(|e: Error| e.to_string())?,
            "rounds" => self.rounds = parse_num(value)?,
            "local_epochs" => self.local_epochs = parse_num(value)?,
            "batch_size" => self.batch_size = parse_num(value)?,
            "learning_rate" => self.learning_rate = parse_num(value)?,
            "lambda" => self.lambda = parse_num(value)?,
            "sparsity_rates" => {
                self.sparsity_rates = parse_list::<f64>(value)?
                    .into_iter()
                    .map(|s| SparsityRate::new(s).map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "sampling_fraction" => self.sampling_fraction = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "train_images" => self.train_images = parse_num(value)?,
            "test_images" => self.test_images = parse_num(value)?,
            "data_dir" => self.data_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            "image_size" => {
                let size = parse_size(value)?;
                self.detector.input_size = size;
                self.scene.image_size = size;
            }
            "channel_widths" => self.detector.channel_widths = parse_list(value)?,
            "grid_size" => {
                self.detector.grid_size = parse_num(value)?;
                self.scene.grid_size = self.detector.grid_size;
            }
            "boxes_per_cell" => self.detector.boxes_per_cell = parse_num(value)?,
            "classes" => {
                let classes = value
                    .split(',')
                    .map(|c| ShapeClass::parse(c.trim()).ok_or_else(|| format!("unknown shape `{}`", c.trim())))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                self.detector.num_classes = classes.iter().map(|c| c.id() + 1).max().unwrap_or(0);
                self.scene.classes = classes;
            }
            "min_objects" => self.scene.min_objects = parse_num(value)?,
            "max_objects" => self.scene.max_objects = parse_num(value)?,
            "object_size" => match parse_list::<f64>(value)?.as_slice() {
                &[lo, hi] => self.scene.size_range = (lo, hi),
                _ => return Err("expected two comma-separated fractions".into()),
            },
            "noise" => self.scene.noise = parse_num(value)?,
            "lambda_coord" => self.loss.lambda_coord = parse_num(value)?,
            "lambda_class" => self.loss.lambda_class = parse_num(value)?,
            "lambda_conf" => self.loss.lambda_conf = parse_num(value)?,
            "lambda_noobj" => self.loss.lambda_noobj = parse_num(value)?,
            "confidence_target" => {
                self.loss.confidence_target = match value {
                    "one" => ConfidenceTarget::One,
                    "iou" => ConfidenceTarget::Iou,
                    _ => return Err(format!("expected `one` or `iou`, got `{value}`")),
                }
            }
            "conf_threshold" => self.eval.conf_threshold = parse_num(value)?,
            "nms_iou" => self.eval.nms_iou = parse_num(value)?,
            "match_iou" => self.eval.match_iou = parse_num(value)?,
            "eval_batch_size" => self.eval.batch_size = parse_num(value)?,
            "gamma_bins" => self.gamma_bins = parse_num(value)?,
            "parallel" => self.parallel = parse_bool(value)?,
            "out" => self.out = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Text value of `key` as [`ExperimentConfig::set`] would accept it.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "method" => self.method.to_string(),
            "rounds" => self.rounds.to_string(),
            "local_epochs" => self.local_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lambda" => self.lambda.to_string(),
            "sparsity_rates" => join(&self.sparsity_rates.iter().map(|s| s.get()).collect::<Vec<_>>()),
            "sampling_fraction" => self.sampling_fraction.to_string(),
            "seed" => self.seed.to_string(),
            "train_images" => self.train_images.to_string(),
            "test_images" => self.test_images.to_string(),
            "data_dir" => path(&self.data_dir),
            "image_size" => format!("{}x{}", self.detector.input_size.0, self.detector.input_size.1),
            "channel_widths" => join(&self.detector.channel_widths),
            "grid_size" => self.detector.grid_size.to_string(),
            "boxes_per_cell" => self.detector.boxes_per_cell.to_string(),
            "classes" => join(&self.scene.classes.iter().map(|c| c.name()).collect::<Vec<_>>()),
            "min_objects" => self.scene.min_objects.to_string(),
            "max_objects" => self.scene.max_objects.to_string(),
            "object_size" => format!("{},{}", self.scene.size_range.0, self.scene.size_range.1),
            "noise" => self.scene.noise.to_string(),
            "lambda_coord" => self.loss.lambda_coord.to_string(),
            "lambda_class" => self.loss.lambda_class.to_string(),
            "lambda_conf" => self.loss.lambda_conf.to_string(),
            "lambda_noobj" => self.loss.lambda_noobj.to_string(),
            "confidence_target" => match self.loss.confidence_target {
                ConfidenceTarget::One => "one".into(),
                ConfidenceTarget::Iou => "iou".into(),
            },
            "conf_threshold" => self.eval.conf_threshold.to_string(),
            "nms_iou" => self.eval.nms_iou.to_string(),
            "match_iou" => self.eval.match_iou.to_string(),
            "eval_batch_size" => self.eval.batch_size.to_string(),
            "gamma_bins" => self.gamma_bins.to_string(),
            "parallel" => self.parallel.to_string(),
            "out" => path(&self.out),
            _ => return None,
        })
    }

    /// Parses the `key = value` format on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut lines = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config { line, message: format!("expected `key = value`, got `{content}`") });
            };
            let key = key.trim();
            if let Some(first) = lines.insert(key.to_string(), line) {
                return Err(Error::Config { line, message: format!("`{key}` already set on line {first}") });
            }
            cfg.set(key, value).map_err(|message| Error::Config { line, message: format!("{key}: {message}") })?;
        }
        cfg.check().map_err(|(key, message)| Error::Config {
            line: lines.get(key).copied().unwrap_or(0),
            message: format!("{key}: {message}"),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { line: 0, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&text)
    }

    /// Applies `--key value` style overrides and revalidates.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (key, value) in overrides {
            self.set(key, value).map_err(|m| Error::invalid(format!("--{key}: {m}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(key, message)| Error::invalid(format!("{key}: {message}")))
    }

    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = [
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("train_images", self.train_images),
            ("test_images", self.test_images),
            ("eval_batch_size", self.eval.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err((key, "must be at least 1".into()));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(("learning_rate", "must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(("lambda", "must be nonnegative".into()));
        }
        if self.sparsity_rates.is_empty() {
            return Err(("sparsity_rates", "need at least one client".into()));
        }
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction <= 1.0) {
            return Err(("sampling_fraction", "must lie in (0, 1]".into()));
        }
        if self.train_images < self.num_clients() && self.data_dir.is_none() {
            return Err(("train_images", format!("fewer images than the {} clients", self.num_clients())));
        }
        if self.gamma_bins < 2 {
            return Err(("gamma_bins", "must be at least 2".into()));
        }
        for (key, v) in [
            ("conf_threshold", self.eval.conf_threshold),
            ("nms_iou", self.eval.nms_iou),
            ("match_iou", self.eval.match_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err((key, "must lie in [0, 1]".into()));
            }
        }
        if let Err(e) = self.detector.validate() {
            let key = if matches!(e, Error::Build { .. }) { "channel_widths" } else { "grid_size" };
            return Err((key, e.to_string()));
        }
        self.loss.validate().map_err(|e| ("lambda_coord", e.to_string()))?;
        self.scene.validate().map_err(|e| ("max_objects", e.to_string()))?;
        if self.scene.grid_size != self.detector.grid_size || self.scene.image_size != self.detector.input_size {
            return Err(("image_size", "scene and detector disagree".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(render())` reproduces the config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Hex prefix of a SHA-256 over every key that can change results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for key in Self::KEYS.iter().filter(|k| !Self::NON_SEMANTIC.contains(k)) {
            h.update(key.as_bytes());
            h.update(b"=");
            h.update(self.get(key).unwrap_or_default().as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
