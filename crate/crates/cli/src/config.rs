//! Flat `key=value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, unknown keys are errors.
//! Every run echoes its effective configuration (defaults resolved, sorted
//! keys) to `config.echo`; the SHA-256 of that text identifies the run in
//! every CSV it writes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use bfe_core::data::{generate_synthetic, load_dataset, LabeledDataset, SyntheticSpec};
use bfe_core::losses::{MarginConfig, MarginKind};
use bfe_core::optim::LrSchedule;
use bfe_core::trainer::{TrainSettings, Warmup};

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse { line: usize, message: String },
    UnknownKey { line: usize, key: String },
    DuplicateKey { line: usize, key: String },
    Invalid { key: &'static str, message: String },
    Missing(&'static str),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse { line, message } => {
                write!(f, "config line {line}: {message}")
            }
            ConfigError::UnknownKey { line, key } => {
                write!(f, "config line {line}: unknown key '{key}'")
            }
            ConfigError::DuplicateKey { line, key } => {
                write!(f, "config line {line}: duplicate key '{key}'")
            }
            ConfigError::Invalid { key, message } => write!(f, "config key '{key}': {message}"),
            ConfigError::Missing(key) => write!(f, "config key '{key}' is required"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "data_path",
    "data_classes",
    "data_per_class",
    "data_dim",
    "data_noise",
    "data_separation",
    "data_seed",
    "encoder_layers",
    "margin_kind",
    "margin",
    "scale",
    "batch_size",
    "queue_capacity",
    "compensation",
    "warmup_iterations",
    "warmup_loss_threshold",
    "warmup_max_iterations",
    "epochs",
    "momentum",
    "weight_decay",
    "lr_schedule",
    "metrics_every",
    "test_per_class",
    "recall_ks",
    "diagnostics",
    "checkpoint",
    "eval_genuine_pairs",
    "eval_impostor_pairs",
    "eval_far_targets",
    "eval_rank1",
    "eval_recall",
    "sweep_capacities",
    "sweep_compensation",
    "gradcheck_trials",
    "gradcheck_tolerance",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepCompensation {
    On,
    Off,
    Both,
}

impl fmt::Display for SweepCompensation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepCompensation::On => write!(f, "on"),
            SweepCompensation::Off => write!(f, "off"),
            SweepCompensation::Both => write!(f, "both"),
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,

    pub data_path: Option<PathBuf>,
    pub data_classes: usize,
    pub data_per_class: usize,
    pub data_dim: usize,
    pub data_noise: f64,
    pub data_separation: f64,
    pub data_seed: Option<u64>,

    pub encoder_layers: Vec<usize>,
    pub margin_kind: MarginKind,
    pub margin: f64,
    pub scale: f64,

    pub batch_size: usize,
    pub queue_capacity: usize,
    pub compensation: bool,
    pub warmup_iterations: Option<u64>,
    pub warmup_loss_threshold: Option<f64>,
    pub warmup_max_iterations: u64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: Option<Vec<(u64, f64)>>,
    pub metrics_every: u64,
    pub test_per_class: usize,
    pub recall_ks: Vec<usize>,
    pub diagnostics: bool,

    pub checkpoint: Option<PathBuf>,
    pub eval_genuine_pairs: usize,
    pub eval_impostor_pairs: usize,
    pub eval_far_targets: Vec<f64>,
    pub eval_rank1: bool,
    pub eval_recall: bool,

    pub sweep_capacities: Vec<usize>,
    pub sweep_compensation: SweepCompensation,

    pub gradcheck_trials: u64,
    pub gradcheck_tolerance: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data_path: None,
            data_classes: 512,
            data_per_class: 32,
            data_dim: 32,
            data_noise: 0.1,
            data_separation: 1.0,
            data_seed: None,
            encoder_layers: vec![32, 64, 16],
            margin_kind: MarginKind::ArcFace,
            margin: 0.5,
            scale: 64.0,
            batch_size: 64,
            queue_capacity: 1024,
            compensation: true,
            warmup_iterations: None,
            warmup_loss_threshold: None,
            warmup_max_iterations: 512,
            epochs: 10,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: None,
            metrics_every: 16,
            test_per_class: 4,
            recall_ks: vec![1, 2, 4, 8],
            diagnostics: false,
            checkpoint: None,
            eval_genuine_pairs: 512,
            eval_impostor_pairs: 512,
            eval_far_targets: vec![0.1, 0.01, 0.001],
            eval_rank1: true,
            eval_recall: true,
            sweep_capacities: vec![0, 256, 1024, 4096],
            sweep_compensation: SweepCompensation::Both,
            gradcheck_trials: 100,
            gradcheck_tolerance: 1e-5,
        }
    }
}

/// Default warm-up loss threshold: well below the untrained loss level of
/// the desk-scale task, reached after the first burst of progress.
pub const DEFAULT_WARMUP_LOSS_THRESHOLD: f64 = 12.0;

fn parse_as<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| ConfigError::Invalid {
        key,
        message: format!("cannot parse '{value}'"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse_as(key, p.trim())).collect()
}

fn parse_bool(key: &'static str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Invalid { key, message: format!("expected true/false, got '{value}'") }),
    }
}

fn parse_schedule(value: &str) -> Result<Vec<(u64, f64)>> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let (thr, rate) = part.split_once(':').ok_or(ConfigError::Invalid {
            key: "lr_schedule",
            message: format!("expected '<iteration>:<rate>', got '{part}'"),
        })?;
        out.push((
            parse_as::<u64>("lr_schedule", thr.trim())?,
            parse_as::<f64>("lr_schedule", rate.trim())?,
        ));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: line_no,
                message: format!("expected key=value, got '{line}'"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line: line_no, key });
            }
            if map.insert(key.clone(), (line_no, value)).is_some() {
                return Err(ConfigError::DuplicateKey { line: line_no, key });
            }
        }

        let mut cfg = ExperimentConfig::default();
        let mut margin_given = false;
        for (key, (_, value)) in &map {
            match key.as_str() {
                "seed" => cfg.seed = parse_as("seed", value)?,
                "out" => cfg.out = Some(PathBuf::from(value)),
                "data_path" => cfg.data_path = Some(PathBuf::from(value)),
                "data_classes" => cfg.data_classes = parse_as("data_classes", value)?,
                "data_per_class" => cfg.data_per_class = parse_as("data_per_class", value)?,
                "data_dim" => cfg.data_dim = parse_as("data_dim", value)?,
                "data_noise" => cfg.data_noise = parse_as("data_noise", value)?,
                "data_separation" => cfg.data_separation = parse_as("data_separation", value)?,
                "data_seed" => cfg.data_seed = Some(parse_as("data_seed", value)?),
                "encoder_layers" => cfg.encoder_layers = parse_list("encoder_layers", value)?,
                "margin_kind" => {
                    cfg.margin_kind = match value.as_str() {
                        "plain" => MarginKind::Plain,
                        "arcface" => MarginKind::ArcFace,
                        "cosface" => MarginKind::CosFace,
                        other => {
                            return Err(ConfigError::Invalid {
                                key: "margin_kind",
                                message: format!("expected plain|arcface|cosface, got '{other}'"),
                            })
                        }
                    }
                }
                "margin" => {
                    cfg.margin = parse_as("margin", value)?;
                    margin_given = true;
                }
                "scale" => cfg.scale = parse_as("scale", value)?,
                "batch_size" => cfg.batch_size = parse_as("batch_size", value)?,
                "queue_capacity" => cfg.queue_capacity = parse_as("queue_capacity", value)?,
                "compensation" => cfg.compensation = parse_bool("compensation", value)?,
                "warmup_iterations" => {
                    cfg.warmup_iterations = Some(parse_as("warmup_iterations", value)?)
                }
                "warmup_loss_threshold" => {
                    cfg.warmup_loss_threshold = Some(parse_as("warmup_loss_threshold", value)?)
                }
                "warmup_max_iterations" => {
                    cfg.warmup_max_iterations = parse_as("warmup_max_iterations", value)?
                }
                "epochs" => cfg.epochs = parse_as("epochs", value)?,
                "momentum" => cfg.momentum = parse_as("momentum", value)?,
                "weight_decay" => cfg.weight_decay = parse_as("weight_decay", value)?,
                "lr_schedule" => {
                    cfg.lr_schedule = if value == "auto" {
                        None
                    } else {
                        Some(parse_schedule(value)?)
                    }
                }
                "metrics_every" => cfg.metrics_every = parse_as("metrics_every", value)?,
                "test_per_class" => cfg.test_per_class = parse_as("test_per_class", value)?,
                "recall_ks" => cfg.recall_ks = parse_list("recall_ks", value)?,
                "diagnostics" => cfg.diagnostics = parse_bool("diagnostics", value)?,
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(value)),
                "eval_genuine_pairs" => {
                    cfg.eval_genuine_pairs = parse_as("eval_genuine_pairs", value)?
                }
                "eval_impostor_pairs" => {
                    cfg.eval_impostor_pairs = parse_as("eval_impostor_pairs", value)?
                }
                "eval_far_targets" => {
                    cfg.eval_far_targets = parse_list("eval_far_targets", value)?
                }
                "eval_rank1" => cfg.eval_rank1 = parse_bool("eval_rank1", value)?,
                "eval_recall" => cfg.eval_recall = parse_bool("eval_recall", value)?,
                "sweep_capacities" => {
                    cfg.sweep_capacities = parse_list("sweep_capacities", value)?
                }
                "sweep_compensation" => {
                    cfg.sweep_compensation = match value.as_str() {
                        "on" => SweepCompensation::On,
                        "off" => SweepCompensation::Off,
                        "both" => SweepCompensation::Both,
                        other => {
                            return Err(ConfigError::Invalid {
                                key: "sweep_compensation",
                                message: format!("expected on|off|both, got '{other}'"),
                            })
                        }
                    }
                }
                "gradcheck_trials" => cfg.gradcheck_trials = parse_as("gradcheck_trials", value)?,
                "gradcheck_tolerance" => {
                    cfg.gradcheck_tolerance = parse_as("gradcheck_tolerance", value)?
                }
                _ => unreachable!("key validated against KNOWN_KEYS"),
            }
        }
        if !margin_given {
            cfg.margin = match cfg.margin_kind {
                MarginKind::Plain => 0.0,
                MarginKind::ArcFace => 0.5,
                MarginKind::CosFace => 0.35,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        MarginConfig::new(self.margin_kind, self.margin, self.scale).map_err(|e| {
            ConfigError::Invalid { key: "margin", message: e.to_string() }
        })?;
        if self.encoder_layers.len() < 2 || self.encoder_layers.iter().any(|&s| s == 0) {
            return Err(ConfigError::Invalid {
                key: "encoder_layers",
                message: "need at least two positive sizes".into(),
            });
        }
        if let Some(schedule) = &self.lr_schedule {
            LrSchedule::new(schedule.clone()).map_err(|e| ConfigError::Invalid {
                key: "lr_schedule",
                message: e.to_string(),
            })?;
        }
        if self.warmup_iterations.is_some() && self.warmup_loss_threshold.is_some() {
            return Err(ConfigError::Invalid {
                key: "warmup_iterations",
                message: "give either warmup_iterations or warmup_loss_threshold, not both".into(),
            });
        }
        Ok(())
    }

    pub fn margin_config(&self) -> MarginConfig {
        MarginConfig::new(self.margin_kind, self.margin, self.scale).expect("validated")
    }

    /// Loads `data_path` or generates the synthetic dataset.
    pub fn load_or_generate_dataset(&self) -> std::result::Result<LabeledDataset, bfe_core::data::DataError> {
        match &self.data_path {
            Some(path) => load_dataset(path),
            None => generate_synthetic(&SyntheticSpec {
                num_classes: self.data_classes,
                samples_per_class: self.data_per_class,
                feature_dim: self.data_dim,
                intra_class_noise: self.data_noise,
                inter_class_separation: self.data_separation,
                seed: self.data_seed.unwrap_or(self.seed),
            }),
        }
    }

    /// Effective schedule: explicit segments, or the scaled-down step
    /// pattern (5e-3 / 5e-4 / 5e-5 at 5/8, 7/8 and the end of the run).
    pub fn resolve_schedule(&self, train_len: usize) -> LrSchedule {
        if let Some(segments) = &self.lr_schedule {
            return LrSchedule::new(segments.clone()).expect("validated");
        }
        let ipe = (train_len / self.batch_size).max(1) as u64;
        let total = ipe * self.epochs as u64;
        let t1 = (total * 5 / 8).max(1);
        let t2 = (total * 7 / 8).max(t1 + 1);
        let t3 = total.max(t2 + 1);
        LrSchedule::new(vec![(t1, 5e-3), (t2, 5e-4), (t3, 5e-5)]).expect("increasing by construction")
    }

    pub fn warmup(&self) -> Warmup {
        match (self.warmup_iterations, self.warmup_loss_threshold) {
            (Some(n), _) => Warmup::Iterations(n),
            (None, Some(threshold)) => {
                Warmup::LossThreshold { threshold, max_iterations: self.warmup_max_iterations }
            }
            (None, None) => Warmup::LossThreshold {
                threshold: DEFAULT_WARMUP_LOSS_THRESHOLD,
                max_iterations: self.warmup_max_iterations,
            },
        }
    }

    pub fn to_train_settings(&self, ds: &LabeledDataset) -> TrainSettings {
        let train_len = ds.len() - ds.num_classes() * self.test_per_class.min(ds.len());
        TrainSettings {
            encoder_layers: self.encoder_layers.clone(),
            margin: self.margin_config(),
            batch_size: self.batch_size,
            queue_capacity: self.queue_capacity,
            compensation: self.compensation,
            warmup: self.warmup(),
            epochs: self.epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule: self.resolve_schedule(train_len),
            seed: self.seed,
            test_per_class: self.test_per_class,
            recall_ks: self.recall_ks.clone(),
            metrics_every: self.metrics_every,
            diagnostics: self.diagnostics,
        }
    }

    /// Canonical text of the effective configuration: sorted `key=value`
    /// lines with every default resolved. The output directory is excluded
    /// so relocating a run does not change its identity.
    pub fn canonical_echo(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        lines.push(format!("batch_size={}", self.batch_size));
        if let Some(p) = &self.checkpoint {
            lines.push(format!("checkpoint={}", p.display()));
        }
        lines.push(format!("compensation={}", self.compensation));
        lines.push(format!("data_classes={}", self.data_classes));
        lines.push(format!("data_dim={}", self.data_dim));
        lines.push(format!("data_noise={}", self.data_noise));
        if let Some(p) = &self.data_path {
            lines.push(format!("data_path={}", p.display()));
        }
        lines.push(format!("data_per_class={}", self.data_per_class));
        lines.push(format!("data_seed={}", self.data_seed.unwrap_or(self.seed)));
        lines.push(format!("data_separation={}", self.data_separation));
        lines.push(format!("diagnostics={}", self.diagnostics));
        lines.push(format!(
            "encoder_layers={}",
            self.encoder_layers.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ));
        lines.push(format!(
            "eval_far_targets={}",
            self.eval_far_targets.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ));
        lines.push(format!("eval_genuine_pairs={}", self.eval_genuine_pairs));
        lines.push(format!("eval_impostor_pairs={}", self.eval_impostor_pairs));
        lines.push(format!("eval_rank1={}", self.eval_rank1));
        lines.push(format!("eval_recall={}", self.eval_recall));
        lines.push(format!("epochs={}", self.epochs));
        lines.push(format!("gradcheck_tolerance={}", self.gradcheck_tolerance));
        lines.push(format!("gradcheck_trials={}", self.gradcheck_trials));
        match &self.lr_schedule {
            Some(segments) => lines.push(format!(
                "lr_schedule={}",
                segments
                    .iter()
                    .map(|(t, r)| format!("{t}:{r}"))
                    .collect::<Vec<_>>()
                    .join(",")
            )),
            None => lines.push("lr_schedule=auto".into()),
        }
        lines.push(format!("margin={}", self.margin));
        lines.push(format!("margin_kind={}", self.margin_kind));
        lines.push(format!("metrics_every={}", self.metrics_every));
        lines.push(format!("momentum={}", self.momentum));
        lines.push(format!("queue_capacity={}", self.queue_capacity));
        lines.push(format!(
            "recall_ks={}",
            self.recall_ks.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ));
        lines.push(format!("scale={}", self.scale));
        lines.push(format!("seed={}", self.seed));
        lines.push(format!(
            "sweep_capacities={}",
            self.sweep_capacities.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ));
        lines.push(format!("sweep_compensation={}", self.sweep_compensation));
        lines.push(format!("test_per_class={}", self.test_per_class));
        match self.warmup_iterations {
            Some(n) => lines.push(format!("warmup_iterations={n}")),
            None => {
                lines.push(format!(
                    "warmup_loss_threshold={}",
                    self.warmup_loss_threshold.unwrap_or(DEFAULT_WARMUP_LOSS_THRESHOLD)
                ));
                lines.push(format!("warmup_max_iterations={}", self.warmup_max_iterations));
            }
        }
        lines.push(format!("weight_decay={}", self.weight_decay));
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    /// First 16 hex digits of the SHA-256 of the canonical echo.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_echo().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
