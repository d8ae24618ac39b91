//! Epoch-level training orchestration: batch sampling, warm-up handling,
//! per-epoch retrieval evaluation and metrics collection.
//!
//! Wall-clock timings are collected separately from the metrics rows so
//! that identical config and seed reproduce the metrics byte-for-byte.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::broadface::{baseline_iteration, train_iteration, BroadFaceError, BroadQueue};
use crate::data::{DataError, LabeledDataset};
use crate::encoder::{EncoderError, MlpEncoder};
use crate::eval::{recall_at_k, EvalError};
use crate::linalg::{Matrix, Vector};
use crate::losses::MarginConfig;
use crate::optim::{LrSchedule, OptimError, Sgd};

#[derive(Debug)]
pub enum TrainerError {
    InvalidConfig(String),
    /// A loss or parameter became non-finite during training.
    NumericFailure(String),
    Data(DataError),
    BroadFace(BroadFaceError),
    Eval(EvalError),
    Encoder(EncoderError),
    Optim(OptimError),
}

impl fmt::Display for TrainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainerError::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            TrainerError::NumericFailure(msg) => write!(f, "numeric failure: {msg}"),
            TrainerError::Data(e) => write!(f, "{e}"),
            TrainerError::BroadFace(e) => write!(f, "{e}"),
            TrainerError::Eval(e) => write!(f, "{e}"),
            TrainerError::Encoder(e) => write!(f, "{e}"),
            TrainerError::Optim(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainerError {}

impl From<DataError> for TrainerError {
    fn from(e: DataError) -> Self {
        TrainerError::Data(e)
    }
}

impl From<BroadFaceError> for TrainerError {
    fn from(e: BroadFaceError) -> Self {
        TrainerError::BroadFace(e)
    }
}

impl From<EvalError> for TrainerError {
    fn from(e: EvalError) -> Self {
        TrainerError::Eval(e)
    }
}

impl From<EncoderError> for TrainerError {
    fn from(e: EncoderError) -> Self {
        TrainerError::Encoder(e)
    }
}

impl From<OptimError> for TrainerError {
    fn from(e: OptimError) -> Self {
        TrainerError::Optim(e)
    }
}

pub type Result<T> = std::result::Result<T, TrainerError>;

/// Warm-up policy: the queue stays disabled until the condition is met.
#[derive(Debug, Clone, PartialEq)]
pub enum Warmup {
    /// Fixed number of queue-free iterations.
    Iterations(u64),
    /// Queue-free until the encoder loss falls to `threshold`, capped.
    LossThreshold { threshold: f64, max_iterations: u64 },
}

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub encoder_layers: Vec<usize>,
    pub margin: MarginConfig,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub compensation: bool,
    pub warmup: Warmup,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Held-out samples per class used for retrieval evaluation.
    pub test_per_class: usize,
    pub recall_ks: Vec<usize>,
    /// Cadence (in iterations) of loss metric rows.
    pub metrics_every: u64,
    /// Retain raw inputs in the queue for compensation diagnostics.
    pub diagnostics: bool,
}

impl TrainSettings {
    pub fn validate(&self, ds: &LabeledDataset) -> Result<()> {
        if self.encoder_layers.len() < 2 {
            return Err(TrainerError::InvalidConfig(
                "encoder needs at least input and output sizes".into(),
            ));
        }
        if self.encoder_layers[0] != ds.feature_dim() {
            return Err(TrainerError::InvalidConfig(format!(
                "encoder input size {} does not match feature dim {}",
                self.encoder_layers[0],
                ds.feature_dim()
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainerError::InvalidConfig("epochs must be positive".into()));
        }
        if self.test_per_class < 2 {
            return Err(TrainerError::InvalidConfig(
                "test_per_class must be at least 2 for recall evaluation".into(),
            ));
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return Err(TrainerError::InvalidConfig("recall_ks must be positive".into()));
        }
        if self.metrics_every == 0 {
            return Err(TrainerError::InvalidConfig("metrics_every must be positive".into()));
        }
        let train_len = ds.len() - ds.num_classes() * self.test_per_class;
        if train_len < self.batch_size {
            return Err(TrainerError::InvalidConfig(format!(
                "training split of {train_len} samples cannot fill a batch of {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One deterministic instrumentation row, written to the metrics CSV as
/// `metric,step,value,extra`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub metric: String,
    pub step: u64,
    pub value: f64,
    pub extra: String,
}

impl MetricsRow {
    fn new(metric: &str, step: u64, value: f64) -> Self {
        Self { metric: metric.to_string(), step, value, extra: String::new() }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: MlpEncoder,
    pub classifier: Matrix,
    pub metrics: Vec<MetricsRow>,
    /// `(iteration, milliseconds)` wall-clock samples; not deterministic.
    pub timings_ms: Vec<(u64, f64)>,
    /// recall@first-configured-k of the test split after each epoch.
    pub epoch_recall1: Vec<f64>,
    /// Final recall per configured k.
    pub final_recall: Vec<(usize, f64)>,
    pub iterations_run: u64,
    pub warmup_iterations: u64,
}

/// Epoch-shuffling mini-batch sampler over the training split.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Next mini-batch of indices; reshuffles at epoch boundaries and drops
    /// the ragged tail.
    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let slice = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        slice
    }
}

/// Uniform classifier initialization in `[-1/sqrt(D), 1/sqrt(D)]`.
pub fn init_classifier(classes: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    Matrix::new(
        classes,
        dim,
        (0..classes * dim).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("finite init")
}

/// Embeds a labeled set with the current encoder.
pub fn embed_set(enc: &MlpEncoder, items: &[(Vector, usize)]) -> Result<Vec<(Vector, usize)>> {
    items
        .iter()
        .map(|(x, y)| Ok((enc.embed(x)?, *y)))
        .collect()
}

/// Recall@k of a labeled set under the current encoder.
pub fn evaluate_recall(
    enc: &MlpEncoder,
    items: &[(Vector, usize)],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let embedded = embed_set(enc, items)?;
    let recalls = recall_at_k(&embedded, ks)?;
    Ok(ks.iter().copied().zip(recalls).collect())
}

enum Mode {
    BroadFace,
    Baseline,
}

/// Trains with the split objectives and the embedding queue. The first
/// iterations run queue-free according to the warm-up policy.
pub fn run_training(ds: &LabeledDataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    run(ds, settings, Mode::BroadFace)
}

/// Plain mini-batch training (single loss for both parameter groups); the
/// reference the zero-capacity queue must reproduce bit-exactly.
pub fn run_baseline_training(ds: &LabeledDataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    run(ds, settings, Mode::Baseline)
}

fn run(ds: &LabeledDataset, settings: &TrainSettings, mode: Mode) -> Result<TrainOutcome> {
    settings.validate(ds)?;
    let (train, test) = ds.split_per_class(settings.test_per_class)?;

    let mut encoder = MlpEncoder::init(&settings.encoder_layers, settings.seed)
        .map_err(TrainerError::Encoder)?;
    let embed_dim = encoder.embedding_dim();
    let mut classifier =
        init_classifier(ds.num_classes(), embed_dim, settings.seed.wrapping_add(1));
    let mut sampler =
        BatchSampler::new(train.len(), settings.batch_size, settings.seed.wrapping_add(2));

    let mut enc_opt =
        Sgd::new(settings.momentum, settings.weight_decay, settings.schedule.clone())?;
    let mut cls_opt =
        Sgd::new(settings.momentum, settings.weight_decay, settings.schedule.clone())?;

    let mut queue = BroadQueue::new(settings.queue_capacity, settings.compensation);
    if settings.diagnostics {
        queue = queue.with_retained_inputs();
    }
    // stand-in queue for the warm-up phase
    let mut warmup_queue = BroadQueue::new(0, settings.compensation);

    let iters_per_epoch = (train.len() / settings.batch_size) as u64;
    let total_iterations = iters_per_epoch * settings.epochs as u64;

    let mut metrics = Vec::new();
    let mut timings_ms = Vec::new();
    let mut epoch_recall1 = Vec::new();
    let mut final_recall = Vec::new();
    let mut warmup_done_at: Option<u64> = None;

    for iteration in 0..total_iterations {
        let batch: Vec<(Vector, usize)> = sampler
            .next_batch()
            .iter()
            .map(|&i| train.samples()[i].clone())
            .collect();

        let in_warmup = match (&mode, &settings.warmup) {
            (Mode::Baseline, _) => true,
            (Mode::BroadFace, Warmup::Iterations(n)) => {
                warmup_done_at.is_none() && iteration < *n
            }
            (Mode::BroadFace, Warmup::LossThreshold { max_iterations, .. }) => {
                warmup_done_at.is_none() && iteration < *max_iterations
            }
        };

        let started = Instant::now();
        let m = match mode {
            Mode::Baseline => baseline_iteration(
                &mut encoder,
                &mut classifier,
                &batch,
                &mut enc_opt,
                &mut cls_opt,
                &settings.margin,
                iteration,
            )?,
            Mode::BroadFace => {
                let q = if in_warmup { &mut warmup_queue } else { &mut queue };
                train_iteration(
                    &mut encoder,
                    &mut classifier,
                    q,
                    &batch,
                    &mut enc_opt,
                    &mut cls_opt,
                    &settings.margin,
                    iteration,
                )?
            }
        };
        timings_ms.push((iteration, started.elapsed().as_secs_f64() * 1e3));

        if !m.encoder_loss.is_finite() || !m.classifier_loss.is_finite() {
            return Err(TrainerError::NumericFailure(format!(
                "non-finite loss at iteration {iteration}: encoder {}, classifier {}",
                m.encoder_loss, m.classifier_loss
            )));
        }

        if matches!(mode, Mode::BroadFace) && in_warmup && warmup_done_at.is_none() {
            let finished = match &settings.warmup {
                Warmup::Iterations(n) => iteration + 1 >= *n,
                Warmup::LossThreshold { threshold, max_iterations } => {
                    m.encoder_loss <= *threshold || iteration + 1 >= *max_iterations
                }
            };
            if finished {
                warmup_done_at = Some(iteration + 1);
                metrics.push(MetricsRow::new("warmup_end", iteration + 1, (iteration + 1) as f64));
            }
        }

        let last = iteration + 1 == total_iterations;
        if iteration % settings.metrics_every == 0 || last {
            metrics.push(MetricsRow::new("encoder_loss", iteration, m.encoder_loss));
            metrics.push(MetricsRow::new("classifier_loss", iteration, m.classifier_loss));
            metrics.push(MetricsRow::new("queue_len", iteration, m.queue_len_after as f64));
            metrics.push(MetricsRow::new(
                "compensation_magnitude",
                iteration,
                m.mean_compensation_magnitude,
            ));
            metrics.push(MetricsRow::new("learning_rate", iteration, m.learning_rate));
            metrics.push(MetricsRow::new(
                "encoder_forwards",
                iteration,
                m.encoder_forward_count as f64,
            ));
        }

        if (iteration + 1) % iters_per_epoch == 0 {
            let epoch = (iteration + 1) / iters_per_epoch;
            let recalls = evaluate_recall(&encoder, test.samples(), &settings.recall_ks)?;
            for &(k, r) in &recalls {
                metrics.push(MetricsRow {
                    metric: "recall_at_k".into(),
                    step: iteration,
                    value: r,
                    extra: format!("k={k};epoch={epoch}"),
                });
            }
            epoch_recall1.push(recalls[0].1);
            if last {
                final_recall = recalls;
            }
        }
    }

    let warmup_iterations = match mode {
        Mode::Baseline => total_iterations,
        Mode::BroadFace => warmup_done_at.unwrap_or(total_iterations),
    };

    Ok(TrainOutcome {
        encoder,
        classifier,
        metrics,
        timings_ms,
        epoch_recall1,
        final_recall,
        iterations_run: total_iterations,
        warmup_iterations,
    })
}
