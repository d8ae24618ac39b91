//! FIFO queue of past embeddings, drift compensation, and the split
//! encoder/classifier objectives.
//!
//! The queue stores each embedding together with a snapshot of its
//! identity-representative row taken at enqueue time. When the classifier
//! later consumes a queued embedding, the row movement since that snapshot
//! is used to compensate the embedding's drift:
//!
//! `e* = e- + (|e-| / |W-_y|) * (W_y - W-_y)`
//!
//! Queued terms feed the classifier gradient only; no gradient from them
//! ever reaches the encoder.

use std::collections::VecDeque;
use std::fmt;

use rayon::prelude::*;

use crate::encoder::{EncoderError, EncoderGradients, ForwardTrace, MlpEncoder};
use crate::linalg::{Matrix, Vector, NORM_EPSILON};
use crate::losses::{accumulate_samples, ClassifierCache, LossError, MarginConfig, ACCUM_CHUNK};
use crate::optim::{OptimError, Sgd};

#[derive(Debug)]
pub enum BroadFaceError {
    /// A stored representative snapshot has a norm at or below the guard,
    /// so the compensation scale is undefined.
    NearZeroSnapshotNorm,
    InvalidLabel { y: usize, classes: usize },
    DimensionMismatch { expected: usize, got: usize },
    EmptyBatch,
    Loss(LossError),
    Encoder(EncoderError),
    Optim(OptimError),
}

impl fmt::Display for BroadFaceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BroadFaceError::NearZeroSnapshotNorm => {
                write!(f, "representative snapshot norm below {NORM_EPSILON:e}")
            }
            BroadFaceError::InvalidLabel { y, classes } => {
                write!(f, "label {y} out of range for {classes} classifier rows")
            }
            BroadFaceError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            BroadFaceError::EmptyBatch => write!(f, "empty mini-batch"),
            BroadFaceError::Loss(e) => write!(f, "loss error: {e}"),
            BroadFaceError::Encoder(e) => write!(f, "encoder error: {e}"),
            BroadFaceError::Optim(e) => write!(f, "optimizer error: {e}"),
        }
    }
}

impl std::error::Error for BroadFaceError {}

impl From<LossError> for BroadFaceError {
    fn from(e: LossError) -> Self {
        BroadFaceError::Loss(e)
    }
}

impl From<EncoderError> for BroadFaceError {
    fn from(e: EncoderError) -> Self {
        BroadFaceError::Encoder(e)
    }
}

impl From<OptimError> for BroadFaceError {
    fn from(e: OptimError) -> Self {
        BroadFaceError::Optim(e)
    }
}

pub type Result<T> = std::result::Result<T, BroadFaceError>;

/// One queued sample: the past embedding, its label, the representative row
/// at enqueue time, and the enqueue iteration.
#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub embedding: Vector,
    pub label: usize,
    pub rep_snapshot: Vector,
    pub iteration: u64,
    /// Raw encoder input, retained only when diagnostics are enabled.
    pub raw_input: Option<Vector>,
}

/// A queued embedding after drift compensation.
#[derive(Debug, Clone)]
pub struct CompensatedEmbedding<'a> {
    pub e_star: Vector,
    pub source: &'a QueueEntry,
}

/// FIFO store of [`QueueEntry`] values with a total capacity.
#[derive(Debug, Clone)]
pub struct BroadQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
    compensation_enabled: bool,
    retain_inputs: bool,
}

impl BroadQueue {
    pub fn new(capacity: usize, compensation_enabled: bool) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 20)),
            compensation_enabled,
            retain_inputs: false,
        }
    }

    /// Makes enqueue keep the raw inputs so diagnostics can re-encode them.
    pub fn with_retained_inputs(mut self) -> Self {
        self.retain_inputs = true;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn compensation_enabled(&self) -> bool {
        self.compensation_enabled
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, idx: usize) -> Option<&QueueEntry> {
        self.entries.get(idx)
    }

    /// Appends one entry per sample, snapshotting the current rows, then
    /// silently evicts the oldest entries beyond capacity. Called after the
    /// optimizer step of an iteration, so the snapshots are post-update.
    pub fn enqueue_batch(
        &mut self,
        batch: &[(Vector, usize)],
        w: &Matrix,
        iteration: u64,
        raw_inputs: Option<&[Vector]>,
    ) -> Result<()> {
        for (i, (e, y)) in batch.iter().enumerate() {
            if *y >= w.rows() {
                return Err(BroadFaceError::InvalidLabel { y: *y, classes: w.rows() });
            }
            if self.capacity == 0 {
                continue;
            }
            let raw_input = if self.retain_inputs {
                raw_inputs.map(|xs| xs[i].clone())
            } else {
                None
            };
            self.entries.push_back(QueueEntry {
                embedding: e.clone(),
                label: *y,
                rep_snapshot: w.row_vector(*y),
                iteration,
                raw_input,
            });
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Compensates one entry against the current classifier, honoring the
    /// queue's compensation flag.
    pub fn compensate<'a>(
        &self,
        entry: &'a QueueEntry,
        w: &Matrix,
    ) -> Result<CompensatedEmbedding<'a>> {
        let e_star = if self.compensation_enabled {
            compensated_embedding(entry, w)?
        } else {
            entry.embedding.clone()
        };
        Ok(CompensatedEmbedding { e_star, source: entry })
    }
}

/// Applies the compensation formula unconditionally:
/// `e* = e- + (|e-| / |W-_y|) * (W_y - W-_y)`.
pub fn compensated_embedding(entry: &QueueEntry, w: &Matrix) -> Result<Vector> {
    if entry.label >= w.rows() {
        return Err(BroadFaceError::InvalidLabel { y: entry.label, classes: w.rows() });
    }
    let d = entry.embedding.dim();
    if entry.rep_snapshot.dim() != d || w.cols() != d {
        return Err(BroadFaceError::DimensionMismatch { expected: d, got: w.cols() });
    }
    let snapshot_norm = entry.rep_snapshot.l2_norm();
    if snapshot_norm <= NORM_EPSILON {
        return Err(BroadFaceError::NearZeroSnapshotNorm);
    }
    let lambda = entry.embedding.l2_norm() / snapshot_norm;
    let row = w.row(entry.label);
    let mut out = Vec::with_capacity(d);
    for ((e, w_now), w_then) in entry
        .embedding
        .as_slice()
        .iter()
        .zip(row)
        .zip(entry.rep_snapshot.as_slice())
    {
        out.push(e + lambda * (w_now - w_then));
    }
    Ok(Vector::raw(out))
}

/// Classifier objective over the batch and queue union: mean margin loss
/// over `|X| + |E|` terms with gradients for the classifier rows only.
#[derive(Debug, Clone)]
pub struct ClassifierLoss {
    pub loss: f64,
    /// `dL/dW` with the `1/|X u E|` factor applied.
    pub grad_classifier: Matrix,
    pub queue_terms: usize,
    /// Mean `|e* - e-|` over the queue terms (0 with an empty queue).
    pub mean_compensation_magnitude: f64,
}

/// Encoder objective over the batch only: mean margin loss with gradients
/// for the embeddings only.
#[derive(Debug, Clone)]
pub struct EncoderLoss {
    pub loss: f64,
    /// `dL/de_i` per sample with the `1/|X|` factor applied.
    pub grad_embeddings: Vec<Vector>,
}

/// Mean margin loss over batch and compensated queue entries. Compensated
/// embeddings enter as constants: the returned gradient covers `W` only.
pub fn classifier_loss(
    batch: &[(Vector, usize)],
    queue: &BroadQueue,
    w: &Matrix,
    cfg: &MarginConfig,
) -> Result<ClassifierLoss> {
    if batch.is_empty() {
        return Err(BroadFaceError::EmptyBatch);
    }
    let cache = ClassifierCache::new(w)?;

    let queue_refs: Vec<&QueueEntry> = queue.entries().collect();
    let compensated: Vec<(Vector, f64)> = queue_refs
        .par_chunks(ACCUM_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|entry| {
                    let comp = queue.compensate(entry, w)?;
                    let drift = comp.e_star.sub(&entry.embedding).map_err(|_| {
                        BroadFaceError::DimensionMismatch {
                            expected: entry.embedding.dim(),
                            got: comp.e_star.dim(),
                        }
                    })?;
                    Ok((comp.e_star, drift.l2_norm()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut refs: Vec<(&Vector, usize)> = Vec::with_capacity(batch.len() + compensated.len());
    for (e, y) in batch {
        refs.push((e, *y));
    }
    for ((e_star, _), entry) in compensated.iter().zip(&queue_refs) {
        refs.push((e_star, entry.label));
    }

    let acc = accumulate_samples(&cache, &refs, false, true, cfg)?;
    let total = refs.len() as f64;
    let inv = 1.0 / total;
    let mut grad_classifier = acc.grad_w.expect("requested grad_w");
    for x in grad_classifier.as_mut_slice() {
        *x *= inv;
    }
    let mean_compensation_magnitude = if compensated.is_empty() {
        0.0
    } else {
        compensated.iter().map(|(_, m)| m).sum::<f64>() / compensated.len() as f64
    };
    Ok(ClassifierLoss {
        loss: acc.loss_sum * inv,
        grad_classifier,
        queue_terms: compensated.len(),
        mean_compensation_magnitude,
    })
}

/// Mean margin loss over the batch with gradients for the embeddings; the
/// classifier is a constant in this pass.
pub fn encoder_loss(
    batch: &[(Vector, usize)],
    w: &Matrix,
    cfg: &MarginConfig,
) -> Result<EncoderLoss> {
    if batch.is_empty() {
        return Err(BroadFaceError::EmptyBatch);
    }
    let cache = ClassifierCache::new(w)?;
    let refs: Vec<(&Vector, usize)> = batch.iter().map(|(e, y)| (e, *y)).collect();
    let acc = accumulate_samples(&cache, &refs, true, false, cfg)?;
    let inv = 1.0 / batch.len() as f64;
    Ok(EncoderLoss {
        loss: acc.loss_sum * inv,
        grad_embeddings: acc.grad_embeddings.into_iter().map(|g| g.scaled(inv)).collect(),
    })
}

/// Per-iteration instrumentation emitted by the training steps.
#[derive(Debug, Clone)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub encoder_loss: f64,
    pub classifier_loss: f64,
    pub queue_terms: usize,
    pub queue_len_after: usize,
    pub mean_compensation_magnitude: f64,
    pub encoder_forward_count: usize,
    pub encoder_backward_count: usize,
    pub learning_rate: f64,
}

/// Forward pass over a mini-batch with traces, in deterministic order.
fn forward_batch(
    enc: &MlpEncoder,
    minibatch: &[(Vector, usize)],
) -> Result<Vec<(Vector, ForwardTrace)>> {
    minibatch
        .par_chunks(ACCUM_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|(x, _)| enc.forward(x).map_err(BroadFaceError::from))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|chunks| chunks.into_iter().flatten().collect())
}

/// Backward pass over a mini-batch, summing per-sample parameter gradients
/// with a fixed chunked reduction order.
fn backward_batch(
    enc: &MlpEncoder,
    traces: &[ForwardTrace],
    grad_embeddings: &[Vector],
) -> Result<EncoderGradients> {
    let indexed: Vec<(usize, &ForwardTrace)> = traces.iter().enumerate().collect();
    let partials: Vec<EncoderGradients> = indexed
        .par_chunks(ACCUM_CHUNK)
        .map(|chunk| {
            let mut acc = EncoderGradients::zeros_like(enc);
            for (i, trace) in chunk {
                let g = enc.backward(trace, &grad_embeddings[*i])?;
                acc.add_assign(&g);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = EncoderGradients::zeros_like(enc);
    for p in &partials {
        total.add_assign(p);
    }
    Ok(total)
}

/// One training iteration of the split objectives:
/// encoder forwards on the mini-batch only, encoder step from the batch
/// loss, classifier step from the batch-plus-queue loss, then enqueue the
/// fresh embeddings with post-update row snapshots.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration(
    enc: &mut MlpEncoder,
    w: &mut Matrix,
    queue: &mut BroadQueue,
    minibatch: &[(Vector, usize)],
    enc_opt: &mut Sgd,
    cls_opt: &mut Sgd,
    cfg: &MarginConfig,
    iteration: u64,
) -> Result<IterationMetrics> {
    if minibatch.is_empty() {
        return Err(BroadFaceError::EmptyBatch);
    }
    let forwarded = forward_batch(enc, minibatch)?;
    let embedded: Vec<(Vector, usize)> = forwarded
        .iter()
        .zip(minibatch)
        .map(|((e, _), (_, y))| (e.clone(), *y))
        .collect();
    let traces: Vec<ForwardTrace> = forwarded.into_iter().map(|(_, t)| t).collect();

    let enc_loss = encoder_loss(&embedded, w, cfg)?;
    let enc_grads = backward_batch(enc, &traces, &enc_loss.grad_embeddings)?;

    let cls_loss = classifier_loss(&embedded, queue, w, cfg)?;

    let lr = enc_opt.schedule().lr_at(iteration);
    {
        let grad_slices = enc_grads.flat_slices();
        let mut param_slices = enc.param_slices_mut();
        enc_opt.step(iteration, &mut param_slices, &grad_slices)?;
    }
    cls_opt.step(iteration, &mut [w.as_mut_slice()], &[cls_loss.grad_classifier.as_slice()])?;

    let raw_inputs: Vec<Vector> = minibatch.iter().map(|(x, _)| x.clone()).collect();
    queue.enqueue_batch(&embedded, w, iteration, Some(&raw_inputs))?;

    Ok(IterationMetrics {
        iteration,
        encoder_loss: enc_loss.loss,
        classifier_loss: cls_loss.loss,
        queue_terms: cls_loss.queue_terms,
        queue_len_after: queue.len(),
        mean_compensation_magnitude: cls_loss.mean_compensation_magnitude,
        encoder_forward_count: minibatch.len(),
        encoder_backward_count: minibatch.len(),
        learning_rate: lr,
    })
}

/// One iteration of plain mini-batch training: a single loss over the batch
/// updates both the encoder and the classifier. This is the reference the
/// zero-capacity queue must reproduce bit-exactly.
pub fn baseline_iteration(
    enc: &mut MlpEncoder,
    w: &mut Matrix,
    minibatch: &[(Vector, usize)],
    enc_opt: &mut Sgd,
    cls_opt: &mut Sgd,
    cfg: &MarginConfig,
    iteration: u64,
) -> Result<IterationMetrics> {
    if minibatch.is_empty() {
        return Err(BroadFaceError::EmptyBatch);
    }
    let forwarded = forward_batch(enc, minibatch)?;
    let embedded: Vec<(Vector, usize)> = forwarded
        .iter()
        .zip(minibatch)
        .map(|((e, _), (_, y))| (e.clone(), *y))
        .collect();
    let traces: Vec<ForwardTrace> = forwarded.into_iter().map(|(_, t)| t).collect();

    let batch = crate::losses::batch_loss(&embedded, w, cfg)?;
    let enc_grads = backward_batch(enc, &traces, &batch.grad_embeddings)?;

    let lr = enc_opt.schedule().lr_at(iteration);
    {
        let grad_slices = enc_grads.flat_slices();
        let mut param_slices = enc.param_slices_mut();
        enc_opt.step(iteration, &mut param_slices, &grad_slices)?;
    }
    cls_opt.step(iteration, &mut [w.as_mut_slice()], &[batch.grad_classifier.as_slice()])?;

    Ok(IterationMetrics {
        iteration,
        encoder_loss: batch.loss,
        classifier_loss: batch.loss,
        queue_terms: 0,
        queue_len_after: 0,
        mean_compensation_magnitude: 0.0,
        encoder_forward_count: minibatch.len(),
        encoder_backward_count: minibatch.len(),
        learning_rate: lr,
    })
}
