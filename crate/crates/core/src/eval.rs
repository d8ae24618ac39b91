//! Evaluation protocols: pairwise verification (TAR@FAR), rank-1
//! identification, retrieval recall@K, and the compensation-error
//! diagnostic that re-encodes retained queue inputs.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::broadface::{compensated_embedding, BroadFaceError, BroadQueue};
use crate::encoder::{EncoderError, MlpEncoder};
use crate::linalg::{dot_slices, LinalgError, Matrix, Vector, NORM_EPSILON};

#[derive(Debug)]
pub enum EvalError {
    EmptyInput(&'static str),
    InvalidK(usize),
    /// recall@K needs every query label to occur at least twice.
    SingletonClass(usize),
    /// A sampled queue entry has no retained raw input.
    MissingRetainedInput,
    NearZeroNorm,
    Encoder(EncoderError),
    Queue(BroadFaceError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyInput(what) => write!(f, "empty input: {what}"),
            EvalError::InvalidK(k) => write!(f, "invalid k: {k}"),
            EvalError::SingletonClass(c) => {
                write!(f, "class {c} has a single instance; recall is undefined")
            }
            EvalError::MissingRetainedInput => {
                write!(f, "queue entry has no retained input; enable diagnostics")
            }
            EvalError::NearZeroNorm => write!(f, "near-zero embedding norm"),
            EvalError::Encoder(e) => write!(f, "encoder error: {e}"),
            EvalError::Queue(e) => write!(f, "queue error: {e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<EncoderError> for EvalError {
    fn from(e: EncoderError) -> Self {
        EvalError::Encoder(e)
    }
}

impl From<BroadFaceError> for EvalError {
    fn from(e: BroadFaceError) -> Self {
        EvalError::Queue(e)
    }
}

impl From<LinalgError> for EvalError {
    fn from(_: LinalgError) -> Self {
        EvalError::NearZeroNorm
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// TAR and decision threshold per FAR target.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub far_targets: Vec<f64>,
    pub tar_at_far: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// Smallest candidate threshold whose impostor accept fraction is at most
/// `far_target`, and the genuine accept fraction at that threshold.
///
/// Candidates are the observed scores plus a sentinel just above the
/// maximum, so a threshold always exists (accepting nothing gives FAR 0).
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far_target: f64) -> Result<(f64, f64)> {
    if genuine.is_empty() {
        return Err(EvalError::EmptyInput("genuine scores"));
    }
    if impostor.is_empty() {
        return Err(EvalError::EmptyInput("impostor scores"));
    }
    let mut candidates: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    let max_all = candidates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    candidates.push(max_all.next_up());
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let mut sorted_imp = impostor.to_vec();
    sorted_imp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let far_of = |t: f64| {
        // fraction of impostor scores >= t
        let below = sorted_imp.partition_point(|&s| s < t);
        (sorted_imp.len() - below) as f64 / sorted_imp.len() as f64
    };
    let threshold = candidates
        .iter()
        .copied()
        .find(|&t| far_of(t) <= far_target)
        .expect("sentinel always satisfies");
    let tar = genuine.iter().filter(|&&s| s >= threshold).count() as f64 / genuine.len() as f64;
    Ok((tar, threshold))
}

pub fn verification_report(
    genuine: &[f64],
    impostor: &[f64],
    far_targets: &[f64],
) -> Result<VerificationReport> {
    let mut tars = Vec::with_capacity(far_targets.len());
    let mut thresholds = Vec::with_capacity(far_targets.len());
    for &target in far_targets {
        let (tar, thr) = tar_at_far(genuine, impostor, target)?;
        tars.push(tar);
        thresholds.push(thr);
    }
    Ok(VerificationReport {
        far_targets: far_targets.to_vec(),
        tar_at_far: tars,
        thresholds,
    })
}

fn normalized_rows(items: &[(Vector, usize)]) -> Result<Matrix> {
    let dim = items[0].0.dim();
    let mut data = vec![0.0; items.len() * dim];
    for (i, (e, _)) in items.iter().enumerate() {
        let n = e.l2_norm();
        if n <= NORM_EPSILON {
            return Err(EvalError::NearZeroNorm);
        }
        for (out, x) in data[i * dim..(i + 1) * dim].iter_mut().zip(e.as_slice()) {
            *out = x / n;
        }
    }
    Ok(Matrix::raw(items.len(), dim, data))
}

/// Fraction of probes whose most-similar gallery embedding (by cosine,
/// ties to the lower index) carries the same label.
pub fn rank1_identification(
    probes: &[(Vector, usize)],
    gallery: &[(Vector, usize)],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(EvalError::EmptyInput("probes"));
    }
    if gallery.is_empty() {
        return Err(EvalError::EmptyInput("gallery"));
    }
    let probe_hat = normalized_rows(probes)?;
    let gallery_hat = normalized_rows(gallery)?;
    let hits: usize = (0..probes.len())
        .into_par_iter()
        .map(|i| {
            let p = probe_hat.row(i);
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for j in 0..gallery.len() {
                let sim = dot_slices(p, gallery_hat.row(j));
                if sim > best {
                    best = sim;
                    best_idx = j;
                }
            }
            usize::from(gallery[best_idx].1 == probes[i].1)
        })
        .sum();
    Ok(hits as f64 / probes.len() as f64)
}

/// Recall@K over a single embedding set: a query succeeds when any of its
/// `k` nearest neighbors (cosine, self excluded, ties to the lower index)
/// shares its label. `k` larger than the neighbor count is capped.
pub fn recall_at_k(items: &[(Vector, usize)], ks: &[usize]) -> Result<Vec<f64>> {
    if items.len() < 2 {
        return Err(EvalError::EmptyInput("need at least two items"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(EvalError::InvalidK(k));
    }
    let mut class_counts = BTreeMap::new();
    for (_, y) in items {
        *class_counts.entry(*y).or_insert(0usize) += 1;
    }
    if let Some((&c, _)) = class_counts.iter().find(|(_, &n)| n < 2) {
        return Err(EvalError::SingletonClass(c));
    }
    let hat = normalized_rows(items)?;
    let max_k = ks.iter().copied().max().unwrap().min(items.len() - 1);

    // per query: whether a same-label item appears within the first k
    // neighbors, for every k up to max_k
    let per_query: Vec<Vec<bool>> = (0..items.len())
        .into_par_iter()
        .map(|i| {
            let q = hat.row(i);
            let mut order: Vec<usize> = (0..items.len()).filter(|&j| j != i).collect();
            let mut sims = vec![0.0; items.len()];
            for &j in &order {
                sims[j] = dot_slices(q, hat.row(j));
            }
            let better = |a: &usize, b: &usize| {
                sims[*b]
                    .partial_cmp(&sims[*a])
                    .unwrap()
                    .then_with(|| a.cmp(b))
            };
            if max_k < order.len() {
                order.select_nth_unstable_by(max_k - 1, better);
                order.truncate(max_k);
            }
            order.sort_by(better);
            let mut seen_match = false;
            order
                .iter()
                .map(|&j| {
                    seen_match |= items[j].1 == items[i].1;
                    seen_match
                })
                .collect()
        })
        .collect();

    Ok(ks
        .iter()
        .map(|&k| {
            let kk = k.min(max_k);
            let hits = per_query.iter().filter(|flags| flags[kk - 1]).count();
            hits as f64 / items.len() as f64
        })
        .collect())
}

/// Mean cosine errors of queued embeddings against the re-encoded current
/// embeddings, bucketed by age in iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationErrorRecord {
    pub iterations_elapsed: u64,
    pub mean_error_uncompensated: f64,
    pub mean_error_compensated: f64,
    pub count: usize,
}

/// Re-encodes a uniform sample of queue entries with the current encoder
/// and reports `1 - cos` errors of the raw and compensated stored
/// embeddings, grouped by iterations since enqueue. Requires entries with
/// retained inputs. Compensation is evaluated unconditionally so the two
/// curves can be compared even on a queue trained without it.
pub fn measure_compensation_error(
    enc: &MlpEncoder,
    w: &Matrix,
    queue: &BroadQueue,
    current_iteration: u64,
    sample_size: usize,
    seed: u64,
) -> Result<Vec<CompensationErrorRecord>> {
    if queue.is_empty() {
        return Err(EvalError::EmptyInput("queue"));
    }
    let mut indices: Vec<usize> = (0..queue.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = sample_size.min(indices.len());
    // partial Fisher-Yates: the first `take` entries form the sample
    for i in 0..take {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    indices.truncate(take);
    indices.sort_unstable();

    let mut buckets: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for idx in indices {
        let entry = queue.entry(idx).expect("index in range");
        let x = entry.raw_input.as_ref().ok_or(EvalError::MissingRetainedInput)?;
        let e_now = enc.embed(x)?;
        let e_star = compensated_embedding(entry, w)?;
        let err_raw = 1.0 - cosine(&e_now, &entry.embedding)?;
        let err_comp = 1.0 - cosine(&e_now, &e_star)?;
        let age = current_iteration.saturating_sub(entry.iteration);
        let slot = buckets.entry(age).or_insert((0.0, 0.0, 0));
        slot.0 += err_raw;
        slot.1 += err_comp;
        slot.2 += 1;
    }
    Ok(buckets
        .into_iter()
        .map(|(age, (raw, comp, n))| CompensationErrorRecord {
            iterations_elapsed: age,
            mean_error_uncompensated: raw / n as f64,
            mean_error_compensated: comp / n as f64,
            count: n,
        })
        .collect())
}

fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na <= NORM_EPSILON || nb <= NORM_EPSILON {
        return Err(EvalError::NearZeroNorm);
    }
    Ok(dot_slices(a.as_slice(), b.as_slice()) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{LrSchedule, Sgd};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_slice(xs).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
        loop {
            let x = Vector::raw((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
            if x.l2_norm() > 0.2 {
                return x.l2_normalized().unwrap();
            }
        }
    }

    #[test]
    fn tar_at_far_four_score_example() {
        let (tar, thr) = tar_at_far(&[0.9, 0.8], &[0.5, 0.1], 0.5).unwrap();
        assert_eq!(tar, 1.0);
        assert_eq!(thr, 0.5);
    }

    #[test]
    fn tar_is_one_when_perfectly_separated() {
        let genuine = [0.9, 0.85, 0.95];
        let impostor = [0.2, 0.1, 0.3];
        for far in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0] {
            let (tar, _) = tar_at_far(&genuine, &impostor, far).unwrap();
            assert_eq!(tar, 1.0, "far target {far}");
        }
    }

    #[test]
    fn identical_distributions_give_tar_near_far() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (genuine, impostor) = scores.split_at(2000);
        for far in [0.1, 0.3, 0.5] {
            let (tar, _) = tar_at_far(genuine, impostor, far).unwrap();
            assert!((tar - far).abs() < 0.05, "tar {tar} vs far {far}");
        }
    }

    #[test]
    fn tar_is_monotone_in_far_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let genuine: Vec<f64> = (0..200).map(|_| rng.random_range(-0.2..1.0)).collect();
        let impostor: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..0.6)).collect();
        let mut prev = -1.0;
        for far in [0.0, 0.01, 0.05, 0.1, 0.3, 0.7, 1.0] {
            let (tar, _) = tar_at_far(&genuine, &impostor, far).unwrap();
            assert!(tar >= prev, "tar decreased at far {far}");
            prev = tar;
        }
    }

    #[test]
    fn tar_at_far_rejects_empty_lists() {
        assert!(matches!(tar_at_far(&[], &[0.1], 0.5), Err(EvalError::EmptyInput(_))));
        assert!(matches!(tar_at_far(&[0.1], &[], 0.5), Err(EvalError::EmptyInput(_))));
    }

    #[test]
    fn rank1_gallery_equals_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items: Vec<(Vector, usize)> =
            (0..10).map(|i| (random_unit(&mut rng, 4), i % 3)).collect();
        assert_eq!(rank1_identification(&items, &items).unwrap(), 1.0);
    }

    #[test]
    fn rank1_single_class_gallery() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gallery: Vec<(Vector, usize)> =
            (0..4).map(|_| (random_unit(&mut rng, 4), 1)).collect();
        let probes: Vec<(Vector, usize)> =
            (0..8).map(|i| (random_unit(&mut rng, 4), if i < 2 { 1 } else { 0 })).collect();
        assert_eq!(rank1_identification(&probes, &gallery).unwrap(), 0.25);
    }

    #[test]
    fn rank1_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let gallery: Vec<(Vector, usize)> =
                (0..12).map(|_| (random_unit(&mut rng, 3), rng.random_range(0..3))).collect();
            let probes: Vec<(Vector, usize)> =
                (0..9).map(|_| (random_unit(&mut rng, 3), rng.random_range(0..3))).collect();
            let got = rank1_identification(&probes, &gallery).unwrap();
            let mut hits = 0;
            for (p, y) in &probes {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (j, (g, _)) in gallery.iter().enumerate() {
                    let sim = p.dot(g).unwrap() / (p.l2_norm() * g.l2_norm());
                    if sim > best.0 {
                        best = (sim, j);
                    }
                }
                if gallery[best.1].1 == *y {
                    hits += 1;
                }
            }
            assert_eq!(got, hits as f64 / probes.len() as f64);
        }
    }

    #[test]
    fn recall_is_one_when_k_covers_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let items: Vec<(Vector, usize)> =
            (0..10).map(|i| (random_unit(&mut rng, 4), i % 5)).collect();
        let recalls = recall_at_k(&items, &[9, 100]).unwrap();
        assert_eq!(recalls, vec![1.0, 1.0]);
    }

    #[test]
    fn recall_at_one_with_exact_clones() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut items = Vec::new();
        for y in 0..4 {
            let center = random_unit(&mut rng, 5);
            items.push((center.clone(), y));
            items.push((center, y));
        }
        let recalls = recall_at_k(&items, &[1]).unwrap();
        assert_eq!(recalls, vec![1.0]);
    }

    #[test]
    fn recall_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            // 8-point set, every class at least twice
            let labels = [0, 0, 1, 1, 2, 2, 0, 1];
            let items: Vec<(Vector, usize)> =
                labels.iter().map(|&y| (random_unit(&mut rng, 3), y)).collect();
            let ks = [1, 2, 3, 7];
            let got = recall_at_k(&items, &ks).unwrap();
            for (ki, &k) in ks.iter().enumerate() {
                let mut hits = 0;
                for i in 0..items.len() {
                    let mut sims: Vec<(f64, usize)> = (0..items.len())
                        .filter(|&j| j != i)
                        .map(|j| {
                            (items[i].0.dot(&items[j].0).unwrap(), j)
                        })
                        .collect();
                    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                    if sims.iter().take(k).any(|&(_, j)| items[j].1 == items[i].1) {
                        hits += 1;
                    }
                }
                assert_eq!(got[ki], hits as f64 / items.len() as f64, "k={k}");
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let items: Vec<(Vector, usize)> =
            (0..24).map(|i| (random_unit(&mut rng, 4), i % 6)).collect();
        let ks: Vec<usize> = (1..=23).collect();
        let recalls = recall_at_k(&items, &ks).unwrap();
        for pair in recalls.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
    }

    #[test]
    fn recall_rejects_invalid_k_and_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let items: Vec<(Vector, usize)> =
            (0..6).map(|i| (random_unit(&mut rng, 3), i % 3)).collect();
        assert!(matches!(recall_at_k(&items, &[0]), Err(EvalError::InvalidK(0))));
        let mut singleton = items.clone();
        singleton.push((random_unit(&mut rng, 3), 5));
        assert!(matches!(recall_at_k(&singleton, &[1]), Err(EvalError::SingletonClass(5))));
    }

    fn diagnostic_queue_setup(
        seed: u64,
    ) -> (MlpEncoder, Matrix, BroadQueue, Vec<(Vector, usize)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = MlpEncoder::init(&[4, 8, 3], seed).unwrap();
        let w = Matrix::raw(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect());
        let queue = BroadQueue::new(256, true).with_retained_inputs();
        let batch: Vec<(Vector, usize)> = (0..6)
            .map(|_| {
                (
                    Vector::raw((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
                    rng.random_range(0..5),
                )
            })
            .collect();
        (enc, w, queue, batch)
    }

    #[test]
    fn fresh_entries_have_zero_error() {
        let (enc, w, mut queue, batch) = diagnostic_queue_setup(20);
        let embedded: Vec<(Vector, usize)> =
            batch.iter().map(|(x, y)| (enc.embed(x).unwrap(), *y)).collect();
        let raw: Vec<Vector> = batch.iter().map(|(x, _)| x.clone()).collect();
        queue.enqueue_batch(&embedded, &w, 0, Some(&raw)).unwrap();
        let records = measure_compensation_error(&enc, &w, &queue, 0, 100, 1).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].iterations_elapsed, 0);
        assert!(records[0].mean_error_uncompensated.abs() < 1e-12);
        assert!(records[0].mean_error_compensated.abs() < 1e-12);
    }

    #[test]
    fn unchanged_rows_make_both_errors_equal() {
        let (mut enc, w, mut queue, batch) = diagnostic_queue_setup(21);
        let embedded: Vec<(Vector, usize)> =
            batch.iter().map(|(x, y)| (enc.embed(x).unwrap(), *y)).collect();
        let raw: Vec<Vector> = batch.iter().map(|(x, _)| x.clone()).collect();
        queue.enqueue_batch(&embedded, &w, 0, Some(&raw)).unwrap();
        // encoder moves, classifier does not
        for layer in enc.layers_mut() {
            for p in layer.weight.as_mut_slice() {
                *p += 0.01;
            }
        }
        let records = measure_compensation_error(&enc, &w, &queue, 4, 100, 1).unwrap();
        for r in &records {
            assert!(r.mean_error_uncompensated > 0.0);
            assert_eq!(r.mean_error_uncompensated, r.mean_error_compensated);
        }
    }

    #[test]
    fn missing_retained_input_is_reported() {
        let (enc, w, _, batch) = diagnostic_queue_setup(22);
        let mut queue = BroadQueue::new(64, true); // no retained inputs
        let embedded: Vec<(Vector, usize)> =
            batch.iter().map(|(x, y)| (enc.embed(x).unwrap(), *y)).collect();
        queue.enqueue_batch(&embedded, &w, 0, None).unwrap();
        assert!(matches!(
            measure_compensation_error(&enc, &w, &queue, 1, 10, 0),
            Err(EvalError::MissingRetainedInput)
        ));
    }

    // Trains briefly on a drifting toy problem; after enough steps the
    // compensated error must undercut the raw error on aged entries.
    #[test]
    fn compensation_reduces_error_after_training_drift() {
        use crate::broadface::train_iteration;
        use crate::losses::MarginConfig;

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let classes = 8;
        let enc0 = MlpEncoder::init(&[6, 12, 4], 23).unwrap();
        let mut w = Matrix::raw(
            classes,
            4,
            (0..classes * 4).map(|_| rng.random_range(-0.5..0.5)).collect(),
        );
        let mut enc = enc0;
        let mut queue = BroadQueue::new(512, true).with_retained_inputs();
        let cfg = MarginConfig::arcface(0.3, 16.0).unwrap();
        let schedule = LrSchedule::constant(0.05).unwrap();
        let mut enc_opt = Sgd::new(0.9, 0.0, schedule.clone()).unwrap();
        let mut cls_opt = Sgd::new(0.9, 0.0, schedule).unwrap();

        // fixed per-class inputs plus noise
        let centers: Vec<Vector> =
            (0..classes).map(|_| random_unit(&mut rng, 6).scaled(2.0)).collect();
        let mut iteration = 0u64;
        for _ in 0..40 {
            let batch: Vec<(Vector, usize)> = (0..8)
                .map(|_| {
                    let y = rng.random_range(0..classes);
                    let noise = Vector::raw((0..6).map(|_| rng.random_range(-0.05..0.05)).collect());
                    (centers[y].add(&noise).unwrap(), y)
                })
                .collect();
            train_iteration(
                &mut enc, &mut w, &mut queue, &batch, &mut enc_opt, &mut cls_opt, &cfg, iteration,
            )
            .unwrap();
            iteration += 1;
        }
        let records =
            measure_compensation_error(&enc, &w, &queue, iteration - 1, 4096, 5).unwrap();
        let aged: Vec<_> =
            records.iter().filter(|r| r.iterations_elapsed >= 10).collect();
        assert!(!aged.is_empty());
        let raw: f64 = aged.iter().map(|r| r.mean_error_uncompensated).sum::<f64>()
            / aged.len() as f64;
        let comp: f64 = aged.iter().map(|r| r.mean_error_compensated).sum::<f64>()
            / aged.len() as f64;
        assert!(
            comp < raw,
            "aged compensated error {comp} not below uncompensated {raw}"
        );
    }
}
