//! Normalized-softmax classification losses over cosine logits, with
//! optional angular (ArcFace) and additive-cosine (CosFace) margins.
//!
//! Both the embedding and the classifier rows are L2-normalized inside the
//! loss, and the returned gradients flow through both normalizations. The
//! batch paths share one per-sample routine and a fixed chunked reduction
//! order, so results are deterministic regardless of thread count.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rayon::prelude::*;

use crate::linalg::{dot_slices, LinalgError, Matrix, Vector, NORM_EPSILON};

/// Cosines are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before `acos`.
const COS_CLAMP: f64 = 1e-7;

/// Fixed chunk size of the deterministic parallel reduction.
pub(crate) const ACCUM_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Embedding or classifier row norm at or below the normalization guard.
    NearZeroNorm,
    /// Label does not index a classifier row.
    InvalidIdentity { y: usize, classes: usize },
    DimensionMismatch { expected: usize, got: usize },
    EmptyBatch,
    /// Margin configuration outside its documented range.
    InvalidMargin(String),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::NearZeroNorm => write!(f, "near-zero norm in embedding or classifier row"),
            LossError::InvalidIdentity { y, classes } => {
                write!(f, "identity {y} out of range for {classes} classes")
            }
            LossError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            LossError::EmptyBatch => write!(f, "empty batch"),
            LossError::InvalidMargin(msg) => write!(f, "invalid margin config: {msg}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<LinalgError> for LossError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NearZeroNorm => LossError::NearZeroNorm,
            LinalgError::DimensionMismatch { expected, got } => {
                LossError::DimensionMismatch { expected, got }
            }
            other => LossError::InvalidMargin(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    Plain,
    ArcFace,
    CosFace,
}

impl fmt::Display for MarginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarginKind::Plain => write!(f, "plain"),
            MarginKind::ArcFace => write!(f, "arcface"),
            MarginKind::CosFace => write!(f, "cosface"),
        }
    }
}

/// Margin kind, margin value and logit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub kind: MarginKind,
    /// Radians for ArcFace, cosine offset for CosFace, must be 0 for plain.
    pub margin: f64,
    /// Positive multiplier on the cosine logits.
    pub scale: f64,
}

impl MarginConfig {
    pub fn new(kind: MarginKind, margin: f64, scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(LossError::InvalidMargin(format!("scale {scale} must be > 0")));
        }
        if !margin.is_finite() {
            return Err(LossError::InvalidMargin("margin must be finite".into()));
        }
        match kind {
            MarginKind::Plain => {
                if margin != 0.0 {
                    return Err(LossError::InvalidMargin(
                        "plain softmax takes no margin".into(),
                    ));
                }
            }
            MarginKind::ArcFace => {
                if !(0.0..PI / 2.0).contains(&margin) {
                    return Err(LossError::InvalidMargin(format!(
                        "arcface margin {margin} outside [0, pi/2)"
                    )));
                }
            }
            MarginKind::CosFace => {
                if !(0.0..1.0).contains(&margin) {
                    return Err(LossError::InvalidMargin(format!(
                        "cosface margin {margin} outside [0, 1)"
                    )));
                }
            }
        }
        Ok(Self { kind, margin, scale })
    }

    pub fn plain(scale: f64) -> Result<Self> {
        Self::new(MarginKind::Plain, 0.0, scale)
    }

    pub fn arcface(margin: f64, scale: f64) -> Result<Self> {
        Self::new(MarginKind::ArcFace, margin, scale)
    }

    pub fn cosface(margin: f64, scale: f64) -> Result<Self> {
        Self::new(MarginKind::CosFace, margin, scale)
    }

    /// Target-logit transform `psi(cos)` and its derivative w.r.t. `cos`.
    fn target_transform(&self, cos: f64) -> (f64, f64) {
        match self.kind {
            MarginKind::Plain => (cos, 1.0),
            MarginKind::CosFace => (cos - self.margin, 1.0),
            MarginKind::ArcFace => {
                let c = cos.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
                let theta = c.acos();
                if theta + self.margin <= PI {
                    let sin_theta = (1.0 - c * c).sqrt();
                    ((theta + self.margin).cos(), (theta + self.margin).sin() / sin_theta)
                } else {
                    // monotonic fallback past the angular range
                    (c - self.margin * self.margin.sin(), 1.0)
                }
            }
        }
    }
}

impl Default for MarginConfig {
    /// ArcFace with margin 0.5 rad and scale 64.
    fn default() -> Self {
        Self { kind: MarginKind::ArcFace, margin: 0.5, scale: 64.0 }
    }
}

/// Loss value and exact gradients for one sample.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// `dL/de` through the embedding normalization.
    pub grad_embedding: Vector,
    /// `dL/dW_j` per row; every row entering the softmax is present.
    pub grad_rows: BTreeMap<usize, Vector>,
}

/// Mean loss and accumulated gradients over a mini-batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    /// `dL/de_i` for each sample, already carrying the `1/|X|` factor.
    pub grad_embeddings: Vec<Vector>,
    /// Dense `dL/dW`, already carrying the `1/|X|` factor.
    pub grad_classifier: Matrix,
}

/// Row norms and normalized rows of a classifier matrix, built once per
/// parameter state and shared across every sample of an iteration.
pub struct ClassifierCache<'a> {
    w: &'a Matrix,
    row_norms: Vec<f64>,
    normalized_rows: Matrix,
}

impl<'a> ClassifierCache<'a> {
    pub fn new(w: &'a Matrix) -> Result<Self> {
        let (c, d) = (w.rows(), w.cols());
        let mut row_norms = Vec::with_capacity(c);
        let mut normalized = vec![0.0; c * d];
        for j in 0..c {
            let row = w.row(j);
            let n = dot_slices(row, row).sqrt();
            if n <= NORM_EPSILON {
                return Err(LossError::NearZeroNorm);
            }
            row_norms.push(n);
            for (out, x) in normalized[j * d..(j + 1) * d].iter_mut().zip(row) {
                *out = x / n;
            }
        }
        Ok(Self { w, row_norms, normalized_rows: Matrix::raw(c, d, normalized) })
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }
}

/// Reused per-sample buffers so the batch paths do not allocate per sample.
struct Scratch {
    e_hat: Vec<f64>,
    cos: Vec<f64>,
    z: Vec<f64>,
    g: Vec<f64>,
    acc: Vec<f64>,
}

impl Scratch {
    fn new(classes: usize, dim: usize) -> Self {
        Self {
            e_hat: vec![0.0; dim],
            cos: vec![0.0; classes],
            z: vec![0.0; classes],
            g: vec![0.0; classes],
            acc: vec![0.0; dim],
        }
    }
}

/// Per-sample core: fills `scratch` with cosines and `g = dL/dcos`, returns
/// the loss. All batch and single-sample entry points share this routine.
fn sample_core(
    cache: &ClassifierCache,
    e: &Vector,
    y: usize,
    cfg: &MarginConfig,
    scratch: &mut Scratch,
) -> Result<f64> {
    let c = cache.classes();
    let d = cache.dim();
    if e.dim() != d {
        return Err(LossError::DimensionMismatch { expected: d, got: e.dim() });
    }
    if y >= c {
        return Err(LossError::InvalidIdentity { y, classes: c });
    }
    let e_norm = e.l2_norm();
    if e_norm <= NORM_EPSILON {
        return Err(LossError::NearZeroNorm);
    }
    for (out, x) in scratch.e_hat.iter_mut().zip(e.as_slice()) {
        *out = x / e_norm;
    }
    for j in 0..c {
        scratch.cos[j] = dot_slices(cache.normalized_rows.row(j), &scratch.e_hat);
    }
    let (psi, dpsi) = cfg.target_transform(scratch.cos[y]);
    let s = cfg.scale;
    let mut z_max = f64::NEG_INFINITY;
    for j in 0..c {
        let z = if j == y { s * psi } else { s * scratch.cos[j] };
        scratch.z[j] = z;
        if z > z_max {
            z_max = z;
        }
    }
    let mut sum_exp = 0.0;
    for j in 0..c {
        let p = (scratch.z[j] - z_max).exp();
        scratch.g[j] = p;
        sum_exp += p;
    }
    let loss = z_max + sum_exp.ln() - scratch.z[y];
    // g_j = dL/dcos_j = (p_j - [j == y]) * s * (dpsi at the target, 1 elsewhere)
    for j in 0..c {
        let p = scratch.g[j] / sum_exp;
        let indicator = if j == y { 1.0 } else { 0.0 };
        let mult = if j == y { dpsi } else { 1.0 };
        scratch.g[j] = (p - indicator) * s * mult;
    }
    Ok(loss)
}

/// `dL/de` from the filled scratch; shared by all entry points.
fn grad_embedding_from_scratch(cache: &ClassifierCache, e_norm: f64, scratch: &mut Scratch) -> Vector {
    let d = cache.dim();
    scratch.acc.fill(0.0);
    let mut g_dot_cos = 0.0;
    for j in 0..cache.classes() {
        let gj = scratch.g[j];
        let row = cache.normalized_rows.row(j);
        for (a, w) in scratch.acc.iter_mut().zip(row) {
            *a += gj * w;
        }
        g_dot_cos += gj * scratch.cos[j];
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        out.push((scratch.acc[i] - g_dot_cos * scratch.e_hat[i]) / e_norm);
    }
    Vector::raw(out)
}

/// Adds `dL/dW` of the current scratch state into `grad_w`.
fn accumulate_grad_rows(cache: &ClassifierCache, scratch: &Scratch, grad_w: &mut Matrix) {
    let d = cache.dim();
    for j in 0..cache.classes() {
        let a = scratch.g[j] / cache.row_norms[j];
        let b = a * scratch.cos[j];
        let row = &mut grad_w.as_mut_slice()[j * d..(j + 1) * d];
        let w_hat_row = cache.normalized_rows.row(j);
        for ((out, eh), wh) in row.iter_mut().zip(&scratch.e_hat).zip(w_hat_row) {
            *out += a * eh - b * wh;
        }
    }
}

/// Cosines between `e` and every classifier row, each in `[-1, 1]`.
pub fn cosine_logits(e: &Vector, w: &Matrix) -> Result<Vec<f64>> {
    let cache = ClassifierCache::new(w)?;
    if e.dim() != cache.dim() {
        return Err(LossError::DimensionMismatch { expected: cache.dim(), got: e.dim() });
    }
    let e_hat = e.l2_normalized()?;
    Ok((0..cache.classes())
        .map(|j| dot_slices(cache.normalized_rows.row(j), e_hat.as_slice()))
        .collect())
}

/// Margin softmax loss of one sample with exact gradients w.r.t. the
/// embedding and every classifier row.
pub fn margin_loss(e: &Vector, y: usize, w: &Matrix, cfg: &MarginConfig) -> Result<LossOutput> {
    let cache = ClassifierCache::new(w)?;
    margin_loss_cached(&cache, e, y, cfg)
}

/// As [`margin_loss`] but against a prebuilt [`ClassifierCache`].
pub fn margin_loss_cached(
    cache: &ClassifierCache,
    e: &Vector,
    y: usize,
    cfg: &MarginConfig,
) -> Result<LossOutput> {
    let mut scratch = Scratch::new(cache.classes(), cache.dim());
    let loss = sample_core(cache, e, y, cfg, &mut scratch)?;
    let e_norm = e.l2_norm();
    let grad_embedding = grad_embedding_from_scratch(cache, e_norm, &mut scratch);
    let d = cache.dim();
    let mut grad_rows = BTreeMap::new();
    for j in 0..cache.classes() {
        let a = scratch.g[j] / cache.row_norms[j];
        let b = a * scratch.cos[j];
        let mut row = Vec::with_capacity(d);
        for (eh, wh) in scratch.e_hat.iter().zip(cache.normalized_rows.row(j)) {
            row.push(a * eh - b * wh);
        }
        grad_rows.insert(j, Vector::raw(row));
    }
    Ok(LossOutput { loss, grad_embedding, grad_rows })
}

/// Partial sums produced by one chunk of the deterministic reduction.
pub(crate) struct AccumPartial {
    pub loss_sum: f64,
    pub grad_embeddings: Vec<Vector>,
    pub grad_w: Option<Matrix>,
}

/// Sums losses (and optionally gradients) over `samples` against a shared
/// cache. Samples are split into fixed chunks processed in parallel and the
/// partial results are folded in index order, so the result is bit-identical
/// for any thread count.
pub(crate) fn accumulate_samples(
    cache: &ClassifierCache,
    samples: &[(&Vector, usize)],
    want_grad_e: bool,
    want_grad_w: bool,
    cfg: &MarginConfig,
) -> Result<AccumPartial> {
    let partials: Vec<Result<AccumPartial>> = samples
        .par_chunks(ACCUM_CHUNK)
        .map(|chunk| {
            let mut scratch = Scratch::new(cache.classes(), cache.dim());
            let mut loss_sum = 0.0;
            let mut grad_embeddings = Vec::with_capacity(if want_grad_e { chunk.len() } else { 0 });
            let mut grad_w = if want_grad_w {
                Some(Matrix::zeros(cache.classes(), cache.dim()))
            } else {
                None
            };
            for &(e, y) in chunk {
                let loss = sample_core(cache, e, y, cfg, &mut scratch)?;
                loss_sum += loss;
                if want_grad_e {
                    grad_embeddings.push(grad_embedding_from_scratch(cache, e.l2_norm(), &mut scratch));
                }
                if let Some(gw) = grad_w.as_mut() {
                    accumulate_grad_rows(cache, &scratch, gw);
                }
            }
            Ok(AccumPartial { loss_sum, grad_embeddings, grad_w })
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut grad_embeddings = Vec::with_capacity(if want_grad_e { samples.len() } else { 0 });
    let mut grad_w = if want_grad_w {
        Some(Matrix::zeros(cache.classes(), cache.dim()))
    } else {
        None
    };
    for partial in partials {
        let p = partial?;
        loss_sum += p.loss_sum;
        grad_embeddings.extend(p.grad_embeddings);
        if let (Some(acc), Some(part)) = (grad_w.as_mut(), p.grad_w.as_ref()) {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(part.as_slice()) {
                *a += b;
            }
        }
    }
    Ok(AccumPartial { loss_sum, grad_embeddings, grad_w })
}

/// Mean margin loss over a batch with gradients averaged by the same
/// `1/|X|` factor.
pub fn batch_loss(batch: &[(Vector, usize)], w: &Matrix, cfg: &MarginConfig) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let cache = ClassifierCache::new(w)?;
    let refs: Vec<(&Vector, usize)> = batch.iter().map(|(e, y)| (e, *y)).collect();
    let acc = accumulate_samples(&cache, &refs, true, true, cfg)?;
    let inv = 1.0 / batch.len() as f64;
    let grad_embeddings = acc
        .grad_embeddings
        .into_iter()
        .map(|g| g.scaled(inv))
        .collect();
    let mut grad_classifier = acc.grad_w.expect("requested grad_w");
    for x in grad_classifier.as_mut_slice() {
        *x *= inv;
    }
    Ok(BatchLoss { loss: acc.loss_sum * inv, grad_embeddings, grad_classifier })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_slice(xs).unwrap()
    }

    fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
        Vector::raw((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::raw(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn norm_rel_error(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    fn numeric_grad_embedding(
        e: &Vector,
        y: usize,
        w: &Matrix,
        cfg: &MarginConfig,
        step: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(e.dim());
        for i in 0..e.dim() {
            let mut plus = e.clone();
            plus.as_mut_slice()[i] += step;
            let mut minus = e.clone();
            minus.as_mut_slice()[i] -= step;
            let fp = margin_loss(&plus, y, w, cfg).unwrap().loss;
            let fm = margin_loss(&minus, y, w, cfg).unwrap().loss;
            out.push((fp - fm) / (2.0 * step));
        }
        out
    }

    fn numeric_grad_rows(
        e: &Vector,
        y: usize,
        w: &Matrix,
        cfg: &MarginConfig,
        step: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(w.rows() * w.cols());
        for idx in 0..w.rows() * w.cols() {
            let mut plus = w.clone();
            plus.as_mut_slice()[idx] += step;
            let mut minus = w.clone();
            minus.as_mut_slice()[idx] -= step;
            let fp = margin_loss(e, y, &plus, cfg).unwrap().loss;
            let fm = margin_loss(e, y, &minus, cfg).unwrap().loss;
            out.push((fp - fm) / (2.0 * step));
        }
        out
    }

    fn flatten_grad_rows(out: &LossOutput, rows: usize, cols: usize) -> Vec<f64> {
        let mut flat = vec![0.0; rows * cols];
        for (j, g) in &out.grad_rows {
            flat[j * cols..(j + 1) * cols].copy_from_slice(g.as_slice());
        }
        flat
    }

    #[test]
    fn cosine_logits_aligned_and_orthogonal() {
        let w = Matrix::identity(3);
        let logits = cosine_logits(&v(&[2.0, 0.0, 0.0]), &w).unwrap();
        assert!((logits[0] - 1.0).abs() < 1e-15);
        assert!(logits[1].abs() < 1e-15);
        assert!(logits[2].abs() < 1e-15);
    }

    #[test]
    fn cosine_logits_identical_rows_are_equal() {
        let w = Matrix::new(3, 2, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let logits = cosine_logits(&v(&[0.3, -0.9]), &w).unwrap();
        assert_eq!(logits[0], logits[1]);
        assert_eq!(logits[1], logits[2]);
    }

    #[test]
    fn cosine_logits_opposite_rows() {
        let w = Matrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let logits = cosine_logits(&v(&[1.0, 0.0]), &w).unwrap();
        assert_eq!(logits, vec![1.0, -1.0]);
    }

    #[test]
    fn cosine_logits_rejects_zero_norms() {
        let w = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cosine_logits(&v(&[1.0, 0.0]), &w).unwrap_err(), LossError::NearZeroNorm);
        let w = Matrix::identity(2);
        assert_eq!(cosine_logits(&v(&[0.0, 0.0]), &w).unwrap_err(), LossError::NearZeroNorm);
    }

    #[test]
    fn symmetric_two_class_loss_is_ln_two() {
        let w = Matrix::identity(2);
        let cfg = MarginConfig::plain(1.0).unwrap();
        let out = margin_loss(&v(&[1.0, 1.0]), 0, &w, &cfg).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn arcface_zero_margin_equals_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (c, d) = (rng.random_range(2..6), rng.random_range(2..6));
            let w = random_matrix(&mut rng, c, d);
            let e = random_vector(&mut rng, d);
            if e.l2_norm() < 0.1 {
                continue;
            }
            let y = rng.random_range(0..c);
            let plain = margin_loss(&e, y, &w, &MarginConfig::plain(1.0).unwrap()).unwrap();
            let arc = margin_loss(&e, y, &w, &MarginConfig::arcface(0.0, 1.0).unwrap()).unwrap();
            assert!((plain.loss - arc.loss).abs() < 1e-12);
            assert!(norm_rel_error(plain.grad_embedding.as_slice(), arc.grad_embedding.as_slice()) < 1e-12);
            for j in 0..c {
                assert!(
                    norm_rel_error(plain.grad_rows[&j].as_slice(), arc.grad_rows[&j].as_slice())
                        < 1e-10
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfgs = [
            MarginConfig::plain(1.0).unwrap(),
            MarginConfig::plain(16.0).unwrap(),
            MarginConfig::arcface(0.5, 8.0).unwrap(),
            MarginConfig::cosface(0.35, 8.0).unwrap(),
        ];
        for trial in 0..20 {
            let cfg = &cfgs[trial % cfgs.len()];
            let (c, d) = (rng.random_range(3..7), rng.random_range(3..7));
            let w = random_matrix(&mut rng, c, d);
            let e = random_vector(&mut rng, d);
            if e.l2_norm() < 0.3 || (0..c).any(|j| w.row_vector(j).l2_norm() < 0.3) {
                continue;
            }
            let y = rng.random_range(0..c);
            let out = margin_loss(&e, y, &w, cfg).unwrap();
            let step = 1e-6;
            let fd_e = numeric_grad_embedding(&e, y, &w, cfg, step);
            assert!(
                norm_rel_error(out.grad_embedding.as_slice(), &fd_e) < 1e-5,
                "embedding gradient mismatch for {cfg:?}"
            );
            let fd_w = numeric_grad_rows(&e, y, &w, cfg, step);
            let an_w = flatten_grad_rows(&out, c, d);
            assert!(norm_rel_error(&an_w, &fd_w) < 1e-5, "row gradient mismatch for {cfg:?}");
        }
    }

    #[test]
    fn loss_is_input_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = MarginConfig::arcface(0.5, 16.0).unwrap();
        for _ in 0..20 {
            let (c, d) = (4, 5);
            let w = random_matrix(&mut rng, c, d);
            let e = random_vector(&mut rng, d);
            if e.l2_norm() < 0.3 {
                continue;
            }
            let y = rng.random_range(0..c);
            let c_scale: f64 = rng.random_range(0.01..50.0);
            let a = margin_loss(&e, y, &w, &cfg).unwrap().loss;
            let b = margin_loss(&e.scaled(c_scale), y, &w, &cfg).unwrap().loss;
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn target_row_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let cfg = MarginConfig::cosface(0.2, 8.0).unwrap();
        for _ in 0..20 {
            let (c, d) = (5, 4);
            let w = random_matrix(&mut rng, c, d);
            let e = random_vector(&mut rng, d);
            if e.l2_norm() < 0.3 || (0..c).any(|j| w.row_vector(j).l2_norm() < 0.3) {
                continue;
            }
            let y = rng.random_range(0..c);
            let out = margin_loss(&e, y, &w, &cfg).unwrap();
            let grad_y = &out.grad_rows[&y];
            if grad_y.l2_norm() < 1e-9 {
                continue;
            }
            let eta = 1e-4;
            let mut stepped = w.clone();
            for (tw, g) in stepped.row_mut(y).iter_mut().zip(grad_y.as_slice()) {
                *tw -= eta * g;
            }
            let after = margin_loss(&e, y, &stepped, &cfg).unwrap().loss;
            assert!(after < out.loss, "step did not decrease loss: {} -> {after}", out.loss);
        }
    }

    #[test]
    fn softmax_probabilities_reconstruct_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let cfg = MarginConfig::plain(1.0).unwrap();
        for _ in 0..20 {
            let (c, d) = (6, 5);
            let w = random_matrix(&mut rng, c, d);
            let e = random_vector(&mut rng, d);
            if e.l2_norm() < 0.3 || (0..c).any(|j| w.row_vector(j).l2_norm() < 0.3) {
                continue;
            }
            let y = rng.random_range(0..c);
            let out = margin_loss(&e, y, &w, &cfg).unwrap();
            let e_hat = e.l2_normalized().unwrap();
            let mut total = 0.0;
            for j in 0..c {
                let row_norm = w.row_vector(j).l2_norm();
                let cos_j = dot_slices(w.row(j), e_hat.as_slice()) / row_norm;
                // g_j = grad_rows[j] . e_hat * ||W_j|| / (1 - cos^2); p_j = g_j + [j == y]
                let g_j = out.grad_rows[&j].dot(&e_hat).unwrap() * row_norm / (1.0 - cos_j * cos_j);
                total += g_j + if j == y { 1.0 } else { 0.0 };
            }
            assert!((total - 1.0).abs() < 1e-10, "probabilities sum to {total}");
        }
    }

    #[test]
    fn arcface_is_finite_at_cosine_extremes() {
        let w = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = MarginConfig::arcface(0.5, 64.0).unwrap();
        // cos(theta_y) = 1 exactly
        let aligned = margin_loss(&v(&[3.0, 0.0]), 0, &w, &cfg).unwrap();
        assert!(aligned.loss.is_finite());
        assert!(aligned.grad_embedding.as_slice().iter().all(|g| g.is_finite()));
        // cos(theta_y) = -1 exactly, beyond the angular range
        let opposite = margin_loss(&v(&[-3.0, 0.0]), 0, &w, &cfg).unwrap();
        assert!(opposite.loss.is_finite());
        assert!(opposite.grad_embedding.as_slice().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn margin_config_validation() {
        assert!(MarginConfig::new(MarginKind::Plain, 0.1, 1.0).is_err());
        assert!(MarginConfig::arcface(PI / 2.0, 1.0).is_err());
        assert!(MarginConfig::arcface(-0.1, 1.0).is_err());
        assert!(MarginConfig::cosface(1.0, 1.0).is_err());
        assert!(MarginConfig::plain(0.0).is_err());
        assert!(MarginConfig::plain(-3.0).is_err());
        assert!(MarginConfig::arcface(0.5, 64.0).is_ok());
    }

    #[test]
    fn margin_loss_rejects_bad_identity() {
        let w = Matrix::identity(3);
        let err = margin_loss(&v(&[1.0, 0.0, 0.0]), 3, &w, &MarginConfig::plain(1.0).unwrap())
            .unwrap_err();
        assert_eq!(err, LossError::InvalidIdentity { y: 3, classes: 3 });
    }

    #[test]
    fn batch_of_one_equals_margin_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let cfg = MarginConfig::arcface(0.3, 4.0).unwrap();
        let w = random_matrix(&mut rng, 4, 3);
        let e = random_vector(&mut rng, 3);
        let single = margin_loss(&e, 2, &w, &cfg).unwrap();
        let batch = batch_loss(&[(e.clone(), 2)], &w, &cfg).unwrap();
        assert_eq!(batch.loss, single.loss);
        assert_eq!(batch.grad_embeddings[0], single.grad_embedding);
        for j in 0..4 {
            assert_eq!(batch.grad_classifier.row(j), single.grad_rows[&j].as_slice());
        }
    }

    #[test]
    fn duplicated_sample_keeps_mean_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let cfg = MarginConfig::plain(2.0).unwrap();
        let w = random_matrix(&mut rng, 3, 4);
        let e = random_vector(&mut rng, 4);
        let once = batch_loss(&[(e.clone(), 1)], &w, &cfg).unwrap();
        let twice = batch_loss(&[(e.clone(), 1), (e.clone(), 1)], &w, &cfg).unwrap();
        assert!((once.loss - twice.loss).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let cfg = MarginConfig::cosface(0.1, 4.0).unwrap();
        let w = random_matrix(&mut rng, 5, 4);
        let batch: Vec<(Vector, usize)> = (0..3)
            .map(|_| (random_vector(&mut rng, 4), rng.random_range(0..5)))
            .collect();
        let expect: f64 = batch
            .iter()
            .map(|(e, y)| margin_loss(e, *y, &w, &cfg).unwrap().loss)
            .sum::<f64>()
            / 3.0;
        let got = batch_loss(&batch, &w, &cfg).unwrap().loss;
        assert!((expect - got).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_rejects_empty_batch() {
        let w = Matrix::identity(2);
        assert_eq!(
            batch_loss(&[], &w, &MarginConfig::plain(1.0).unwrap()).unwrap_err(),
            LossError::EmptyBatch
        );
    }
}
