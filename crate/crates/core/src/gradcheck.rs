//! Central finite-difference verification of every analytic gradient.
//!
//! Each check builds a random well-conditioned instance, perturbs one
//! parameter at a time by `±step`, and compares the resulting central
//! difference against the analytic gradient. Errors are reported as
//! `|fd - analytic| / max(|fd|, |analytic|, floor)` over whole gradient
//! vectors, which keeps near-zero entries from amplifying f64 noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::MlpEncoder;
use crate::linalg::{Matrix, Vector};
use crate::losses::{margin_loss, MarginConfig, MarginKind};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Number of random instances per check family.
    pub trials: u64,
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { trials: 100, step: 1e-6, tolerance: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub margin_checks: usize,
    pub composition_checks: usize,
    pub max_rel_error_margin: f64,
    pub max_rel_error_composition: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_error_margin.max(self.max_rel_error_composition)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// Norm-based relative error between two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random_margin_config(rng: &mut ChaCha8Rng) -> MarginConfig {
    let scale = [1.0, 8.0, 64.0][rng.random_range(0..3)];
    match rng.random_range(0..3) {
        0 => MarginConfig::plain(scale).unwrap(),
        1 => MarginConfig::arcface(rng.random_range(0.1..0.7), scale).unwrap(),
        _ => MarginConfig::cosface(rng.random_range(0.05..0.5), scale).unwrap(),
    }
}

fn margin_config_of_kind(kind: MarginKind, rng: &mut ChaCha8Rng) -> MarginConfig {
    let scale = [1.0, 8.0, 64.0][rng.random_range(0..3)];
    match kind {
        MarginKind::Plain => MarginConfig::plain(scale).unwrap(),
        MarginKind::ArcFace => MarginConfig::arcface(rng.random_range(0.1..0.7), scale).unwrap(),
        MarginKind::CosFace => MarginConfig::cosface(rng.random_range(0.05..0.5), scale).unwrap(),
    }
}

fn well_conditioned_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let x = Vector::raw((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        if x.l2_norm() > 0.3 {
            return x;
        }
    }
}

fn well_conditioned_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        data.extend(well_conditioned_vector(rng, cols).into_vec());
    }
    Matrix::raw(rows, cols, data)
}

/// True when central differences can resolve the instance: the softmax is
/// not saturated (a saturated loss is below f64 difference resolution) and,
/// for ArcFace, the target cosine stays clear of the fallback-branch
/// boundary where the transform is discontinuous.
fn fd_measurable(cfg: &MarginConfig, w: &Matrix, e: &Vector, y: usize, loss: f64) -> bool {
    if loss < 1e-3 {
        return false;
    }
    if cfg.kind == MarginKind::ArcFace {
        let cos_y = e.l2_normalized().unwrap().dot(&w.row_vector(y).l2_normalized().unwrap());
        if (cos_y.unwrap() + cfg.margin.cos()).abs() < 1e-3 {
            return false;
        }
    }
    true
}

/// Checks one margin-loss instance of the given kind; returns the worst
/// relative error over the embedding gradient and the full row gradient.
pub fn check_margin_loss(kind: MarginKind, seed: u64, step: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = margin_config_of_kind(kind, &mut rng);
    let (classes, dim, w, e, y, out) = loop {
        let classes = rng.random_range(3..8);
        let dim = rng.random_range(3..8);
        let w = well_conditioned_matrix(&mut rng, classes, dim);
        let e = well_conditioned_vector(&mut rng, dim);
        let y = rng.random_range(0..classes);
        let out = margin_loss(&e, y, &w, &cfg).expect("well-conditioned instance");
        if fd_measurable(&cfg, &w, &e, y, out.loss) {
            break (classes, dim, w, e, y, out);
        }
    };

    let mut fd_e = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut plus = e.clone();
        plus.as_mut_slice()[i] += step;
        let mut minus = e.clone();
        minus.as_mut_slice()[i] -= step;
        let fp = margin_loss(&plus, y, &w, &cfg).expect("perturbed e").loss;
        let fm = margin_loss(&minus, y, &w, &cfg).expect("perturbed e").loss;
        fd_e.push((fp - fm) / (2.0 * step));
    }
    let err_e = relative_error(out.grad_embedding.as_slice(), &fd_e);

    let mut fd_w = Vec::with_capacity(classes * dim);
    for idx in 0..classes * dim {
        let mut plus = w.clone();
        plus.as_mut_slice()[idx] += step;
        let mut minus = w.clone();
        minus.as_mut_slice()[idx] -= step;
        let fp = margin_loss(&e, y, &plus, &cfg).expect("perturbed W").loss;
        let fm = margin_loss(&e, y, &minus, &cfg).expect("perturbed W").loss;
        fd_w.push((fp - fm) / (2.0 * step));
    }
    let mut an_w = vec![0.0; classes * dim];
    for (j, g) in &out.grad_rows {
        an_w[j * dim..(j + 1) * dim].copy_from_slice(g.as_slice());
    }
    let err_w = relative_error(&an_w, &fd_w);

    err_e.max(err_w)
}

/// Checks the full encoder-plus-loss composition: the finite difference of
/// `margin_loss(f(x; theta))` over every encoder parameter against the
/// backpropagated analytic gradient.
pub fn check_encoder_composition(seed: u64, step: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let cfg = random_margin_config(&mut rng);
    let input_dim = rng.random_range(3..6);
    let hidden = rng.random_range(3..7);
    let embed_dim = rng.random_range(3..6);
    let classes = rng.random_range(3..7);

    let mut enc = MlpEncoder::init(&[input_dim, hidden, embed_dim], seed).unwrap();
    let w = well_conditioned_matrix(&mut rng, classes, embed_dim);
    let (x, y, trace, out) = loop {
        let x = well_conditioned_vector(&mut rng, input_dim);
        let y = rng.random_range(0..classes);
        let (e, trace) = enc.forward(&x).expect("forward");
        if e.l2_norm() < 0.05 {
            continue;
        }
        let out = margin_loss(&e, y, &w, &cfg).expect("loss");
        if fd_measurable(&cfg, &w, &e, y, out.loss) {
            break (x, y, trace, out);
        }
    };
    let grads = enc.backward(&trace, &out.grad_embedding).expect("backward");
    let analytic: Vec<f64> = grads.flat_slices().concat();

    let mut fd = Vec::with_capacity(analytic.len());
    let num_layers = enc.layers().len();
    for li in 0..num_layers {
        let wlen = enc.layers()[li].weight.as_slice().len();
        let blen = enc.layers()[li].bias.dim();
        for pi in 0..wlen + blen {
            let read = |enc: &MlpEncoder| {
                if pi < wlen {
                    enc.layers()[li].weight.as_slice()[pi]
                } else {
                    enc.layers()[li].bias.as_slice()[pi - wlen]
                }
            };
            let write = |enc: &mut MlpEncoder, v: f64| {
                if pi < wlen {
                    enc.layers_mut()[li].weight.as_mut_slice()[pi] = v;
                } else {
                    enc.layers_mut()[li].bias.as_mut_slice()[pi - wlen] = v;
                }
            };
            let orig = read(&enc);
            write(&mut enc, orig + step);
            let fp = margin_loss(&enc.embed(&x).unwrap(), y, &w, &cfg).unwrap().loss;
            write(&mut enc, orig - step);
            let fm = margin_loss(&enc.embed(&x).unwrap(), y, &w, &cfg).unwrap().loss;
            write(&mut enc, orig);
            fd.push((fp - fm) / (2.0 * step));
        }
    }
    relative_error(&analytic, &fd)
}

/// Runs the whole suite: every margin kind and the encoder composition,
/// `trials` random instances each.
pub fn run_full_suite(cfg: &GradCheckConfig) -> GradCheckReport {
    let mut max_margin: f64 = 0.0;
    let mut margin_checks = 0;
    for kind in [MarginKind::Plain, MarginKind::ArcFace, MarginKind::CosFace] {
        for seed in 0..cfg.trials {
            max_margin = max_margin.max(check_margin_loss(kind, seed, cfg.step));
            margin_checks += 1;
        }
    }
    let mut max_comp: f64 = 0.0;
    let mut composition_checks = 0;
    for seed in 0..cfg.trials {
        max_comp = max_comp.max(check_encoder_composition(seed, cfg.step));
        composition_checks += 1;
    }
    GradCheckReport {
        margin_checks,
        composition_checks,
        max_rel_error_margin: max_margin,
        max_rel_error_composition: max_comp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_tolerance() {
        let cfg = GradCheckConfig { trials: 20, ..Default::default() };
        let report = run_full_suite(&cfg);
        assert!(report.passed(cfg.tolerance), "max rel error {}", report.max_rel_error());
        assert_eq!(report.margin_checks, 60);
        assert_eq!(report.composition_checks, 20);
    }

    #[test]
    fn suite_is_deterministic() {
        let cfg = GradCheckConfig { trials: 5, ..Default::default() };
        let a = run_full_suite(&cfg);
        let b = run_full_suite(&cfg);
        assert_eq!(a.max_rel_error(), b.max_rel_error());
    }

    #[test]
    fn relative_error_detects_mismatch() {
        assert!(relative_error(&[1.0, 0.0], &[1.0, 0.1]) > 0.05);
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
    }
}
