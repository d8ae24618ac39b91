//! Synthetic many-class datasets and file ingestion.
//!
//! The file format is a plain-text header `bfds,<count>,<dim>,<classes>`
//! followed by one CSV row per sample: `label,f1,...,fdim` (UTF-8, LF).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Vector;

#[derive(Debug)]
pub enum DataError {
    /// Counts or dimensions in a [`SyntheticSpec`] are unusable.
    InvalidSpec(String),
    /// Malformed file content; `line` is 1-based.
    Parse { line: usize, message: String },
    /// A row labels a class at or beyond the declared class count.
    LabelOutOfRange { line: usize, label: usize, classes: usize },
    /// A declared class has no samples.
    UnreferencedClass(usize),
    /// Pair sampling cannot satisfy the requested counts.
    InfeasiblePairs(String),
    Io(io::Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::InvalidSpec(msg) => write!(f, "invalid dataset spec: {msg}"),
            DataError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            DataError::LabelOutOfRange { line, label, classes } => {
                write!(f, "line {line}: label {label} out of range for {classes} classes")
            }
            DataError::UnreferencedClass(c) => write!(f, "class {c} has no samples"),
            DataError::InfeasiblePairs(msg) => write!(f, "infeasible pair request: {msg}"),
            DataError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labeled feature vectors for a fixed number of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<(Vector, usize)>,
    num_classes: usize,
    feature_dim: usize,
}

impl LabeledDataset {
    /// Validates labels, dimensions and that every class is referenced.
    pub fn new(samples: Vec<(Vector, usize)>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(DataError::InvalidSpec("dataset has no samples".into()));
        }
        if num_classes == 0 {
            return Err(DataError::InvalidSpec("dataset needs at least one class".into()));
        }
        let feature_dim = samples[0].0.dim();
        let mut seen = vec![false; num_classes];
        for (line, (x, y)) in samples.iter().enumerate() {
            if x.dim() != feature_dim {
                return Err(DataError::Parse {
                    line: line + 1,
                    message: format!("feature dim {} differs from {feature_dim}", x.dim()),
                });
            }
            if *y >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    line: line + 1,
                    label: *y,
                    classes: num_classes,
                });
            }
            seen[*y] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(DataError::UnreferencedClass(c));
        }
        Ok(Self { samples, num_classes, feature_dim })
    }

    pub fn samples(&self) -> &[(Vector, usize)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Splits off the last `per_class` occurrences of every class into a
    /// held-out set, preserving order within each part.
    pub fn split_per_class(&self, per_class: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut counts = vec![0usize; self.num_classes];
        for (_, y) in &self.samples {
            counts[*y] += 1;
        }
        if counts.iter().any(|&c| c <= per_class) {
            return Err(DataError::InvalidSpec(format!(
                "cannot hold out {per_class} samples per class: smallest class has {}",
                counts.iter().min().unwrap()
            )));
        }
        let mut seen = vec![0usize; self.num_classes];
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (x, y) in &self.samples {
            seen[*y] += 1;
            if seen[*y] > counts[*y] - per_class {
                test.push((x.clone(), *y));
            } else {
                train.push((x.clone(), *y));
            }
        }
        Ok((
            LabeledDataset::new(train, self.num_classes)?,
            LabeledDataset::new(test, self.num_classes)?,
        ))
    }
}

/// Parameters of the synthetic Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation around the class center.
    pub intra_class_noise: f64,
    /// Radius of the sphere the class centers are drawn on.
    pub inter_class_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Desk-scale default: 512 classes, 32 samples each, 32 features.
    fn default() -> Self {
        Self {
            num_classes: 512,
            samples_per_class: 32,
            feature_dim: 32,
            intra_class_noise: 0.1,
            inter_class_separation: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.feature_dim == 0 {
            return Err(DataError::InvalidSpec(format!(
                "counts must be positive: classes {}, per-class {}, dim {}",
                self.num_classes, self.samples_per_class, self.feature_dim
            )));
        }
        if !(self.intra_class_noise >= 0.0) || !self.intra_class_noise.is_finite() {
            return Err(DataError::InvalidSpec(format!(
                "noise {} must be nonnegative",
                self.intra_class_noise
            )));
        }
        if !(self.inter_class_separation > 0.0) || !self.inter_class_separation.is_finite() {
            return Err(DataError::InvalidSpec(format!(
                "separation {} must be positive",
                self.inter_class_separation
            )));
        }
        Ok(())
    }
}

/// Draws class centers on a sphere of radius `inter_class_separation` and
/// samples each class as center plus isotropic Gaussian noise. Samples are
/// ordered class-major and the whole construction is seeded.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;
    let d = spec.feature_dim;

    let mut centers = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        loop {
            let raw: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let norm: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                let scale = spec.inter_class_separation / norm;
                centers.push(raw.iter().map(|x| x * scale).collect::<Vec<f64>>());
                break;
            }
        }
    }

    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (y, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let point: Vec<f64> = center
                .iter()
                .map(|c| {
                    let n: f64 = normal.sample(&mut rng);
                    c + spec.intra_class_noise * n
                })
                .collect();
            samples.push((Vector::raw(point), y));
        }
    }
    LabeledDataset::new(samples, spec.num_classes)
}

/// Writes the `bfds` text format; floats use the shortest round-trip form.
pub fn save_dataset<P: AsRef<Path>>(ds: &LabeledDataset, path: P) -> Result<()> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "bfds,{},{},{}", ds.len(), ds.feature_dim(), ds.num_classes())?;
    for (x, y) in ds.samples() {
        write!(w, "{y}")?;
        for v in x.as_slice() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the `bfds` format, validating counts, labels and finiteness.
pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<LabeledDataset> {
    let f = fs::File::open(path)?;
    let reader = io::BufReader::new(f);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or(DataError::Parse { line: 1, message: "empty file".into() })?;
    let header = header?;
    let parts: Vec<&str> = header.trim_end().split(',').collect();
    if parts.len() != 4 || parts[0] != "bfds" {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected header 'bfds,<count>,<dim>,<classes>', got '{header}'"),
        });
    }
    let count: usize = parts[1]
        .parse()
        .map_err(|_| DataError::Parse { line: 1, message: format!("bad count '{}'", parts[1]) })?;
    let dim: usize = parts[2]
        .parse()
        .map_err(|_| DataError::Parse { line: 1, message: format!("bad dim '{}'", parts[2]) })?;
    let classes: usize = parts[3]
        .parse()
        .map_err(|_| DataError::Parse { line: 1, message: format!("bad classes '{}'", parts[3]) })?;
    if count == 0 {
        return Err(DataError::Parse { line: 1, message: "dataset declares zero samples".into() });
    }

    let mut samples = Vec::with_capacity(count);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split(',');
        let label_str = fields.next().unwrap();
        let label: usize = label_str.parse().map_err(|_| DataError::Parse {
            line: line_no,
            message: format!("bad label '{label_str}'"),
        })?;
        if label >= classes {
            return Err(DataError::LabelOutOfRange { line: line_no, label, classes });
        }
        let mut feats = Vec::with_capacity(dim);
        for (col, field) in fields.enumerate() {
            let v: f64 = field.parse().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("bad feature '{field}' at column {}", col + 2),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("non-finite feature at column {}", col + 2),
                });
            }
            feats.push(v);
        }
        if feats.len() != dim {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected {dim} features, got {}", feats.len()),
            });
        }
        samples.push((Vector::raw(feats), label));
    }
    if samples.len() != count {
        return Err(DataError::Parse {
            line: samples.len() + 1,
            message: format!("header declares {count} samples, file holds {}", samples.len()),
        });
    }
    LabeledDataset::new(samples, classes)
}

/// One verification pair: indices into the dataset plus the genuine flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
    pub genuine: bool,
}

/// Samples `num_genuine` same-class and `num_impostor` cross-class index
/// pairs without duplicates, deterministically from `seed`.
pub fn split_pairs(
    ds: &LabeledDataset,
    num_genuine: usize,
    num_impostor: usize,
    seed: u64,
) -> Result<Vec<Pair>> {
    let n = ds.len();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, (_, y)) in ds.samples().iter().enumerate() {
        per_class[*y].push(i);
    }

    let genuine_total: usize = per_class.iter().map(|c| c.len() * (c.len() - 1) / 2).sum();
    let impostor_total = n * (n - 1) / 2 - genuine_total;
    if num_genuine > genuine_total {
        return Err(DataError::InfeasiblePairs(format!(
            "{num_genuine} genuine pairs requested, only {genuine_total} exist"
        )));
    }
    if num_impostor > impostor_total {
        return Err(DataError::InfeasiblePairs(format!(
            "{num_impostor} impostor pairs requested, only {impostor_total} exist"
        )));
    }
    if num_impostor > 0 && ds.num_classes() < 2 {
        return Err(DataError::InfeasiblePairs(
            "impostor pairs need at least two classes".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(num_genuine + num_impostor);

    let eligible: Vec<usize> =
        (0..ds.num_classes()).filter(|&c| per_class[c].len() >= 2).collect();
    sample_pairs(
        num_genuine,
        genuine_total,
        true,
        &mut rng,
        &mut seen,
        &mut pairs,
        |rng| {
            let c = eligible[rng.random_range(0..eligible.len())];
            let members = &per_class[c];
            let a = members[rng.random_range(0..members.len())];
            let b = members[rng.random_range(0..members.len())];
            (a, b)
        },
        |i, j| ds.samples()[i].1 == ds.samples()[j].1,
        ds,
    )?;
    sample_pairs(
        num_impostor,
        impostor_total,
        false,
        &mut rng,
        &mut seen,
        &mut pairs,
        |rng| (rng.random_range(0..n), rng.random_range(0..n)),
        |i, j| ds.samples()[i].1 != ds.samples()[j].1,
        ds,
    )?;
    Ok(pairs)
}

#[allow(clippy::too_many_arguments)]
fn sample_pairs(
    wanted: usize,
    available: usize,
    genuine: bool,
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<(usize, usize)>,
    pairs: &mut Vec<Pair>,
    mut propose: impl FnMut(&mut ChaCha8Rng) -> (usize, usize),
    accept: impl Fn(usize, usize) -> bool,
    ds: &LabeledDataset,
) -> Result<()> {
    if wanted == 0 {
        return Ok(());
    }
    // When most of the population is requested, rejection sampling stalls;
    // enumerate and shuffle instead.
    if wanted * 2 >= available {
        let mut all = Vec::with_capacity(available);
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                if accept(i, j) && !seen.contains(&(i, j)) {
                    all.push((i, j));
                }
            }
        }
        all.shuffle(rng);
        for &(i, j) in all.iter().take(wanted) {
            seen.insert((i, j));
            pairs.push(Pair { first: i, second: j, genuine });
        }
        if all.len() < wanted {
            return Err(DataError::InfeasiblePairs(format!(
                "only {} distinct pairs available, {wanted} requested",
                all.len()
            )));
        }
        return Ok(());
    }
    let mut taken = 0;
    let mut attempts = 0u64;
    let cap = 10_000 * (wanted as u64 + 1);
    while taken < wanted {
        attempts += 1;
        if attempts > cap {
            return Err(DataError::InfeasiblePairs(format!(
                "gave up after {attempts} attempts with {taken}/{wanted} pairs"
            )));
        }
        let (a, b) = propose(rng);
        if a == b || !accept(a, b) {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            pairs.push(Pair { first: key.0, second: key.1, genuine });
            taken += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 6,
            feature_dim: 5,
            intra_class_noise: 0.05,
            inter_class_separation: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn zero_noise_clones_class_center() {
        let spec = SyntheticSpec { intra_class_noise: 0.0, ..small_spec() };
        let ds = generate_synthetic(&spec).unwrap();
        for class in 0..spec.num_classes {
            let members: Vec<_> =
                ds.samples().iter().filter(|(_, y)| *y == class).collect();
            for m in &members[1..] {
                assert_eq!(m.0, members[0].0);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 4, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    // Perceptron convergence proves linear separability of a wide-margin
    // two-class instance.
    #[test]
    fn two_well_separated_classes_are_linearly_separable() {
        let spec = SyntheticSpec {
            num_classes: 2,
            samples_per_class: 20,
            feature_dim: 4,
            intra_class_noise: 0.01,
            inter_class_separation: 10.0,
            seed: 9,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mut w = vec![0.0; spec.feature_dim + 1];
        let mut converged = false;
        for _ in 0..200 {
            let mut mistakes = 0;
            for (x, y) in ds.samples() {
                let target = if *y == 0 { 1.0 } else { -1.0 };
                let mut act = w[spec.feature_dim];
                for (wi, xi) in w[..spec.feature_dim].iter().zip(x.as_slice()) {
                    act += wi * xi;
                }
                if act * target <= 0.0 {
                    mistakes += 1;
                    for (wi, xi) in w[..spec.feature_dim].iter_mut().zip(x.as_slice()) {
                        *wi += target * xi;
                    }
                    w[spec.feature_dim] += target;
                }
            }
            if mistakes == 0 {
                converged = true;
                break;
            }
        }
        assert!(converged, "perceptron did not converge: data not separable");
    }

    // Nearest-center classification succeeds when separation dwarfs noise,
    // establishing that the default task family is learnable.
    #[test]
    fn nearest_center_oracle_is_accurate_when_separated() {
        let spec = SyntheticSpec {
            num_classes: 16,
            samples_per_class: 16,
            feature_dim: 8,
            intra_class_noise: 0.02,
            inter_class_separation: 4.0,
            seed: 12,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let mut centers = vec![vec![0.0; spec.feature_dim]; spec.num_classes];
        let mut counts = vec![0usize; spec.num_classes];
        for (x, y) in ds.samples() {
            counts[*y] += 1;
            for (c, v) in centers[*y].iter_mut().zip(x.as_slice()) {
                *c += v;
            }
        }
        for (c, n) in centers.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut correct = 0;
        for (x, y) in ds.samples() {
            let best = (0..spec.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = centers[a]
                        .iter()
                        .zip(x.as_slice())
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    let db: f64 = centers[b]
                        .iter()
                        .zip(x.as_slice())
                        .map(|(c, v)| (c - v) * (c - v))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == *y {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "nearest-center accuracy {acc}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_synthetic(&SyntheticSpec { num_classes: 0, ..small_spec() }).is_err());
        assert!(
            generate_synthetic(&SyntheticSpec { intra_class_noise: -1.0, ..small_spec() }).is_err()
        );
        assert!(generate_synthetic(&SyntheticSpec {
            inter_class_separation: 0.0,
            ..small_spec()
        })
        .is_err());
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.bfds");
        let ds = generate_synthetic(&small_spec()).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn loader_reports_label_out_of_range_with_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bfds");
        fs::write(&path, "bfds,2,2,2\n0,1.0,2.0\n5,3.0,4.0\n").unwrap();
        match load_dataset(&path).unwrap_err() {
            DataError::LabelOutOfRange { line, label, classes } => {
                assert_eq!((line, label, classes), (3, 5, 2));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn loader_rejects_empty_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bfds");
        fs::write(&path, "").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Parse { line: 1, .. })));
    }

    #[test]
    fn loader_rejects_non_finite_features() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.bfds");
        fs::write(&path, "bfds,1,2,1\n0,NaN,1.0\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Parse { line: 2, .. })));
        fs::write(&path, "bfds,1,2,1\n0,inf,1.0\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn loader_rejects_count_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.bfds");
        fs::write(&path, "bfds,3,2,1\n0,1.0,2.0\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Parse { .. })));
    }

    #[test]
    fn loader_rejects_unreferenced_class() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gap.bfds");
        fs::write(&path, "bfds,2,2,3\n0,1.0,2.0\n2,3.0,4.0\n").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::UnreferencedClass(1))));
    }

    #[test]
    fn pairs_single_class_impostor_is_infeasible() {
        let spec = SyntheticSpec { num_classes: 1, ..small_spec() };
        let ds = generate_synthetic(&spec).unwrap();
        assert!(matches!(split_pairs(&ds, 2, 2, 0), Err(DataError::InfeasiblePairs(_))));
    }

    #[test]
    fn pairs_zero_genuine_gives_only_impostors() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let pairs = split_pairs(&ds, 0, 10, 1).unwrap();
        assert_eq!(pairs.len(), 10);
        assert!(pairs.iter().all(|p| !p.genuine));
    }

    #[test]
    fn pairs_are_seed_deterministic_and_distinct() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let a = split_pairs(&ds, 12, 12, 7).unwrap();
        let b = split_pairs(&ds, 12, 12, 7).unwrap();
        assert_eq!(a, b);
        let mut seen = HashSet::new();
        for p in &a {
            assert!(seen.insert((p.first, p.second)), "duplicate pair {p:?}");
            let same = ds.samples()[p.first].1 == ds.samples()[p.second].1;
            assert_eq!(same, p.genuine);
        }
    }

    #[test]
    fn pairs_can_exhaust_population() {
        let spec = SyntheticSpec {
            num_classes: 2,
            samples_per_class: 3,
            ..small_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        // 6 samples: 6 genuine pairs, 9 impostor pairs
        let pairs = split_pairs(&ds, 6, 9, 5).unwrap();
        assert_eq!(pairs.len(), 15);
        assert!(matches!(split_pairs(&ds, 7, 0, 5), Err(DataError::InfeasiblePairs(_))));
    }
}
