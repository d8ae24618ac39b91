//! Subcommand implementations and output-file writing.
//!
//! Every CSV starts with a comment line carrying the config hash and seed.
//! `metrics.csv` holds only deterministic rows; wall-clock samples go to
//! `timings.csv` so reruns stay byte-identical.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bfe_core::data::{save_dataset, split_pairs, LabeledDataset};
use bfe_core::encoder::MlpEncoder;
use bfe_core::eval::{rank1_identification, recall_at_k, verification_report};
use bfe_core::gradcheck::{run_full_suite, GradCheckConfig};
use bfe_core::linalg::cosine_similarity;
use bfe_core::trainer::{embed_set, run_training, MetricsRow, TrainOutcome, TrainerError};

use crate::config::{ConfigError, ExperimentConfig, SweepCompensation};

/// Exit code 2: the configuration or an input file is unusable.
/// Exit code 3: a runtime or numeric failure during an otherwise valid run.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::InvalidConfig(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_runtime(e: std::io::Error) -> CliError {
    CliError::Runtime(format!("io error: {e}"))
}

fn load_dataset_for(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    cfg.load_or_generate_dataset().map_err(|e| CliError::Config(e.to_string()))
}

fn ensure_outdir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set out=".into()))?;
    fs::create_dir_all(&out).map_err(io_runtime)?;
    Ok(out)
}

fn write_echo(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.echo"), cfg.canonical_echo()).map_err(io_runtime)
}

fn write_rows_csv(path: &Path, cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_runtime)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "# config_hash={} seed={}", cfg.hash(), cfg.seed).map_err(io_runtime)?;
    writeln!(w, "metric,step,value,extra").map_err(io_runtime)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.metric, r.step, r.value, r.extra).map_err(io_runtime)?;
    }
    w.flush().map_err(io_runtime)
}

fn run_mode_row(cfg: &ExperimentConfig) -> MetricsRow {
    MetricsRow {
        metric: "run_mode".into(),
        step: 0,
        value: 0.0,
        extra: if cfg.queue_capacity == 0 { "baseline".into() } else { "broadface".into() },
    }
}

fn train_once(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<TrainOutcome> {
    let settings = cfg.to_train_settings(ds);
    Ok(run_training(ds, &settings)?)
}

fn write_train_outputs(cfg: &ExperimentConfig, dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    write_echo(cfg, dir)?;
    let mut rows = vec![run_mode_row(cfg)];
    rows.extend(outcome.metrics.iter().cloned());
    write_rows_csv(&dir.join("metrics.csv"), cfg, &rows)?;

    let timing_rows: Vec<MetricsRow> = outcome
        .timings_ms
        .iter()
        .map(|&(it, ms)| MetricsRow {
            metric: "iter_time_ms".into(),
            step: it,
            value: ms,
            extra: String::new(),
        })
        .collect();
    write_rows_csv(&dir.join("timings.csv"), cfg, &timing_rows)?;

    outcome
        .encoder
        .save(dir.join("checkpoint.bfe"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

/// `bfe train`: warm-up plus queued training, metrics and a checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let out = ensure_outdir(cfg)?;
    let ds = load_dataset_for(cfg)?;
    let outcome = train_once(cfg, &ds)?;
    write_train_outputs(cfg, &out, &outcome)?;
    println!(
        "train: {} iterations ({} warm-up), queue capacity {}",
        outcome.iterations_run, outcome.warmup_iterations, cfg.queue_capacity
    );
    for &(k, r) in &outcome.final_recall {
        println!("train: final recall@{k} = {r}");
    }
    println!("train: outputs in {}", out.display());
    Ok(())
}

/// `bfe gen-data`: write the synthetic dataset described by the config.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let out = ensure_outdir(cfg)?;
    if cfg.data_path.is_some() {
        return Err(CliError::Config(
            "gen-data generates synthetic data; remove data_path".into(),
        ));
    }
    let ds = load_dataset_for(cfg)?;
    write_echo(cfg, &out)?;
    let path = out.join("dataset.bfds");
    save_dataset(&ds, &path).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "gen-data: {} samples, {} classes, dim {} -> {}",
        ds.len(),
        ds.num_classes(),
        ds.feature_dim(),
        path.display()
    );
    Ok(())
}

/// `bfe eval`: verification, identification and retrieval reports for a
/// saved checkpoint on the configured dataset's held-out split.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let out = ensure_outdir(cfg)?;
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("eval needs checkpoint=<path>".into()))?;
    if !checkpoint.exists() {
        return Err(CliError::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let encoder = MlpEncoder::load(&checkpoint).map_err(|e| CliError::Config(e.to_string()))?;
    let ds = load_dataset_for(cfg)?;
    if encoder.input_dim() != ds.feature_dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {}-dim inputs, dataset has {}",
            encoder.input_dim(),
            ds.feature_dim()
        )));
    }
    let (_, test) = ds
        .split_per_class(cfg.test_per_class)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let rows = evaluate_checkpoint(cfg, &encoder, &test)?;

    write_echo(cfg, &out)?;
    write_rows_csv(&out.join("report.csv"), cfg, &rows)?;
    for r in &rows {
        if r.extra.is_empty() {
            println!("eval: {} = {}", r.metric, r.value);
        } else {
            println!("eval: {} [{}] = {}", r.metric, r.extra, r.value);
        }
    }
    Ok(())
}

/// Shared evaluation body: exactly the protocols the training loop uses,
/// so evaluating a just-saved checkpoint reproduces its last eval rows.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    encoder: &MlpEncoder,
    test: &LabeledDataset,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let embedded = embed_set(encoder, test.samples())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    if cfg.eval_recall {
        let recalls = recall_at_k(&embedded, &cfg.recall_ks)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        for (&k, r) in cfg.recall_ks.iter().zip(recalls) {
            rows.push(MetricsRow {
                metric: "recall_at_k".into(),
                step: 0,
                value: r,
                extra: format!("k={k}"),
            });
        }
    }

    if cfg.eval_rank1 {
        // gallery: first test instance of each class; probes: the rest
        let mut seen = vec![false; test.num_classes()];
        let mut gallery = Vec::new();
        let mut probes = Vec::new();
        for (e, y) in &embedded {
            if seen[*y] {
                probes.push((e.clone(), *y));
            } else {
                seen[*y] = true;
                gallery.push((e.clone(), *y));
            }
        }
        let acc = rank1_identification(&probes, &gallery)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        rows.push(MetricsRow {
            metric: "rank1_identification".into(),
            step: 0,
            value: acc,
            extra: format!("gallery={};probes={}", gallery.len(), probes.len()),
        });
    }

    if cfg.eval_genuine_pairs > 0 && cfg.eval_impostor_pairs > 0 {
        let pairs = split_pairs(test, cfg.eval_genuine_pairs, cfg.eval_impostor_pairs, cfg.seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for p in &pairs {
            let score = cosine_similarity(&embedded[p.first].0, &embedded[p.second].0)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            if p.genuine {
                genuine.push(score);
            } else {
                impostor.push(score);
            }
        }
        let report = verification_report(&genuine, &impostor, &cfg.eval_far_targets)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        for i in 0..report.far_targets.len() {
            rows.push(MetricsRow {
                metric: "tar_at_far".into(),
                step: 0,
                value: report.tar_at_far[i],
                extra: format!("far={};threshold={}", report.far_targets[i], report.thresholds[i]),
            });
        }
    }
    Ok(rows)
}

/// `bfe sweep-queue`: one training run per queue capacity (and compensation
/// setting), with a combined summary CSV.
pub fn cmd_sweep_queue(cfg: &ExperimentConfig) -> Result<()> {
    let out = ensure_outdir(cfg)?;
    if cfg.sweep_capacities.is_empty() {
        return Err(CliError::Config("sweep_capacities is empty".into()));
    }
    let mut sorted = cfg.sweep_capacities.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Config("sweep_capacities contains duplicates".into()));
    }
    let ds = load_dataset_for(cfg)?;
    write_echo(cfg, &out)?;

    let mut summary = Vec::new();
    for &capacity in &cfg.sweep_capacities {
        let comp_settings: &[bool] = if capacity == 0 {
            &[true]
        } else {
            match cfg.sweep_compensation {
                SweepCompensation::On => &[true],
                SweepCompensation::Off => &[false],
                SweepCompensation::Both => &[true, false],
            }
        };
        for &compensation in comp_settings {
            let run_cfg = ExperimentConfig {
                queue_capacity: capacity,
                compensation,
                ..cfg.clone()
            };
            let label = if capacity == 0 {
                "baseline".to_string()
            } else if compensation {
                "on".to_string()
            } else {
                "off".to_string()
            };
            let outcome = train_once(&run_cfg, &ds)?;
            let subdir = out.join(format!("cap{capacity}_{label}"));
            fs::create_dir_all(&subdir).map_err(io_runtime)?;
            write_train_outputs(&run_cfg, &subdir, &outcome)?;
            let recall1 = outcome.final_recall.first().map(|&(_, r)| r).unwrap_or(f64::NAN);
            let last_enc = outcome
                .metrics
                .iter()
                .rev()
                .find(|r| r.metric == "encoder_loss")
                .map(|r| r.value)
                .unwrap_or(f64::NAN);
            let last_cls = outcome
                .metrics
                .iter()
                .rev()
                .find(|r| r.metric == "classifier_loss")
                .map(|r| r.value)
                .unwrap_or(f64::NAN);
            println!("sweep: capacity {capacity} compensation {label}: recall@1 {recall1}");
            summary.push((capacity, label, recall1, last_enc, last_cls));
        }
    }

    let f = fs::File::create(out.join("sweep.csv")).map_err(io_runtime)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "# config_hash={} seed={}", cfg.hash(), cfg.seed).map_err(io_runtime)?;
    writeln!(w, "capacity,compensation,final_recall_at_1,final_encoder_loss,final_classifier_loss")
        .map_err(io_runtime)?;
    for (capacity, label, recall1, enc, cls) in &summary {
        writeln!(w, "{capacity},{label},{recall1},{enc},{cls}").map_err(io_runtime)?;
    }
    w.flush().map_err(io_runtime)?;
    Ok(())
}

/// `bfe grad-check`: the finite-difference suite; fails (exit 3) above the
/// configured tolerance.
pub fn cmd_grad_check(cfg: &ExperimentConfig) -> Result<()> {
    let gc = GradCheckConfig {
        trials: cfg.gradcheck_trials,
        step: 1e-6,
        tolerance: cfg.gradcheck_tolerance,
    };
    let report = run_full_suite(&gc);
    println!(
        "grad-check: {} margin checks, max relative error {:e}",
        report.margin_checks, report.max_rel_error_margin
    );
    println!(
        "grad-check: {} composition checks, max relative error {:e}",
        report.composition_checks, report.max_rel_error_composition
    );
    println!("grad-check: max relative error {:e}", report.max_rel_error());
    if report.passed(gc.tolerance) {
        println!("grad-check: PASS (tolerance {:e})", gc.tolerance);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {:e} >= {:e}",
            report.max_rel_error(),
            gc.tolerance
        )))
    }
}
