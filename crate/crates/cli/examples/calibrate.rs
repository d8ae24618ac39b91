// Scratch harness for tuning the acceptance experiment hyperparameters.
// Run as: cargo run --release -p bfe-cli --example calibrate -- <mode> [args]

use std::time::Instant;

use bfe_core::broadface::BroadQueue;
use bfe_core::data::{generate_synthetic, SyntheticSpec};
use bfe_core::eval::measure_compensation_error;
use bfe_core::losses::MarginConfig;
use bfe_core::optim::LrSchedule;
use bfe_core::trainer::{run_training, TrainSettings, Warmup};

fn default_dataset(seed: u64) -> bfe_core::data::LabeledDataset {
    let noise: f64 = std::env::var("CAL_NOISE").ok().and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let sep: f64 = std::env::var("CAL_SEP").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    generate_synthetic(&SyntheticSpec {
        seed,
        intra_class_noise: noise,
        inter_class_separation: sep,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn cal_batch() -> usize {
    std::env::var("CAL_BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(64)
}

fn cal_warm() -> u64 {
    std::env::var("CAL_WARM").ok().and_then(|s| s.parse().ok()).unwrap_or(64)
}

// decayed step schedule over the run length, lr0 -> /10 -> /100
fn cal_sched(lr0: f64, epochs: usize) -> Vec<(u64, f64)> {
    let mode = std::env::var("CAL_DECAY").unwrap_or_default();
    let ipe = (14336 / cal_batch()) as u64;
    let total = ipe * epochs as u64;
    match mode.as_str() {
        "std" => vec![(total * 5 / 8, lr0), (total * 7 / 8, lr0 / 10.0), (total, lr0 / 100.0)],
        "early" => vec![(total * 3 / 8, lr0), (total * 5 / 8, lr0 / 10.0), (total, lr0 / 100.0)],
        _ => vec![(u64::MAX, lr0)],
    }
}

fn cal_layers() -> Vec<usize> {
    std::env::var("CAL_LAYERS")
        .map(|s| s.split(',').map(|p| p.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![32, 64, 16])
}

fn env_sched() -> Option<Vec<(u64, f64)>> {
    std::env::var("CAL_SCHED").ok().map(|v| {
        v.split(',')
            .map(|p| {
                let (t, r) = p.split_once(':').unwrap();
                let t = if t == "max" { u64::MAX } else { t.parse().unwrap() };
                (t, r.parse().unwrap())
            })
            .collect()
    })
}

fn settings(seed: u64, capacity: usize, comp: bool, epochs: usize, lr: &[(u64, f64)]) -> TrainSettings {
    let lr: Vec<(u64, f64)> = env_sched().unwrap_or_else(|| lr.to_vec());
    let lr = &lr[..];
    TrainSettings {
        encoder_layers: cal_layers(),
        margin: MarginConfig::arcface(0.5, 64.0).unwrap(),
        batch_size: cal_batch(),
        queue_capacity: capacity,
        compensation: comp,
        warmup: Warmup::Iterations(cal_warm()),
        epochs,
        momentum: std::env::var("CAL_MU").ok().and_then(|v| v.parse().ok()).unwrap_or(0.9),
        weight_decay: 5e-4,
        schedule: LrSchedule::new(lr.to_vec()).unwrap(),
        seed,
        test_per_class: 4,
        recall_ks: vec![1],
        metrics_every: 64,
        diagnostics: false,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(|s| s.as_str()).unwrap_or("smoke");
    match mode {
        "smoke" => {
            let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
            let lr0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
            let cap: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1024);
            let ds = default_dataset(0);
            let sched = [(u64::MAX, lr0)];
            for (label, capacity) in [("baseline", 0usize), ("broadface", cap)] {
                let t0 = Instant::now();
                let s = settings(1, capacity, true, epochs, &sched);
                match run_training(&ds, &s) {
                    Ok(out) => {
                        println!(
                            "{label} cap={capacity} lr={lr0}: recalls {:?} ({:.1}s)",
                            out.epoch_recall1
                                .iter()
                                .map(|r| (r * 1000.0).round() / 1000.0)
                                .collect::<Vec<_>>(),
                            t0.elapsed().as_secs_f64()
                        );
                        let losses: Vec<f64> = out
                            .metrics
                            .iter()
                            .filter(|r| r.metric == "encoder_loss")
                            .map(|r| (r.value * 100.0).round() / 100.0)
                            .collect();
                        println!("  encoder losses: {:?}", losses);
                    }
                    Err(e) => println!("{label} cap={capacity} lr={lr0}: FAILED {e}"),
                }
            }
        }
        "accel" => {
            // criterion 4 shape: baseline E epochs vs broadface with 16x batch
            let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
            let lr0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
            let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
            let sched = cal_sched(lr0, epochs);
            let cap: usize = std::env::var("CAL_CAP").ok().and_then(|s| s.parse().ok()).unwrap_or(16 * cal_batch());
            let mut wins = 0;
            for seed in 0..seeds {
                let ds = default_dataset(seed);
                let base = run_training(&ds, &settings(seed, 0, true, epochs, &sched)).unwrap();
                let bf = run_training(&ds, &settings(seed, cap, true, epochs, &sched)).unwrap();
                let best_b = base
                    .epoch_recall1
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let epoch_best_b = base
                    .epoch_recall1
                    .iter()
                    .position(|&r| r == best_b)
                    .unwrap()
                    + 1;
                let reach = bf.epoch_recall1.iter().position(|&r| r >= best_b).map(|p| p + 1);
                let ok = reach.map(|r| 2 * r <= epoch_best_b).unwrap_or(false);
                wins += ok as u32;
                println!(
                    "seed {seed}: baseline best {best_b:.3} at epoch {epoch_best_b}; bf reach at {:?} -> {}",
                    reach,
                    if ok { "OK" } else { "MISS" }
                );
                println!("  base: {:?}", trim(&base.epoch_recall1));
                println!("  bf:   {:?}", trim(&bf.epoch_recall1));
            }
            println!("wins: {wins}/{seeds}");
        }
        "sweep" => {
            // criterion 5 shape
            let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
            let lr0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
            let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
            let sched = cal_sched(lr0, epochs);
            let ds = default_dataset(seed);
            let b = cal_batch();
            let mut results = Vec::new();
            for cap in [0usize, 4 * b, 16 * b, 64 * b] {
                let t0 = Instant::now();
                let out = run_training(&ds, &settings(seed, cap, true, epochs, &sched)).unwrap();
                let r = *out.epoch_recall1.last().unwrap();
                println!("cap {cap} comp: recall {r:.4} ({:.1}s) {:?}", t0.elapsed().as_secs_f64(), trim(&out.epoch_recall1));
                results.push(r);
            }
            let out = run_training(&ds, &settings(seed, 64 * b, false, epochs, &sched)).unwrap();
            let r_nc = *out.epoch_recall1.last().unwrap();
            println!("cap {} nocomp: recall {r_nc:.4} {:?}", 64 * b, trim(&out.epoch_recall1));
            let monotone = results.windows(2).all(|w| w[1] >= w[0] - 0.005);
            println!("monotone within 0.5pp: {monotone}; nocomp underperforms: {}", r_nc < results[3]);
        }
        "comperr" => {
            // criterion 3 shape: train, then inspect error buckets by age
            let lr0: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
            let warm: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(224);
            let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
            let mut good = 0usize;
            let mut total = 0usize;
            for seed in 0..seeds {
                let ds = default_dataset(seed);
                let b = cal_batch();
                let cap = 64 * b;
                let mut s = settings(seed, cap, true, 2, &[(u64::MAX, lr0)]);
                s.warmup = Warmup::Iterations(warm);
                s.diagnostics = true;
                // run manually to keep the queue afterwards
                let (train, _) = ds.split_per_class(4).unwrap();
                let mut enc = bfe_core::encoder::MlpEncoder::init(&s.encoder_layers, seed).unwrap();
                let mut w = bfe_core::trainer::init_classifier(512, *cal_layers().last().unwrap(), seed.wrapping_add(1));
                let mut sampler = bfe_core::trainer::BatchSampler::new(train.len(), b, seed.wrapping_add(2));
                let mut queue = BroadQueue::new(cap, true).with_retained_inputs();
                let mut warm_queue = BroadQueue::new(0, true);
                let mut eo = bfe_core::optim::Sgd::new(s.momentum, 5e-4, s.schedule.clone()).unwrap();
                let mut co = bfe_core::optim::Sgd::new(s.momentum, 5e-4, s.schedule.clone()).unwrap();
                let total_iters = warm + 70;
                for it in 0..total_iters {
                    let batch: Vec<_> = sampler.next_batch().iter().map(|&i| train.samples()[i].clone()).collect();
                    let q = if it < warm { &mut warm_queue } else { &mut queue };
                    bfe_core::broadface::train_iteration(&mut enc, &mut w, q, &batch, &mut eo, &mut co, &s.margin, it).unwrap();
                }
                let records = measure_compensation_error(&enc, &w, &queue, total_iters - 1, cap, seed).unwrap();
                for r in &records {
                    if (16..=64).contains(&r.iterations_elapsed) {
                        total += 1;
                        if r.mean_error_compensated < r.mean_error_uncompensated {
                            good += 1;
                        }
                    }
                }
                let aged: Vec<_> = records.iter().filter(|r| (16..=64).contains(&r.iterations_elapsed)).collect();
                let young: f64 = records.iter().filter(|r| (16..=32).contains(&r.iterations_elapsed)).map(|r| r.mean_error_uncompensated).sum::<f64>();
                let old: f64 = records.iter().filter(|r| (48..=64).contains(&r.iterations_elapsed)).map(|r| r.mean_error_uncompensated).sum::<f64>();
                println!(
                    "seed {seed}: {} aged buckets, {} good, growth young {:.4} old {:.4}",
                    aged.len(),
                    aged.iter().filter(|r| r.mean_error_compensated < r.mean_error_uncompensated).count(),
                    young / 17.0,
                    old / 17.0,
                );
            }
            println!("overall: {good}/{total} = {:.1}%", 100.0 * good as f64 / total.max(1) as f64);
        }
        "diag" => {
            // correction-vs-true-drift alignment per age bucket
            let lr0: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5e-3);
            let warm: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
            let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
            let ds = default_dataset(seed);
            let b = cal_batch();
            let cap: usize = std::env::var("CAL_DIAGCAP")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(64 * b);
            let comp_on = std::env::var("CAL_COMP").map(|v| v != "0").unwrap_or(true);
            let s = settings(seed, cap, comp_on, 2, &[(u64::MAX, lr0)]);
            let (train, _) = ds.split_per_class(4).unwrap();
            let mut enc = bfe_core::encoder::MlpEncoder::init(&s.encoder_layers, seed).unwrap();
            let dim = *cal_layers().last().unwrap();
            let mut w = bfe_core::trainer::init_classifier(512, dim, seed.wrapping_add(1));
            let mut sampler = bfe_core::trainer::BatchSampler::new(train.len(), b, seed.wrapping_add(2));
            let mut queue = BroadQueue::new(cap, comp_on).with_retained_inputs();
            let mut warm_queue = BroadQueue::new(0, comp_on);
            let mut eo = bfe_core::optim::Sgd::new(s.momentum, 5e-4, s.schedule.clone()).unwrap();
            let mut co = bfe_core::optim::Sgd::new(s.momentum, 5e-4, s.schedule.clone()).unwrap();
            let queue_from: u64 = std::env::var("CAL_QFROM").ok().and_then(|v| v.parse().ok()).unwrap_or(warm);
            let total_iters = warm + 70;
            for it in 0..total_iters {
                let batch: Vec<_> = sampler.next_batch().iter().map(|&i| train.samples()[i].clone()).collect();
                let q = if it < queue_from { &mut warm_queue } else { &mut queue };
                bfe_core::broadface::train_iteration(&mut enc, &mut w, q, &batch, &mut eo, &mut co, &s.margin, it).unwrap();
            }
            let current = total_iters - 1;
            // bucket by age band
            let mut bands: std::collections::BTreeMap<u64, (f64, f64, f64, f64, f64, usize)> = Default::default();
            for entry in queue.entries() {
                let age = current - entry.iteration;
                let x = entry.raw_input.as_ref().unwrap();
                let e_now = enc.embed(x).unwrap();
                let drift = e_now.sub(&entry.embedding).unwrap();
                let corr = bfe_core::broadface::compensated_embedding(entry, &w)
                    .unwrap()
                    .sub(&entry.embedding)
                    .unwrap();
                let align = if drift.l2_norm() > 1e-12 && corr.l2_norm() > 1e-12 {
                    drift.dot(&corr).unwrap() / (drift.l2_norm() * corr.l2_norm())
                } else {
                    0.0
                };
                let lambda = entry.embedding.l2_norm() / entry.rep_snapshot.l2_norm();
                let slot = bands.entry(age / 16).or_insert((0.0, 0.0, 0.0, 0.0, 0.0, 0));
                slot.0 += drift.l2_norm();
                slot.1 += corr.l2_norm();
                slot.2 += align;
                slot.3 += lambda;
                slot.4 += entry.embedding.l2_norm();
                slot.5 += 1;
            }
            // per-class mean drift vs mean correction
            let mut per_class: std::collections::BTreeMap<usize, (Vec<f64>, Vec<f64>, usize)> = Default::default();
            for entry in queue.entries() {
                let x = entry.raw_input.as_ref().unwrap();
                let e_now = enc.embed(x).unwrap();
                let drift = e_now.sub(&entry.embedding).unwrap();
                let corr = bfe_core::broadface::compensated_embedding(entry, &w)
                    .unwrap()
                    .sub(&entry.embedding)
                    .unwrap();
                let slot = per_class
                    .entry(entry.label)
                    .or_insert((vec![0.0; drift.dim()], vec![0.0; drift.dim()], 0));
                for (a, b) in slot.0.iter_mut().zip(drift.as_slice()) {
                    *a += b;
                }
                for (a, b) in slot.1.iter_mut().zip(corr.as_slice()) {
                    *a += b;
                }
                slot.2 += 1;
            }
            let mut mean_cos = 0.0;
            let mut mean_ratio = 0.0;
            let mut classes_counted = 0.0;
            for (_, (d, c, n)) in &per_class {
                if *n < 2 { continue; }
                let nd: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nc: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nd < 1e-9 || nc < 1e-9 { continue; }
                let dot: f64 = d.iter().zip(c).map(|(a, b)| a * b).sum();
                mean_cos += dot / (nd * nc);
                mean_ratio += nc / nd;
                classes_counted += 1.0;
            }
            println!(
                "class-mean alignment: cos {:+.3}, |corr|/|drift| ratio {:.2} over {} classes",
                mean_cos / classes_counted,
                mean_ratio / classes_counted,
                classes_counted
            );
            println!("band(16its) |drift| |corr| cos(drift,corr) lambda |e-|");
            for (band, (d, c, a, l, en, n)) in bands {
                let n = n as f64;
                println!(
                    "{:>2}..{:<3} {:.4} {:.4} {:+.3} {:.2} {:.2}",
                    band * 16,
                    band * 16 + 15,
                    d / n,
                    c / n,
                    a / n,
                    l / n,
                    en / n
                );
            }
        }
        "scan" => {
            // grid over (batch, lr, scale, warm phase): fraction of aged
            // buckets where compensation wins, single seed each
            let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
            println!("batch lr s warm good/total meanerr_raw meanerr_comp");
            for &(batch, lr0, scale, warm) in &[
                (16usize, 5e-3, 64.0, 0u64),
                (16, 2e-2, 64.0, 0),
                (16, 5e-2, 64.0, 0),
                (16, 5e-2, 16.0, 0),
                (16, 1e-1, 16.0, 0),
                (64, 2e-2, 64.0, 0),
                (64, 5e-2, 64.0, 0),
                (64, 5e-2, 16.0, 0),
                (64, 1e-1, 16.0, 0),
                (128, 5e-2, 16.0, 0),
            ] {
                let ds = default_dataset(seed);
                let (train, _) = ds.split_per_class(4).unwrap();
                let cap = 64 * batch;
                let margin = bfe_core::losses::MarginConfig::arcface(0.5, scale).unwrap();
                let schedule = bfe_core::optim::LrSchedule::constant(lr0).unwrap();
                let mut enc =
                    bfe_core::encoder::MlpEncoder::init(&[32, 64, 16], seed).unwrap();
                let mut w = bfe_core::trainer::init_classifier(512, 16, seed.wrapping_add(1));
                let mut sampler =
                    bfe_core::trainer::BatchSampler::new(train.len(), batch, seed.wrapping_add(2));
                let mut queue = BroadQueue::new(cap, true).with_retained_inputs();
                let mut warm_queue = BroadQueue::new(0, true);
                let mut eo = bfe_core::optim::Sgd::new(0.9, 5e-4, schedule.clone()).unwrap();
                let mut co = bfe_core::optim::Sgd::new(0.9, 5e-4, schedule.clone()).unwrap();
                let total_iters = warm + 70;
                let mut failed = false;
                for it in 0..total_iters {
                    let batch_s: Vec<_> = sampler
                        .next_batch()
                        .iter()
                        .map(|&i| train.samples()[i].clone())
                        .collect();
                    let q = if it < warm { &mut warm_queue } else { &mut queue };
                    if bfe_core::broadface::train_iteration(
                        &mut enc, &mut w, q, &batch_s, &mut eo, &mut co, &margin, it,
                    )
                    .is_err()
                    {
                        failed = true;
                        break;
                    }
                }
                if failed {
                    println!("{batch} {lr0} {scale} {warm} DIVERGED");
                    continue;
                }
                let records =
                    measure_compensation_error(&enc, &w, &queue, total_iters - 1, cap, seed)
                        .unwrap();
                let aged: Vec<_> = records
                    .iter()
                    .filter(|r| (16..=64).contains(&r.iterations_elapsed))
                    .collect();
                let good =
                    aged.iter().filter(|r| r.mean_error_compensated < r.mean_error_uncompensated).count();
                let mraw: f64 =
                    aged.iter().map(|r| r.mean_error_uncompensated).sum::<f64>() / aged.len().max(1) as f64;
                let mcomp: f64 =
                    aged.iter().map(|r| r.mean_error_compensated).sum::<f64>() / aged.len().max(1) as f64;
                println!(
                    "{batch} {lr0} {scale} {warm} {good}/{} {mraw:.4} {mcomp:.4}",
                    aged.len()
                );
            }
        }
        "scan2" => {
            // morph from the passing toy config toward the default task,
            // one factor at a time; infinite fresh samples per class
            let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(23);
            println!("label C in hid D batch lr s iters good/total raw comp");
            #[allow(clippy::type_complexity)]
            let cases: &[(&str, usize, usize, usize, usize, usize, f64, f64, u64)] = &[
                // label, C, in, hidden, D, batch, lr, s, iters
                ("toy", 8, 6, 12, 4, 8, 5e-2, 16.0, 40),
                ("toy-long", 8, 6, 12, 4, 8, 5e-2, 16.0, 100),
                ("C64", 64, 6, 12, 4, 8, 5e-2, 16.0, 100),
                ("C512", 512, 6, 12, 4, 8, 5e-2, 16.0, 100),
                ("C512-in32", 512, 32, 64, 4, 8, 5e-2, 16.0, 100),
                ("C512-D16", 512, 32, 64, 16, 8, 5e-2, 16.0, 100),
                ("C512-b16", 512, 32, 64, 16, 16, 5e-2, 16.0, 100),
                ("C512-s64", 512, 32, 64, 16, 16, 5e-2, 64.0, 100),
                ("C512-lr5e3", 512, 32, 64, 16, 16, 5e-3, 64.0, 100),
            ];
            for &(label, classes, dim_in, hidden, d, batch, lr0, scale, iters) in cases {
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ classes as u64 ^ iters);
                use rand::Rng;
                use rand::SeedableRng;
                let margin = bfe_core::losses::MarginConfig::arcface(0.3, scale).unwrap();
                let schedule = bfe_core::optim::LrSchedule::constant(lr0).unwrap();
                let mut enc =
                    bfe_core::encoder::MlpEncoder::init(&[dim_in, hidden, d], seed).unwrap();
                let mut w = bfe_core::trainer::init_classifier(classes, d, seed.wrapping_add(1));
                let cap = (batch as u64 * iters) as usize;
                let mut queue = BroadQueue::new(cap, true).with_retained_inputs();
                let mut eo = bfe_core::optim::Sgd::new(0.9, 0.0, schedule.clone()).unwrap();
                let mut co = bfe_core::optim::Sgd::new(0.9, 0.0, schedule.clone()).unwrap();
                // fixed class centers at norm 2, fresh uniform noise per draw
                let centers: Vec<bfe_core::linalg::Vector> = (0..classes)
                    .map(|_| loop {
                        let x = bfe_core::linalg::Vector::new(
                            (0..dim_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        )
                        .unwrap();
                        if x.l2_norm() > 0.2 {
                            break x.scaled(2.0 / x.l2_norm());
                        }
                    })
                    .collect();
                let mut failed = false;
                for it in 0..iters {
                    let batch_s: Vec<(bfe_core::linalg::Vector, usize)> = (0..batch)
                        .map(|_| {
                            let y = rng.random_range(0..classes);
                            let noise = bfe_core::linalg::Vector::new(
                                (0..dim_in).map(|_| rng.random_range(-0.05..0.05)).collect(),
                            )
                            .unwrap();
                            (centers[y].add(&noise).unwrap(), y)
                        })
                        .collect();
                    if bfe_core::broadface::train_iteration(
                        &mut enc, &mut w, &mut queue, &batch_s, &mut eo, &mut co, &margin, it,
                    )
                    .is_err()
                    {
                        failed = true;
                        break;
                    }
                }
                if failed {
                    println!("{label} DIVERGED");
                    continue;
                }
                let records =
                    measure_compensation_error(&enc, &w, &queue, iters - 1, cap, seed).unwrap();
                let aged: Vec<_> = records
                    .iter()
                    .filter(|r| r.iterations_elapsed >= 10 && r.iterations_elapsed <= iters - 10)
                    .collect();
                let good = aged
                    .iter()
                    .filter(|r| r.mean_error_compensated < r.mean_error_uncompensated)
                    .count();
                let raw: f64 = aged.iter().map(|r| r.mean_error_uncompensated).sum::<f64>()
                    / aged.len().max(1) as f64;
                let comp: f64 = aged.iter().map(|r| r.mean_error_compensated).sum::<f64>()
                    / aged.len().max(1) as f64;
                println!(
                    "{label} {classes} {dim_in} {hidden} {d} {batch} {lr0} {scale} {iters} {good}/{} {raw:.4} {comp:.4}",
                    aged.len()
                );
            }
        }
        "scan3" => {
            // the real default dataset, formation-phase protocol
            let lr0: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5e-2);
            let scale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16.0);
            let measure_at: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(70);
            let wd: f64 = std::env::var("CAL_WD").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);
            let m: f64 = std::env::var("CAL_M").ok().and_then(|v| v.parse().ok()).unwrap_or(0.3);
            let b = cal_batch();
            let cap: usize = std::env::var("CAL_DIAGCAP").ok().and_then(|v| v.parse().ok()).unwrap_or(64 * b);
            let mut all_good = 0usize;
            let mut all_total = 0usize;
            for seed in 0..5u64 {
                let ds = default_dataset(seed);
                let (train, _) = ds.split_per_class(4).unwrap();
                let margin = bfe_core::losses::MarginConfig::arcface(m, scale).unwrap();
                let schedule = bfe_core::optim::LrSchedule::constant(lr0).unwrap();
                let mut enc = bfe_core::encoder::MlpEncoder::init(&cal_layers(), seed).unwrap();
                let dim = *cal_layers().last().unwrap();
                let mut w = if std::env::var("CAL_PROTO").is_ok() {
                    // class-prototype rows: normalized mean initial embedding
                    let mut rows = vec![0.0; 512 * dim];
                    let mut counts = vec![0usize; 512];
                    for (x, y) in train.samples() {
                        let e = enc.embed(x).unwrap();
                        counts[*y] += 1;
                        for (o, v) in rows[y * dim..(y + 1) * dim].iter_mut().zip(e.as_slice()) {
                            *o += v;
                        }
                    }
                    for y in 0..512 {
                        let slice = &mut rows[y * dim..(y + 1) * dim];
                        let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
                        for v in slice.iter_mut() {
                            *v = *v / norm * 0.25;
                        }
                    }
                    bfe_core::linalg::Matrix::new(512, dim, rows).unwrap()
                } else {
                    bfe_core::trainer::init_classifier(512, dim, seed.wrapping_add(1))
                };
                let mut sampler =
                    bfe_core::trainer::BatchSampler::new(train.len(), b, seed.wrapping_add(2));
                let mut queue = BroadQueue::new(cap, true).with_retained_inputs();
                let mut eo = bfe_core::optim::Sgd::new(0.9, wd, schedule.clone()).unwrap();
                let mut co = bfe_core::optim::Sgd::new(0.9, wd, schedule.clone()).unwrap();
                let mut failed = false;
                for it in 0..measure_at + 1 {
                    let batch_s: Vec<_> = sampler
                        .next_batch()
                        .iter()
                        .map(|&i| train.samples()[i].clone())
                        .collect();
                    if bfe_core::broadface::train_iteration(
                        &mut enc, &mut w, &mut queue, &batch_s, &mut eo, &mut co, &margin, it,
                    )
                    .is_err()
                    {
                        failed = true;
                        break;
                    }
                }
                if failed {
                    println!("seed {seed}: DIVERGED");
                    continue;
                }
                let records =
                    measure_compensation_error(&enc, &w, &queue, measure_at, cap, seed).unwrap();
                let bin: u64 = std::env::var("CAL_BIN").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
                let mut binned: std::collections::BTreeMap<u64, (f64, f64, usize)> = Default::default();
                for r in records.iter().filter(|r| (16..=63).contains(&r.iterations_elapsed)) {
                    let slot = binned.entry((r.iterations_elapsed - 16) / bin).or_insert((0.0, 0.0, 0));
                    slot.0 += r.mean_error_uncompensated * r.count as f64;
                    slot.1 += r.mean_error_compensated * r.count as f64;
                    slot.2 += r.count;
                }
                let aged: Vec<(f64, f64)> = binned
                    .values()
                    .map(|&(u, c, n)| (u / n as f64, c / n as f64))
                    .collect();
                let good = aged.iter().filter(|(u, c)| c < u).count();
                let raw: f64 = aged.iter().map(|(u, _)| u).sum::<f64>() / aged.len().max(1) as f64;
                let comp: f64 = aged.iter().map(|(_, c)| c).sum::<f64>() / aged.len().max(1) as f64;
                let half = aged.len() / 2;
                let young: f64 = aged[..half].iter().map(|(u, _)| u).sum::<f64>() / half as f64;
                let old: f64 = aged[half..].iter().map(|(u, _)| u).sum::<f64>() / (aged.len() - half) as f64;
                println!(
                    "seed {seed}: {good}/{} raw {raw:.4} comp {comp:.4} growth {young:.4}->{old:.4}",
                    aged.len()
                );
                if seed == 0 && std::env::var("CAL_BANDS").is_ok() {
                    for (i, (u, c)) in aged.iter().enumerate() {
                        println!("  bin {i}: raw {u:.4} comp {c:.4} {}", if c < u { "WIN" } else { "" });
                    }
                }
                all_good += good;
                all_total += aged.len();
            }
            println!(
                "overall {all_good}/{all_total} = {:.1}%",
                100.0 * all_good as f64 / all_total.max(1) as f64
            );
        }
        other => eprintln!("unknown mode {other}"),
    }
}

fn trim(v: &[f64]) -> Vec<f64> {
    v.iter().map(|r| (r * 1000.0).round() / 1000.0).collect()
}
