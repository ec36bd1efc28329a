//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails outside the documented deviations.
//!
//! Run with `cargo test --release -p hmcseg-cli --test acceptance`.

use std::time::{Duration, Instant};

use hmcseg::diversity::{cosine_matrix, explored_volume_columns, singular_values};
use hmcseg::energy::{minibatch_gradient, EnergyConfig};
use hmcseg::failure::roc_auc;
use hmcseg::inference::{LabelMap, ProbabilityMap};
use hmcseg::metrics::{calibration, ece};
use hmcseg::model::{build_model, ModelConfig};
use hmcseg::oracle::{moment_check, run_analytic_chain, temperature_scaling, AnalyticChainConfig, QuadraticTarget};
use hmcseg::protocol::ProtocolName;
use hmcseg::rng::stream;
use hmcseg::sampler::{checkpoint_epochs, cycle_of, lr_schedule, run_chain, ChainSpec, SamplerConfig};
use hmcseg::synth::{generate_dataset, render_scene, AugmentConfig, Counts, SceneConfig};
use hmcseg::tensor::{primitive_suite, DropoutMode};
use hmcseg_cli::checkpoint::{decode, encode, CheckpointHeader};
use hmcseg_cli::experiment::{train, trend_report, TrendReport};
use hmcseg_cli::RunConfig;
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Criteria whose literal threshold cannot be met; they are reported but do
/// not fail the run. Each has an entry in the decisions log.
const KNOWN_DEVIATIONS: &[&str] = &["C4"];

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let prims = primitive_suite(20, 7).expect("primitive suite");
    let worst_prim = prims.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let (model, w) = build_model(&ModelConfig::default(), 3).expect("model");
    let s = render_scene(
        &SceneConfig {
            height: 8,
            width: 8,
            ..SceneConfig::default()
        },
        &mut stream(1, "grad-scene", 0),
    );
    let full = model
        .loss_gradcheck(&w, &s.image.cast(), &s.label, 0, None)
        .expect("loss gradcheck");
    let elapsed = t0.elapsed();
    outcome(
        worst_prim < 1e-4 && full.max_rel_error < 1e-4 && full.checked == model.parameter_count() && elapsed < Duration::from_secs(60),
        format!(
            "{} primitives worst {worst_prim:.2e}; U-Net loss {} of {} weights worst {:.2e} ({:.2e} without it on well-resolved entries); {:.1}s",
            prims.len(),
            full.checked,
            model.parameter_count(),
            full.max_rel_error,
            full.max_raw_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn sgd_momentum(w: &mut [f32], v: &mut [f32], g: &[f32], lr: f32, momentum: f32) {
    for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vi = momentum * *vi - lr * gi;
        *wi += *vi;
    }
}

fn sgd_equivalence() -> Outcome {
    let data = generate_dataset(
        &SceneConfig {
            height: 16,
            width: 16,
            lv_radius: (2.0, 2.5),
            myo_thickness: (1.0, 1.5),
            rv_radius: (1.0, 1.5),
            max_offset: 0.5,
            ..SceneConfig::default()
        },
        Counts {
            train: 10,
            val: 1,
            test_in: 1,
            test_shift: 1,
        },
        2,
    )
    .expect("data");
    let (model, init) = build_model(&ModelConfig::default(), 2).expect("model");
    let sampler = SamplerConfig {
        epochs: 20,
        cycles: 1,
        restart_epochs: 0,
        constant_lr: Some(0.01),
        ..SamplerConfig::desk()
    };
    let energy = EnergyConfig {
        temperature: 0.0,
        batch_size: 2,
        ..EnergyConfig::desk()
    };
    let augment = AugmentConfig::disabled();
    let seed = 21;
    let spec = ChainSpec {
        sampler: &sampler,
        energy: &energy,
        augment: &augment,
        train_dropout: false,
        seed,
    };
    let run = run_chain(&model, init.clone(), &data.train, &spec).expect("chain");

    let mut w = init;
    let mut v = vec![0.0f32; w.len()];
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut steps = 0;
    for epoch in 0..sampler.epochs {
        order.shuffle(&mut stream(seed, "shuffle", epoch as u64));
        for chunk in order.chunks(2) {
            let batch: Vec<_> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let g = minibatch_gradient::<f32>(&model, &w, &batch, energy.lambda, DropoutMode::Off).expect("gradient");
            sgd_momentum(w.values_mut(), &mut v, &g.gradient, 0.01, (1.0 - sampler.friction) as f32);
            steps += 1;
        }
    }
    let mismatched = run
        .final_weights
        .values()
        .iter()
        .zip(w.values())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    outcome(
        steps == 100 && mismatched == 0,
        format!("{steps} steps, {mismatched} of {} weights differ in any bit", w.len()),
    )
}

fn sampler_oracle() -> Outcome {
    let t0 = Instant::now();
    let target = QuadraticTarget::diagonal(&[1.0, 4.0]).expect("target");
    let mut parts = Vec::new();
    let mut pass = true;
    for (k, temp) in [0.25, 1.0].into_iter().enumerate() {
        let cfg = AnalyticChainConfig {
            temperature: temp,
            ..AnalyticChainConfig::default()
        };
        let s = run_analytic_chain(&target, &cfg, &[0.0, 0.0], 10 + k as u64).expect("chain");
        let r = moment_check(&s, &target, temp).expect("moments");
        pass &= s.len() == 100_000 && r.cov_rel_error < 0.15;
        parts.push(format!("T={temp}: {} samples, cov error {:.3}", s.len(), r.cov_rel_error));
    }
    let scaling = temperature_scaling(&target, &[0.25, 0.5, 1.0], &AnalyticChainConfig::default(), 6).expect("scaling");
    pass &= scaling.max_rel_error < 0.10;
    let elapsed = t0.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    parts.push(format!("slope error {:.3}", scaling.max_rel_error));
    parts.push(format!("{:.1}s", elapsed.as_secs_f64()));
    outcome(pass, parts.join("; "))
}

fn schedule() -> Outcome {
    let p = SamplerConfig::paper();
    let frozen = 0.02 * 0.4f64.powf(0.9);
    let tc = p.cycle_len();
    let mut exact = true;
    let mut decreasing = true;
    for cycle in 0..p.cycles {
        for e in 0..tc {
            let eta = lr_schedule(cycle * tc + e, &p);
            if e < p.restart_epochs {
                exact &= eta == p.eta_restart;
            } else if e as f64 >= p.burn_in * tc as f64 {
                exact &= (eta - frozen).abs() < 1e-15;
            } else {
                let expected = 0.02 * (1.0 - e as f64 / tc as f64).powf(0.9);
                exact &= (eta - expected).abs() < 1e-15;
                if e > p.restart_epochs {
                    decreasing &= eta < lr_schedule(cycle * tc + e - 1, &p);
                }
            }
        }
    }
    let literal = (lr_schedule(200, &p) - 0.008770).abs();
    outcome(
        exact && decreasing && literal < 1e-6,
        format!(
            "formula exact: {exact}; strictly decreasing: {decreasing}; frozen rate {frozen:.12} vs stated 0.008770 differs by {literal:.2e}"
        ),
    )
}

fn thinning() -> Outcome {
    let p = SamplerConfig {
        stride: 4,
        ..SamplerConfig::paper()
    };
    let got = checkpoint_epochs(&p);
    let tc = 1000 / 3;
    let first = (0.6 * tc as f64 - 1e-9).ceil() as usize;
    let expected: Vec<usize> = (0..1000).filter(|e| e % tc >= first && e % 4 == 0).collect();
    let mismatches = got.iter().filter(|e| !expected.contains(e)).count() + expected.iter().filter(|e| !got.contains(e)).count();
    let per_cycle: Vec<usize> = (0..3).map(|c| got.iter().filter(|&&e| cycle_of(e, &p) == c).count()).collect();
    outcome(
        mismatches == 0,
        format!("{} checkpoints {per_cycle:?} per cycle, {mismatches} mismatches", got.len()),
    )
}

fn naive_calibration(p: &ProbabilityMap, y: &LabelMap, bins: usize) -> (f64, f64, f64) {
    let n = y.len();
    let c = p.classes();
    let mut groups: Vec<Vec<(f64, bool)>> = vec![Vec::new(); bins];
    let (mut brier, mut nll) = (0.0, 0.0);
    for i in 0..n {
        let probs: Vec<f64> = (0..c).map(|k| p.get(k, i)).collect();
        let arg = (0..c).fold(0, |a, k| if probs[k] > probs[a] { k } else { a });
        let conf = probs[arg];
        let b = (1..=bins).find(|&j| conf <= j as f64 / bins as f64).expect("in range") - 1;
        groups[b].push((conf, arg == y.data()[i]));
        brier += probs
            .iter()
            .enumerate()
            .map(|(k, pk)| (pk - if k == y.data()[i] { 1.0 } else { 0.0 }).powi(2))
            .sum::<f64>();
        nll -= probs[y.data()[i]].max(1e-12).ln();
    }
    let ece = groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let k = g.len() as f64;
            let conf = g.iter().map(|x| x.0).sum::<f64>() / k;
            let acc = g.iter().filter(|x| x.1).count() as f64 / k;
            k / n as f64 * (conf - acc).abs()
        })
        .sum();
    (ece, brier / n as f64, nll / n as f64)
}

fn mann_whitney(conf: &[f64], fails: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &fi) in fails.iter().enumerate() {
        for (j, &fj) in fails.iter().enumerate() {
            if !fi && fj {
                pairs += 1.0;
                if conf[i] > conf[j] {
                    wins += 1.0;
                } else if conf[i] == conf[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = stream(6, "acceptance-metrics", 0);
    let mut worst: f64 = 0.0;
    for classes in [2, 3, 4] {
        let n = 5000;
        let mut data = vec![0.0; classes * n];
        for i in 0..n {
            let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            for k in 0..classes {
                data[k * n + i] = raw[k] / s;
            }
        }
        let p = ProbabilityMap::new(classes, vec![n], data).expect("map");
        let y = LabelMap::new(vec![n], (0..n).map(|_| rng.random_range(0..classes)).collect()).expect("labels");
        let r = calibration(&p, &y, 15).expect("calibration");
        let (e, b, l) = naive_calibration(&p, &y, 15);
        worst = worst.max((r.ece - e).abs()).max((r.brier - b).abs()).max((r.nll - l).abs());
    }

    let n = 1000;
    let mut data = vec![0.0; 2 * n];
    let mut labels = vec![0; n];
    for i in 0..n {
        data[i] = 0.7;
        data[n + i] = 0.3;
        labels[i] = usize::from(i % 10 >= 7);
    }
    let calibrated = ece(
        &ProbabilityMap::new(2, vec![n], data).expect("map"),
        &LabelMap::new(vec![n], labels).expect("labels"),
        10,
    )
    .expect("ece");

    let mut auc_gap: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(4..40);
        let conf: Vec<f64> = (0..m).map(|_| (rng.random_range(0..12) as f64) / 11.0).collect();
        let mut fails: Vec<bool> = (0..m).map(|_| rng.random_bool(0.4)).collect();
        fails[0] = true;
        fails[1] = false;
        let auc = roc_auc(&conf, &fails).expect("auc").auc;
        auc_gap = auc_gap.max((auc - mann_whitney(&conf, &fails)).abs());
    }
    outcome(
        worst < 1e-10 && calibrated.abs() < 1e-12 && auc_gap < 1e-12,
        format!("calibration vs naive {worst:.1e}; calibrated-stream ECE {calibrated:.1e}; AUC vs pair count {auc_gap:.1e} over 1000 instances"),
    )
}

fn volume_oracle() -> Outcome {
    let mut rng = stream(7, "acceptance-volume", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (d, m) = (50, 10);
        let cols: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mat = nalgebra::DMatrix::from_fn(d, m, |r, c| cols[c][r]);
        let mut sv: Vec<f64> = mat.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in singular_values(&cols).iter().zip(&sv) {
            worst = worst.max((a - b).abs() / b);
        }
    }
    let cols: Vec<Vec<f64>> = (0..5)
        .map(|i| {
            let mut c = vec![0.0; 8];
            c[i] = (i + 1) as f64;
            c
        })
        .collect();
    let v = explored_volume_columns(&cols, 5).expect("volume").volume;
    outcome(
        worst < 1e-8 && v == 120.0,
        format!("singular values vs SVD worst rel {worst:.1e}; orthogonal norms 1..5 give {v}"),
    )
}

fn checkpoint_roundtrip() -> Outcome {
    let mut rng = stream(8, "acceptance-ckpt", 0);
    let mut bad = 0;
    let mut corrupt_caught = 0;
    for i in 0..100u64 {
        let n = rng.random_range(1..5000);
        let w: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let h = CheckpointHeader {
            config_hash: rng.random(),
            epoch: i,
            cycle: i % 3,
            eta: rng.random(),
            temperature: 1e-5,
            lambda: 1e-3,
            seed: i,
        };
        let mut bytes = encode(&w, &h);
        match decode(&bytes) {
            Ok((h2, w2)) if h2 == h && w2.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits()) => {}
            _ => bad += 1,
        }
        let at = 74 + rng.random_range(0..4 * n);
        bytes[at] ^= 1 << rng.random_range(0..8);
        corrupt_caught += usize::from(decode(&bytes).is_err());
    }
    outcome(
        bad == 0 && corrupt_caught == 100,
        format!("100 vectors, {bad} not bit-identical; {corrupt_caught}/100 payload bit flips rejected by CRC"),
    )
}

/// Sample standard deviation.
fn std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn calibration_trend(reports: &[TrendReport]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for set in ["test_in", "test_shift"] {
        let rows: Vec<_> = reports
            .iter()
            .map(|r| r.calibration.iter().find(|c| c.set == set).expect("set present"))
            .collect();
        let field = |f: fn(&hmcseg_cli::experiment::SetCalibration) -> f64| mean(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (nll, nll1) = (field(|r| r.nll), field(|r| r.single_nll));
        let (ece, ece1) = (field(|r| r.ece), field(|r| r.single_ece));
        pass &= nll < nll1 && ece < ece1;
        parts.push(format!(
            "{set}: M={} NLL {nll:.4} vs {nll1:.4}, ECE {ece:.4} vs {ece1:.4}",
            rows[0].members
        ));
    }
    outcome(pass, parts.join("; "))
}

fn diversity_trend(reports: &[TrendReport]) -> Outcome {
    let multi: Vec<f64> = reports.iter().map(|r| r.functional_multi).collect();
    let mut pass = true;
    let mut parts = vec![format!("multi {:.4}", mean(&multi))];
    for (name, other) in [
        ("single", reports.iter().map(|r| r.functional_single).collect::<Vec<_>>()),
        ("mc-dropout", reports.iter().map(|r| r.functional_mc_dropout).collect()),
    ] {
        let diff: Vec<f64> = multi.iter().zip(&other).map(|(a, b)| a - b).collect();
        let margin = mean(&diff);
        let spread = std(&diff);
        pass &= margin > spread;
        parts.push(format!("{name} {:.4} (margin {margin:.4}, seed std {spread:.4})", mean(&other)));
    }
    outcome(pass, parts.join("; "))
}

fn cycle_trend(reports: &[TrendReport]) -> Outcome {
    let within = mean(&reports.iter().map(|r| r.similarity_within).collect::<Vec<_>>());
    let between = mean(&reports.iter().map(|r| r.similarity_between).collect::<Vec<_>>());
    outcome(
        within - between > 0.1,
        format!("cosine within cycle {within:.4}, between cycles {between:.4}, gap {:.4}", within - between),
    )
}

fn sweep_trend(reports: &[TrendReport]) -> Outcome {
    let temps: Vec<f64> = reports[0].sweep.iter().map(|r| r.temperature).collect();
    let at = |k: usize, f: fn(&hmcseg::protocol::SweepRow) -> f64| mean(&reports.iter().map(|r| f(&r.sweep[k])).collect::<Vec<_>>());
    let vols: Vec<f64> = (0..temps.len()).map(|k| at(k, |r| r.explored_volume)).collect();
    let dice: Vec<f64> = (0..temps.len()).map(|k| at(k, |r| r.mean_dice)).collect();
    let monotone = vols.windows(2).all(|w| w[1] > w[0]);
    let idx = |t: f64| temps.iter().position(|&x| (x - t).abs() < 1e-15).expect("temperature in sweep");
    let dice_drop = dice[idx(1e-4)] < dice[idx(1e-5)];
    let cells: Vec<String> = temps
        .iter()
        .zip(vols.iter().zip(&dice))
        .map(|(t, (v, d))| format!("T={t:e} vol {v:.3e} dice {d:.3}"))
        .collect();
    outcome(monotone && dice_drop, cells.join(", "))
}

fn failure_trend(reports: &[TrendReport]) -> Outcome {
    let auc: Vec<f64> = reports.iter().map(|r| r.failure.auc.unwrap_or(f64::NAN)).collect();
    let rho: Vec<f64> = reports.iter().map(|r| r.failure.spearman.unwrap_or(f64::NAN)).collect();
    let failures: usize = reports.iter().map(|r| r.failure.failures).sum();
    let rows: usize = reports.iter().map(|r| r.failure.rows).sum();
    outcome(
        mean(&auc) > 0.75 && mean(&rho) > 0.5,
        format!(
            "AUC {:.3} (per seed {auc:.3?}), Spearman {:.3} (per seed {rho:.3?}), {failures}/{rows} failures",
            mean(&auc),
            mean(&rho)
        ),
    )
}

/// Pairwise cosine of independently trained members: reported only.
fn deep_ensemble_similarity() -> String {
    let cfg = RunConfig::default();
    let data = generate_dataset(&cfg.scene, cfg.counts, cfg.seed).expect("data");
    let run = train(&cfg, &data, ProtocolName::DeepEnsembles).expect("deep ensembles");
    let finals: Vec<_> = run.chains.iter().map(|c| c.final_weights.clone()).collect();
    let m = cosine_matrix(&finals).expect("cosine");
    let off: Vec<f64> = (0..m.len()).flat_map(|i| (i + 1..m.len()).map(move |j| (i, j))).map(|(i, j)| m[i][j]).collect();
    format!(
        "{} members: pairwise weight cosine mean {:.3}, max {:.3}",
        finals.len(),
        mean(&off),
        off.iter().copied().fold(f64::MIN, f64::max)
    )
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture; none apply here.
    let only: Option<String> = std::env::var("HMCSEG_ACCEPTANCE").ok();
    let wanted = |id: &str| only.as_deref().is_none_or(|o| o.split(',').any(|x| x == id || x == "all"));
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut record = |id: &'static str, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(id) {
            let o = f();
            println!("{id:<4} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((id, name, o));
        }
    };
    record("C1", "gradient correctness", &gradients);
    record("C2", "SGD-momentum equivalence", &sgd_equivalence);
    record("C3", "sampler oracle", &sampler_oracle);
    record("C4", "learning-rate schedule", &schedule);
    record("C5", "thinning index set", &thinning);
    record("C6", "metric oracles", &metric_oracles);
    record("C7", "volume oracle", &volume_oracle);
    record("C8", "checkpoint roundtrip", &checkpoint_roundtrip);

    let trends = ["C9", "C10", "C11", "C12", "C13"];
    if trends.iter().any(|t| wanted(t)) {
        let t0 = Instant::now();
        let reports: Vec<TrendReport> = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = RunConfig {
                    seed,
                    ..RunConfig::default()
                };
                let data = generate_dataset(&cfg.scene, cfg.counts, seed).expect("data");
                trend_report(&cfg, &data, true).expect("trend report")
            })
            .collect();
        let minutes = t0.elapsed().as_secs_f64() / 60.0;
        let timed = |o: Outcome| outcome(o.pass && minutes < 30.0, o.detail);
        record("C9", "ensembling improves calibration", &|| timed(calibration_trend(&reports)));
        record("C10", "diversity ordering", &|| timed(diversity_trend(&reports)));
        record("C11", "cyclical multi-modality", &|| timed(cycle_trend(&reports)));
        record("C12", "temperature sweep shape", &|| timed(sweep_trend(&reports)));
        record("C13", "failure detection", &|| timed(failure_trend(&reports)));
        println!("     trend criteria over seeds {SEEDS:?} took {minutes:.1} min");
    }
    if wanted("DE") {
        println!("note deep ensembles: {}", deep_ensemble_similarity());
    }

    let unexpected: Vec<&str> = results
        .iter()
        .filter(|(id, _, o)| !o.pass && !KNOWN_DEVIATIONS.contains(id))
        .map(|(id, _, _)| *id)
        .collect();
    let known: Vec<&str> = results
        .iter()
        .filter(|(id, _, o)| !o.pass && KNOWN_DEVIATIONS.contains(id))
        .map(|(id, _, _)| *id)
        .collect();
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} passed; known deviations failing: {known:?}", results.len());
    if !unexpected.is_empty() {
        eprintln!("acceptance failed: {unexpected:?}");
        std::process::exit(1);
    }
}
