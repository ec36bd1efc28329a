use std::path::{Path, PathBuf};

use hmcseg::failure::summarize;
use hmcseg::inference::{entropy_map, EntropyMode};
use hmcseg::metrics::dice;
use hmcseg::oracle::run_oracle_suite;
use hmcseg::protocol::{ensemble_maps, member_maps, temperature_sweep, ProtocolName};
use hmcseg::synth::generate_dataset;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::experiment::{self, test_sets};
use crate::report::{merge_reports, write_csv, write_json, Clock};
use crate::store::{dataset_for, save_dataset, save_run, trained_run, write_bytes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the selected protocol and store its checkpoints.
    Train,
    /// Per-image Dice and uncertainty of a trained run.
    Infer,
    /// Calibration of the ensemble and of single members.
    Calibrate,
    /// Weight-space and functional diversity of a trained run.
    Diversity,
    /// Confidence scores and failure detection on the shifted test set.
    Failures,
    /// Sampler checks against analytic targets.
    Oracle,
    /// Temperature sweep of SGHMC-Multi.
    Sweep,
    /// Merge the per-run CSV reports into one table per type.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Calibrate => "calibrate",
            Command::Diversity => "diversity",
            Command::Failures => "failures",
            Command::Oracle => "oracle",
            Command::Sweep => "sweep",
            Command::Report => "report",
        }
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let clock = Clock::start();
    let (outputs, extra, tag) = match cmd {
        Command::GenData => (gen_data(cfg)?, json!(null), None),
        Command::Train => {
            let (out, schedule) = train(cfg)?;
            (out, schedule, Some(cfg.protocol.name))
        }
        Command::Infer => (infer(cfg)?, json!(null), Some(cfg.protocol.name)),
        Command::Calibrate => (calibrate(cfg)?, json!(null), Some(cfg.protocol.name)),
        Command::Diversity => (diversity(cfg)?, json!(null), Some(cfg.protocol.name)),
        Command::Failures => (failures(cfg)?, json!(null), Some(cfg.protocol.name)),
        Command::Oracle => {
            let (out, pass) = oracle(cfg)?;
            finish(cfg, &clock, cmd, None, &out, json!({ "pass": pass }))?;
            if !pass {
                return Err(CliError::Runtime("oracle checks failed".into()));
            }
            return Ok(());
        }
        Command::Sweep => (sweep(cfg)?, json!(null), None),
        Command::Report => (merge_reports(&cfg.out)?, json!(null), None),
    };
    finish(cfg, &clock, cmd, tag, &outputs, extra)
}

fn finish(
    cfg: &RunConfig,
    clock: &Clock,
    cmd: Command,
    tag: Option<ProtocolName>,
    outputs: &[PathBuf],
    extra: serde_json::Value,
) -> CliResult<()> {
    let stem = match tag {
        Some(p) => format!("{}-{}", cmd.name(), p.as_str()),
        None => cmd.name().to_owned(),
    };
    let dir = cfg.out.join("provenance");
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    clock.finish(&dir.join(format!("{stem}.json")), cmd.name(), cfg, &refs, extra)?;
    // a config file that reproduces this command
    write_bytes(&dir.join(format!("{stem}.toml")), cfg.to_toml().as_bytes())
}

#[derive(Serialize)]
struct ClassRow {
    split: &'static str,
    image: usize,
    background: usize,
    lv: usize,
    myo: usize,
    rv: usize,
    shift_severity: Option<f64>,
}

fn gen_data(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let d = generate_dataset(&cfg.scene, cfg.counts, cfg.seed)?;
    let path = cfg.data_path();
    save_dataset(&path, &d)?;
    let mut rows = Vec::new();
    for (split, set) in [("train", &d.train), ("val", &d.val), ("test_in", &d.test_in), ("test_shift", &d.test_shift)] {
        for (i, s) in set.iter().enumerate() {
            let mut n = [0usize; 4];
            for &l in s.label.data() {
                n[l] += 1;
            }
            rows.push(ClassRow {
                split,
                image: i,
                background: n[0],
                lv: n[1],
                myo: n[2],
                rv: n[3],
                shift_severity: (split == "test_shift").then(|| d.shift_severity[i]),
            });
        }
    }
    let table = cfg.report_dir("data").join("classes.csv");
    write_csv(&table, &rows)?;
    Ok(vec![path, table])
}

#[derive(Serialize)]
struct ScheduleRow {
    chain: usize,
    epoch: usize,
    cycle: usize,
    eta: f64,
    mean_loss: f64,
}

fn train(cfg: &RunConfig) -> CliResult<(Vec<PathBuf>, serde_json::Value)> {
    let data = dataset_for(cfg)?;
    let name = cfg.protocol.name;
    let run = experiment::train(cfg, &data, name)?;
    let root = cfg.run_dir(name);
    let manifest = save_run(&root, &run)?;
    let rows: Vec<ScheduleRow> = manifest
        .chains
        .iter()
        .enumerate()
        .flat_map(|(k, c)| {
            c.schedule.iter().map(move |e| ScheduleRow {
                chain: k,
                epoch: e.epoch,
                cycle: e.cycle,
                eta: e.eta,
                mean_loss: e.mean_loss,
            })
        })
        .collect();
    let table = cfg.report_dir("schedule").join(format!("{}.csv", name.as_str()));
    write_csv(&table, &rows)?;
    let extra = json!({
        "recipe_hash": run.provenance.config_hash,
        "members": run.provenance.members,
        "checkpoints": manifest.chains.iter().map(|c| c.checkpoints.len()).collect::<Vec<_>>(),
        "schedule": manifest.chains.iter().map(|c| &c.schedule).collect::<Vec<_>>(),
    });
    Ok((vec![root.join("manifest.json"), table], extra))
}

#[derive(Serialize)]
struct ImageRow {
    set: &'static str,
    image: usize,
    dice_lv: f64,
    dice_myo: f64,
    dice_rv: f64,
    mean_entropy: f64,
}

fn infer(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = dataset_for(cfg)?;
    let name = cfg.protocol.name;
    let run = trained_run(cfg, name)?;
    let predictor = run.predictor(cfg.protocol.samples, cfg.seed)?;
    let mut rows = Vec::new();
    for (set_name, set) in test_sets(&data) {
        let maps = ensemble_maps(&member_maps(&run.model, &predictor, set)?)?;
        for (i, (m, s)) in maps.iter().zip(set).enumerate() {
            let pred = hmcseg::inference::argmax_segmentation(m);
            let d = |c| dice(&pred.mask(c), &s.label.mask(c));
            let h = entropy_map(m, EntropyMode::Categorical)?.normalized(m.classes());
            rows.push(ImageRow {
                set: set_name,
                image: i,
                dice_lv: d(1)?,
                dice_myo: d(2)?,
                dice_rv: d(3)?,
                mean_entropy: h.iter().sum::<f64>() / h.len() as f64,
            });
        }
    }
    let table = cfg.report_dir("infer").join(format!("{}.csv", name.as_str()));
    write_csv(&table, &rows)?;
    Ok(vec![table])
}

fn calibrate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = dataset_for(cfg)?;
    let name = cfg.protocol.name;
    let run = trained_run(cfg, name)?;
    let predictor = run.predictor(cfg.protocol.samples, cfg.seed)?;
    let (rows, bins) = experiment::calibration(&run.model, &predictor, &data)?;
    let a = cfg.report_dir("calibration").join(format!("{}.csv", name.as_str()));
    let b = cfg.report_dir("reliability").join(format!("{}.csv", name.as_str()));
    write_csv(&a, &rows)?;
    write_csv(&b, &bins)?;
    Ok(vec![a, b])
}

#[derive(Serialize)]
struct DiversityRow {
    members: usize,
    functional_mean: Option<f64>,
    explored_volume: Option<f64>,
    checkpoints: usize,
    cycles: usize,
    cosine_within_cycle: Option<f64>,
    cosine_between_cycles: Option<f64>,
}

fn diversity(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = dataset_for(cfg)?;
    let name = cfg.protocol.name;
    let run = trained_run(cfg, name)?;
    let predictor = run.predictor(cfg.protocol.samples, cfg.seed)?;
    let summary = experiment::diversity(&run.model, &predictor, &data, cfg.sweep.n_sigma)?;
    let store = run.sample_store();
    let sim = if store.len() >= 2 {
        Some(experiment::weight_similarity(&store)?)
    } else {
        None
    };
    let finite = |v: f64| v.is_finite().then_some(v);
    let row = DiversityRow {
        members: summary.members,
        functional_mean: summary.functional_mean,
        explored_volume: summary.explored_volume,
        checkpoints: store.len(),
        cycles: store.cycles().len(),
        cosine_within_cycle: sim.as_ref().and_then(|s| finite(s.within_cycle)),
        cosine_between_cycles: sim.as_ref().and_then(|s| finite(s.between_cycles)),
    };
    let dir = cfg.report_dir("diversity");
    let table = dir.join(format!("{}.csv", name.as_str()));
    let full = dir.join(format!("{}.json", name.as_str()));
    write_csv(&table, &[row])?;
    write_json(&full, &json!({ "functional": summary, "weights": sim }))?;
    Ok(vec![table, full])
}

fn failures(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = dataset_for(cfg)?;
    let name = cfg.protocol.name;
    let run = trained_run(cfg, name)?;
    let predictor = run.predictor(cfg.protocol.samples, cfg.seed)?;
    let rows = experiment::shifted_failures(&run.model, &predictor, &data, &cfg.failure)?;
    let pooled = experiment::pooled_failure_summary(&rows);
    let per_class = summarize(rows.clone()).classes;
    let dir = cfg.report_dir("failures");
    let table = dir.join(format!("{}.csv", name.as_str()));
    let full = dir.join(format!("{}.json", name.as_str()));
    write_csv(&table, &rows)?;
    write_json(&full, &json!({ "pooled": pooled, "classes": per_class }))?;
    Ok(vec![table, full])
}

#[derive(Serialize)]
struct OracleRow {
    check: String,
    temperature: Option<f64>,
    value: f64,
    tolerance: f64,
    pass: bool,
}

fn oracle(cfg: &RunConfig) -> CliResult<(Vec<PathBuf>, bool)> {
    use hmcseg::oracle::{COV_TOL, MIN_ESS, SCALING_TOL};
    let r = run_oracle_suite(cfg.seed)?;
    let mut rows = Vec::new();
    for t in &r.targets {
        rows.push(OracleRow {
            check: format!("{} covariance", t.name),
            temperature: Some(t.temperature),
            value: t.report.cov_rel_error,
            tolerance: COV_TOL,
            // the report also checks the mean
            pass: t.report.pass,
        });
        let ess = t.report.ess.iter().copied().fold(f64::INFINITY, f64::min);
        rows.push(OracleRow {
            check: format!("{} effective samples", t.name),
            temperature: Some(t.temperature),
            value: ess,
            tolerance: MIN_ESS,
            pass: ess >= MIN_ESS,
        });
    }
    rows.push(OracleRow {
        check: "temperature scaling".into(),
        temperature: None,
        value: r.scaling.max_rel_error,
        tolerance: SCALING_TOL,
        pass: r.scaling.max_rel_error < SCALING_TOL,
    });
    let both = r.mixture.visits.iter().all(|&v| v > 0);
    rows.push(OracleRow {
        check: "mixture visits both modes".into(),
        temperature: None,
        value: r.mixture.visits.iter().copied().min().unwrap_or(0) as f64,
        tolerance: 1.0,
        pass: both,
    });
    let dir = cfg.report_dir("oracle");
    let table = dir.join("oracle.csv");
    let full = dir.join("oracle.json");
    write_csv(&table, &rows)?;
    write_json(&full, &r)?;
    Ok((vec![table, full], r.pass))
}

fn sweep(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = dataset_for(cfg)?;
    let rows = temperature_sweep(&cfg.sweep, &cfg.recipe_for(ProtocolName::SghmcMulti), &data, cfg.seed)?;
    let table = cfg.report_dir("sweep").join("sweep.csv");
    write_csv(&table, &rows)?;
    Ok(vec![table])
}
