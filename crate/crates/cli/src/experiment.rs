//! Evaluation routines shared by the commands and the acceptance suite.

use hmcseg::diversity::{cosine_matrix, explored_volume, within_between_means};
use hmcseg::failure::{confidence_score, label_failure, roc_auc, spearman, FailureConfig, FailureRow};
use hmcseg::inference::{argmax_segmentation, entropy_map, EntropyMode, ProbabilityMap};
use hmcseg::metrics::{assd, dice, CalibrationBin};
use hmcseg::model::Model;
use hmcseg::protocol::{
    ensemble_maps, functional_diversity, member_maps, run_protocol, set_metrics, temperature_sweep, Predictor,
    ProtocolName, ProtocolRun, ProtocolSpec, SweepRow,
};
use hmcseg::sampler::CheckpointStore;
use hmcseg::synth::{Dataset, Sample};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliResult;

pub fn train(cfg: &RunConfig, data: &Dataset, name: ProtocolName) -> CliResult<ProtocolRun> {
    let spec = cfg.spec_for(name);
    Ok(run_protocol(&spec, &cfg.recipe_for(name), &data.train, cfg.seed)?)
}

/// The same chains read as another chain-based protocol (the single-cycle
/// view of a multi-cycle run).
pub fn view_as(run: &ProtocolRun, name: ProtocolName) -> ProtocolRun {
    ProtocolRun {
        spec: ProtocolSpec {
            name,
            ..run.spec.clone()
        },
        ..run.clone()
    }
}

/// Per-image metrics of the M-member prediction (mean and std over images)
/// next to the expected mean of a single member (averaged over members).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetCalibration {
    pub set: String,
    pub members: usize,
    pub nll: f64,
    pub nll_std: f64,
    pub ece: f64,
    pub ece_std: f64,
    pub brier: f64,
    pub brier_std: f64,
    pub dice: f64,
    pub dice_std: f64,
    pub single_nll: f64,
    pub single_ece: f64,
    pub single_brier: f64,
    pub single_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub set: String,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
}

pub fn test_sets(data: &Dataset) -> [(&'static str, &[Sample]); 2] {
    [("test_in", &data.test_in), ("test_shift", &data.test_shift)]
}

pub fn calibration(
    model: &Model,
    predictor: &Predictor,
    data: &Dataset,
) -> CliResult<(Vec<SetCalibration>, Vec<ReliabilityRow>)> {
    let mut rows = Vec::new();
    let mut bins = Vec::new();
    for (name, set) in test_sets(data) {
        let members = member_maps(model, predictor, set)?;
        let ens = set_metrics(&ensemble_maps(&members)?, set)?;
        let single = members
            .iter()
            .map(|m| set_metrics(m, set))
            .collect::<hmcseg::Result<Vec<_>>>()?;
        let k = single.len() as f64;
        let mean = |f: &dyn Fn(&hmcseg::protocol::SetMetrics) -> f64| single.iter().map(f).sum::<f64>() / k;
        rows.push(SetCalibration {
            set: name.into(),
            members: members.len(),
            nll: ens.nll.mean,
            nll_std: ens.nll.std,
            ece: ens.ece.mean,
            ece_std: ens.ece.std,
            brier: ens.brier.mean,
            brier_std: ens.brier.std,
            dice: ens.dice.mean,
            dice_std: ens.dice.std,
            single_nll: mean(&|m| m.nll.mean),
            single_ece: mean(&|m| m.ece.mean),
            single_brier: mean(&|m| m.brier.mean),
            single_dice: mean(&|m| m.dice.mean),
        });
        bins.extend(ens.pooled.bins.iter().map(|b: &CalibrationBin| ReliabilityRow {
            set: name.into(),
            lower: b.lower,
            upper: b.upper,
            count: b.count,
            mean_confidence: b.mean_confidence,
            mean_accuracy: b.mean_accuracy,
        }));
    }
    Ok((rows, bins))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSimilarity {
    pub checkpoints: usize,
    pub cycles: usize,
    pub within_cycle: f64,
    /// NaN with a single cycle.
    pub between_cycles: f64,
    pub matrix: Vec<Vec<f64>>,
}

/// Cosine similarity among all checkpoints of a store, split by cycle.
pub fn weight_similarity(store: &CheckpointStore) -> CliResult<WeightSimilarity> {
    let matrix = cosine_matrix(&store.weights())?;
    let groups: Vec<usize> = store.checkpoints.iter().map(|c| c.cycle).collect();
    let (within, between) = within_between_means(&matrix, &groups);
    Ok(WeightSimilarity {
        checkpoints: store.len(),
        cycles: store.cycles().len(),
        within_cycle: within,
        between_cycles: between,
        matrix,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversitySummary {
    pub members: usize,
    /// `None` for a single member.
    pub functional_mean: Option<f64>,
    pub explored_volume: Option<f64>,
    pub functional_matrix: Vec<Vec<f64>>,
    pub skipped_images: usize,
}

/// Functional diversity on the validation set and, for weight ensembles,
/// the explored volume of the selected samples.
pub fn diversity(model: &Model, predictor: &Predictor, data: &Dataset, n_sigma: usize) -> CliResult<DiversitySummary> {
    let maps = member_maps(model, predictor, &data.val)?;
    let f = if maps.len() >= 2 {
        Some(functional_diversity(&maps, &data.val)?)
    } else {
        None
    };
    let volume = match predictor {
        Predictor::Ensemble(ws) if ws.len() >= 2 => Some(explored_volume(ws, n_sigma.min(ws.len()))?.volume),
        _ => None,
    };
    Ok(DiversitySummary {
        members: predictor.members(),
        functional_mean: f.as_ref().map(|f| f.mean_pairwise),
        explored_volume: volume,
        skipped_images: f.as_ref().map_or(0, |f| f.skipped_images),
        functional_matrix: f.map(|f| f.matrix).unwrap_or_default(),
    })
}

/// Per-image, per-foreground-class rows for failure detection.
pub fn failure_rows(maps: &[ProbabilityMap], set: &[Sample], cfg: &FailureConfig) -> CliResult<Vec<FailureRow>> {
    let mut rows = Vec::new();
    for (i, (m, s)) in maps.iter().zip(set).enumerate() {
        let pred = argmax_segmentation(m);
        for c in 1..m.classes() {
            let h = entropy_map(m, EntropyMode::Binary { class: c })?.normalized(m.classes());
            let seg = pred.mask(c);
            let truth = s.label.mask(c);
            let conf = confidence_score(&seg, &h)?;
            let d = dice(&seg, &truth)?;
            let a = assd(&seg, &truth, [1.0, 1.0]).ok();
            rows.push(FailureRow {
                image: i,
                class: c,
                dice: d,
                assd: a,
                confidence: conf.score,
                degenerate_confidence: conf.degenerate,
                failure: label_failure(d, a, cfg),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub rows: usize,
    pub failures: usize,
    /// `None` when every row has the same outcome.
    pub auc: Option<f64>,
    pub spearman: Option<f64>,
}

pub fn pooled_failure_summary(rows: &[FailureRow]) -> FailureSummary {
    let conf: Vec<f64> = rows.iter().map(|r| r.confidence).collect();
    let fail: Vec<bool> = rows.iter().map(|r| r.failure).collect();
    let dsc: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    FailureSummary {
        rows: rows.len(),
        failures: fail.iter().filter(|&&f| f).count(),
        auc: roc_auc(&conf, &fail).ok().map(|r| r.auc),
        spearman: spearman(&conf, &dsc).ok().filter(|s| s.is_finite()),
    }
}

/// Failure rows of the ensemble prediction on the shifted test set.
pub fn shifted_failures(
    model: &Model,
    predictor: &Predictor,
    data: &Dataset,
    cfg: &FailureConfig,
) -> CliResult<Vec<FailureRow>> {
    let maps = ensemble_maps(&member_maps(model, predictor, &data.test_shift)?)?;
    failure_rows(&maps, &data.test_shift, cfg)
}

/// Measurements of one global seed behind the end-to-end trend checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub seed: u64,
    pub calibration: Vec<SetCalibration>,
    pub functional_multi: f64,
    pub functional_single: f64,
    pub functional_mc_dropout: f64,
    pub similarity_within: f64,
    pub similarity_between: f64,
    pub failure: FailureSummary,
    pub sweep: Vec<SweepRow>,
}

/// Trains SGHMC-Multi and MC-Dropout for `cfg.seed` and measures every
/// trend; the temperature sweep is skipped unless `with_sweep`.
pub fn trend_report(cfg: &RunConfig, data: &Dataset, with_sweep: bool) -> CliResult<TrendReport> {
    let m = cfg.protocol.samples;
    let multi = train(cfg, data, ProtocolName::SghmcMulti)?;
    let multi_pred = multi.predictor(m, cfg.seed)?;
    let (calibration, _) = calibration(&multi.model, &multi_pred, data)?;
    let sim = weight_similarity(&multi.sample_store())?;
    let n_sigma = cfg.sweep.n_sigma;
    let functional = |run: &ProtocolRun, p: &Predictor| -> CliResult<f64> {
        Ok(diversity(&run.model, p, data, n_sigma)?.functional_mean.unwrap_or(0.0))
    };
    let functional_multi = functional(&multi, &multi_pred)?;
    let single = view_as(&multi, ProtocolName::SghmcSingle);
    let functional_single = functional(&single, &single.predictor(m, cfg.seed)?)?;
    let mcd = train(cfg, data, ProtocolName::McDropout)?;
    let functional_mc_dropout = functional(&mcd, &mcd.predictor(m, cfg.seed)?)?;
    let failure = pooled_failure_summary(&shifted_failures(&multi.model, &multi_pred, data, &cfg.failure)?);
    let sweep = if with_sweep {
        temperature_sweep(&cfg.sweep, &cfg.recipe_for(ProtocolName::SghmcMulti), data, cfg.seed)?
    } else {
        Vec::new()
    };
    Ok(TrendReport {
        seed: cfg.seed,
        calibration,
        functional_multi,
        functional_single,
        functional_mc_dropout,
        similarity_within: sim.within_cycle,
        similarity_between: sim.between_cycles,
        failure,
        sweep,
    })
}
