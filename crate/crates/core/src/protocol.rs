//! Named experiment recipes (vanilla, MC-Dropout, Deep Ensembles, SGD-Const,
//! SGHMC single/multi), their evaluation, and the temperature/prior sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diversity::{diversity_confusion, explored_volume, FunctionalReport};
use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::inference::{argmax_segmentation, mean_maps, LabelMap, ProbabilityMap};
use crate::metrics::{calibration, dice, mean_std, CalibrationAccumulator, CalibrationReport, DEFAULT_BINS};
use crate::model::{build_architecture, init_weights, Model, ModelConfig, WeightVector};
use crate::rng::derive_seed;
use crate::sampler::{run_chain, select_samples, ChainRun, ChainSpec, CheckpointStore, SamplerConfig, Selection};
use crate::synth::{AugmentConfig, Dataset, Sample};
use crate::tensor::DropoutMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolName {
    Vanilla,
    McDropout,
    DeepEnsembles,
    SgdConst,
    SghmcSingle,
    SghmcMulti,
}

impl ProtocolName {
    pub const ALL: [ProtocolName; 6] = [
        ProtocolName::Vanilla,
        ProtocolName::McDropout,
        ProtocolName::DeepEnsembles,
        ProtocolName::SgdConst,
        ProtocolName::SghmcSingle,
        ProtocolName::SghmcMulti,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolName::Vanilla => "vanilla",
            ProtocolName::McDropout => "mc-dropout",
            ProtocolName::DeepEnsembles => "deep-ensembles",
            ProtocolName::SgdConst => "sgd-const",
            ProtocolName::SghmcSingle => "sghmc-single",
            ProtocolName::SghmcMulti => "sghmc-multi",
        }
    }
}

impl std::str::FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown protocol `{s}`")))
    }
}

impl std::fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub name: ProtocolName,
    /// Deep-Ensembles member count.
    pub members: usize,
    /// Dropout rate used by the MC-Dropout recipe.
    pub mc_dropout_p: f64,
    /// Forward passes (MC-Dropout) or weight samples (chains) at test time.
    pub samples: usize,
    pub selection: Selection,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            name: ProtocolName::SghmcMulti,
            members: 5,
            mc_dropout_p: 0.5,
            samples: 16,
            selection: Selection::Even,
        }
    }
}

/// Configuration of one training chain after applying a recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecipe {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub energy: EnergyConfig,
    pub augment: AugmentConfig,
    pub train_dropout: bool,
}

/// Derives the per-chain configuration of `spec` from the base configs.
pub fn recipe(
    spec: &ProtocolSpec,
    model: &ModelConfig,
    sampler: &SamplerConfig,
    energy: &EnergyConfig,
    augment: &AugmentConfig,
) -> ChainRecipe {
    let mut r = ChainRecipe {
        model: ModelConfig {
            dropout_p: 0.0,
            ..model.clone()
        },
        sampler: sampler.clone(),
        energy: energy.clone(),
        augment: augment.clone(),
        train_dropout: false,
    };
    let single_cycle_sgd = |r: &mut ChainRecipe| {
        r.energy.temperature = 0.0;
        r.sampler.cycles = 1;
    };
    match spec.name {
        ProtocolName::Vanilla | ProtocolName::DeepEnsembles | ProtocolName::SgdConst => single_cycle_sgd(&mut r),
        ProtocolName::McDropout => {
            single_cycle_sgd(&mut r);
            r.model.dropout_p = spec.mc_dropout_p;
            r.train_dropout = spec.mc_dropout_p > 0.0;
        }
        ProtocolName::SghmcSingle | ProtocolName::SghmcMulti => {}
    }
    r
}

/// SHA-256 of the canonical JSON of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serialisable config");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// First eight bytes of [`config_hash`] as an integer.
pub fn config_hash_u64<T: Serialize>(value: &T) -> u64 {
    let json = serde_json::to_vec(value).expect("serialisable config");
    let d = Sha256::digest(&json);
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberProvenance {
    pub index: usize,
    pub chain_seed: u64,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub protocol: ProtocolName,
    pub seed: u64,
    pub config_hash: String,
    pub recipe: ChainRecipe,
    pub members: Vec<MemberProvenance>,
}

#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub spec: ProtocolSpec,
    pub model: Model,
    pub chains: Vec<ChainRun>,
    pub provenance: Provenance,
}

pub fn member_seeds(seed: u64, index: usize) -> MemberProvenance {
    MemberProvenance {
        index,
        chain_seed: derive_seed(seed, "chain", index as u64),
        init_seed: derive_seed(seed, "init", index as u64),
    }
}

/// Trains every chain of the recipe. Deep-Ensembles members run in parallel
/// with independent initialisations and data orders.
pub fn run_protocol(
    spec: &ProtocolSpec,
    recipe: &ChainRecipe,
    train: &[Sample],
    seed: u64,
) -> Result<ProtocolRun> {
    let model = build_architecture(&recipe.model)?;
    let count = if spec.name == ProtocolName::DeepEnsembles {
        spec.members.max(1)
    } else {
        1
    };
    let members: Vec<MemberProvenance> = (0..count).map(|k| member_seeds(seed, k)).collect();
    let chains = members
        .par_iter()
        .map(|m| {
            let spec = ChainSpec {
                sampler: &recipe.sampler,
                energy: &recipe.energy,
                augment: &recipe.augment,
                train_dropout: recipe.train_dropout,
                seed: m.chain_seed,
            };
            run_chain(&model, init_weights(&model, m.init_seed), train, &spec).map_err(|e| match e {
                Error::Divergence { epoch, reason } => Error::Divergence {
                    epoch,
                    reason: format!("member {}: {reason}", m.index),
                },
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolRun {
        spec: spec.clone(),
        provenance: Provenance {
            protocol: spec.name,
            seed,
            config_hash: config_hash(recipe),
            recipe: recipe.clone(),
            members,
        },
        model,
        chains,
    })
}

/// How test-time predictions are formed.
#[derive(Clone, Debug)]
pub enum Predictor {
    /// Probability average over weight samples.
    Ensemble(Vec<WeightVector>),
    /// Average over dropout passes of one network.
    McDropout { weights: WeightVector, passes: usize, seed: u64 },
}

impl Predictor {
    pub fn members(&self) -> usize {
        match self {
            Predictor::Ensemble(w) => w.len(),
            Predictor::McDropout { passes, .. } => *passes,
        }
    }
}

impl ProtocolRun {
    /// Store holding every checkpoint a recipe draws its samples from.
    pub fn sample_store(&self) -> CheckpointStore {
        let first = &self.chains[0];
        match self.spec.name {
            ProtocolName::SghmcSingle => first.store.last_cycle(),
            ProtocolName::SghmcMulti | ProtocolName::SgdConst => first.store.clone(),
            _ => {
                let mut s = CheckpointStore::new(first.store.config.clone());
                for c in &self.chains {
                    s.checkpoints.push(crate::sampler::Checkpoint {
                        epoch: c.store.config.epochs.saturating_sub(1),
                        cycle: 0,
                        eta: c.log.last().map_or(0.0, |l| l.eta),
                        weights: c.final_weights.clone(),
                    });
                }
                s
            }
        }
    }

    pub fn predictor(&self, samples: usize, seed: u64) -> Result<Predictor> {
        Ok(match self.spec.name {
            ProtocolName::McDropout => Predictor::McDropout {
                weights: self.chains[0].final_weights.clone(),
                passes: samples,
                seed: derive_seed(seed, "mc-dropout", 0),
            },
            ProtocolName::Vanilla | ProtocolName::DeepEnsembles => Predictor::Ensemble(self.sample_store().weights()),
            _ => Predictor::Ensemble(select_samples(&self.sample_store(), samples, self.spec.selection)?),
        })
    }
}

/// Per-member probability maps, `maps[member][image]`.
pub fn member_maps(model: &Model, predictor: &Predictor, images: &[Sample]) -> Result<Vec<Vec<ProbabilityMap>>> {
    match predictor {
        Predictor::Ensemble(ws) => ws
            .par_iter()
            .map(|w| {
                images
                    .iter()
                    .map(|s| model.predict(w, &s.image, DropoutMode::Off))
                    .collect()
            })
            .collect(),
        Predictor::McDropout { weights, passes, seed } => {
            if !model.has_dropout() {
                return Err(Error::InvalidConfig("model has no dropout layers".into()));
            }
            (0..*passes)
                .into_par_iter()
                .map(|k| {
                    images
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let mode = DropoutMode::Sample {
                                seed: derive_seed(derive_seed(*seed, "pass", k as u64), "image", i as u64),
                            };
                            model.predict(weights, &s.image, mode)
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Mean over members for every image.
pub fn ensemble_maps(members: &[Vec<ProbabilityMap>]) -> Result<Vec<ProbabilityMap>> {
    let images = members.first().map_or(0, Vec::len);
    (0..images)
        .map(|i| mean_maps(&members.iter().map(|m| m[i].clone()).collect::<Vec<_>>()))
        .collect()
}

/// Mean and population standard deviation over the images of a set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

/// Per-image metrics of a set, aggregated as mean and std over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub nll: Spread,
    pub ece: Spread,
    pub brier: Spread,
    /// Per image, the mean Dice over foreground classes.
    pub dice: Spread,
    /// Mean Dice of each foreground class.
    pub class_dice: Vec<f64>,
    /// Every voxel of the set in one report, for reliability diagrams.
    pub pooled: CalibrationReport,
}

pub fn set_metrics(maps: &[ProbabilityMap], samples: &[Sample]) -> Result<SetMetrics> {
    if maps.is_empty() || maps.len() != samples.len() {
        return Err(Error::InvalidConfig(format!(
            "{} maps for {} samples",
            maps.len(),
            samples.len()
        )));
    }
    let mut acc = CalibrationAccumulator::new(DEFAULT_BINS);
    let classes = maps[0].classes();
    let mut class_dice = vec![0.0; classes.saturating_sub(1)];
    let (mut nll, mut ece, mut brier, mut dsc) = (vec![], vec![], vec![], vec![]);
    for (m, s) in maps.iter().zip(samples) {
        acc.add(m, &s.label)?;
        let r = calibration(m, &s.label, DEFAULT_BINS)?;
        nll.push(r.nll);
        ece.push(r.ece);
        brier.push(r.brier);
        let pred = argmax_segmentation(m);
        let mut image_dice = 0.0;
        for c in 1..classes {
            let d = dice(&pred.mask(c), &s.label.mask(c))?;
            class_dice[c - 1] += d;
            image_dice += d;
        }
        dsc.push(image_dice / (classes - 1).max(1) as f64);
    }
    let n = maps.len() as f64;
    class_dice.iter_mut().for_each(|d| *d /= n);
    Ok(SetMetrics {
        nll: Spread::of(&nll),
        ece: Spread::of(&ece),
        brier: Spread::of(&brier),
        dice: Spread::of(&dsc),
        class_dice,
        pooled: acc.finish(),
    })
}

/// Functional diversity of the members on `samples`.
pub fn functional_diversity(members: &[Vec<ProbabilityMap>], samples: &[Sample]) -> Result<FunctionalReport> {
    let preds: Vec<Vec<LabelMap>> = members
        .iter()
        .map(|m| m.iter().map(argmax_segmentation).collect())
        .collect();
    let ens: Vec<LabelMap> = ensemble_maps(members)?.iter().map(argmax_segmentation).collect();
    let truth: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
    let classes = members[0][0].classes();
    diversity_confusion(&preds, &ens, &truth, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub temperatures: Vec<f64>,
    pub augmentation: Vec<bool>,
    /// Prior precisions to sweep; empty keeps the recipe's own value.
    pub lambdas: Vec<f64>,
    pub samples: usize,
    pub n_sigma: usize,
}

/// Prior axis for [`SweepConfig::lambdas`].
pub const PRIOR_AXIS: [f64; 3] = [3e-6, 3e-5, 3e-4];

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            temperatures: vec![0.0, 1e-6, 1e-5, 1e-4],
            augmentation: vec![true],
            lambdas: Vec::new(),
            samples: 16,
            n_sigma: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub augment: bool,
    pub lambda: f64,
    pub nll: f64,
    pub ece: f64,
    pub mean_dice: f64,
    pub functional_diversity: f64,
    pub explored_volume: f64,
}

/// One chain per `(T, augmentation, λ)` cell, all sharing the seed so that
/// cells differ only in the swept setting.
pub fn temperature_sweep(
    sweep: &SweepConfig,
    base: &ChainRecipe,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if sweep.temperatures.len() < 2 {
        return Err(Error::InvalidConfig("a sweep needs at least two temperatures".into()));
    }
    let lambdas = if sweep.lambdas.is_empty() {
        vec![base.energy.lambda]
    } else {
        sweep.lambdas.clone()
    };
    let mut cells = Vec::new();
    for &augment in &sweep.augmentation {
        for &lambda in &lambdas {
            for &t in &sweep.temperatures {
                cells.push((t, augment, lambda));
            }
        }
    }
    let spec = ProtocolSpec {
        name: ProtocolName::SghmcMulti,
        samples: sweep.samples,
        ..ProtocolSpec::default()
    };
    cells
        .par_iter()
        .map(|&(temperature, augment, lambda)| {
            let mut r = base.clone();
            r.energy.temperature = temperature;
            r.energy.lambda = lambda;
            r.augment.enabled = augment;
            let run = run_protocol(&spec, &r, &data.train, seed)?;
            let Predictor::Ensemble(ws) = run.predictor(sweep.samples, seed)? else {
                unreachable!("chain recipes predict with weight ensembles")
            };
            let predictor = Predictor::Ensemble(ws.clone());
            let test = member_maps(&run.model, &predictor, &data.test_in)?;
            let metrics = set_metrics(&ensemble_maps(&test)?, &data.test_in)?;
            let val = member_maps(&run.model, &predictor, &data.val)?;
            let diversity = functional_diversity(&val, &data.val).map_or(f64::NAN, |f| f.mean_pairwise);
            let volume = explored_volume(&ws, sweep.n_sigma.min(ws.len()))?.volume;
            Ok(SweepRow {
                temperature,
                augment,
                lambda,
                nll: metrics.nll.mean,
                ece: metrics.ece.mean,
                mean_dice: metrics.dice.mean,
                functional_diversity: diversity,
                explored_volume: volume,
            })
        })
        .collect()
}
