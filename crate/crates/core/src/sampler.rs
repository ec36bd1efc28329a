//! Cyclical SGHMC: learning-rate schedule, the momentum update, the chain
//! driver and thinned checkpoint collection.
//!
//! The update uses the temperature-scaled momentum `r`:
//!
//! ```text
//! r <- (1 - mu) r - eta g + sqrt(2 eta mu T) xi
//! w <- w + r
//! ```
//!
//! At `T = 0` the noise term is skipped entirely, so the chain is exactly
//! SGD with momentum `1 - mu`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::energy::{minibatch_gradient, EnergyConfig};
use crate::error::{Error, Result};
use crate::model::{Model, WeightVector};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::synth::{augment, AugmentConfig, Sample};
use crate::tensor::{DropoutMode, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub epochs: usize,
    pub cycles: usize,
    /// Fraction of each cycle before checkpoints are collected.
    pub burn_in: f64,
    pub eta0: f64,
    pub eta_restart: f64,
    pub restart_epochs: usize,
    pub friction: f64,
    /// Checkpoint every `stride` epochs after burn-in.
    pub stride: usize,
    /// Overrides the schedule with a constant learning rate.
    pub constant_lr: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SamplerConfig {
    /// 1000 epochs, 3 cycles, collection every 4th epoch.
    pub fn paper() -> Self {
        Self {
            epochs: 1000,
            cycles: 3,
            burn_in: 0.6,
            eta0: 0.02,
            eta_restart: 0.2,
            restart_epochs: 10,
            friction: 0.01,
            stride: 4,
            constant_lr: None,
        }
    }

    /// 120 epochs, 3 cycles of 40, collection every 2nd epoch (8 per cycle).
    pub fn desk() -> Self {
        Self {
            epochs: 120,
            restart_epochs: 4,
            stride: 2,
            ..Self::paper()
        }
    }

    pub fn cycle_len(&self) -> usize {
        self.epochs / self.cycles.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.cycles == 0 || self.epochs < self.cycles {
            return bad(format!("{} epochs cannot hold {} cycles", self.epochs, self.cycles));
        }
        if !(self.burn_in > 0.0 && self.burn_in < 1.0) {
            return bad(format!("burn-in fraction {} not in (0, 1)", self.burn_in));
        }
        if (self.restart_epochs as f64) >= self.burn_in * self.cycle_len() as f64 {
            return bad(format!("restart epochs {} reach past burn-in", self.restart_epochs));
        }
        if !(self.eta0 > 0.0 && self.eta_restart >= self.eta0) {
            return bad(format!("need 0 < eta0 <= eta_restart, got {} / {}", self.eta0, self.eta_restart));
        }
        if !(self.friction > 0.0 && self.friction < 1.0) {
            return bad(format!("friction {} not in (0, 1)", self.friction));
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        if let Some(lr) = self.constant_lr {
            if !(lr > 0.0) {
                return bad(format!("constant learning rate {lr} must be positive"));
            }
        }
        Ok(())
    }
}

/// Learning rate at epoch `epoch`: `eta_restart` for the first
/// `restart_epochs` of every cycle, then a polynomial decay that freezes once
/// the burn-in fraction is reached.
pub fn lr_schedule(epoch: usize, cfg: &SamplerConfig) -> f64 {
    if let Some(lr) = cfg.constant_lr {
        return lr;
    }
    let tc_len = cfg.cycle_len() as f64;
    let tc = (epoch % cfg.cycle_len()) as f64;
    if tc < cfg.restart_epochs as f64 {
        cfg.eta_restart
    } else {
        cfg.eta0 * (1.0 - tc.min(cfg.burn_in * tc_len) / tc_len).powf(0.9)
    }
}

fn past_burn_in(epoch: usize, cfg: &SamplerConfig) -> bool {
    (epoch % cfg.cycle_len()) as f64 >= cfg.burn_in * cfg.cycle_len() as f64 - 1e-9
}

/// Whether a checkpoint is stored at the end of `epoch`.
pub fn is_checkpoint_epoch(epoch: usize, cfg: &SamplerConfig) -> bool {
    epoch < cfg.epochs && past_burn_in(epoch, cfg) && epoch % cfg.stride == 0
}

pub fn checkpoint_epochs(cfg: &SamplerConfig) -> Vec<usize> {
    (0..cfg.epochs).filter(|&e| is_checkpoint_epoch(e, cfg)).collect()
}

pub fn cycle_of(epoch: usize, cfg: &SamplerConfig) -> usize {
    epoch / cfg.cycle_len()
}

/// One SGHMC step in place. Noise is drawn only when `temperature > 0`.
pub fn sghmc_step<S: Scalar>(
    w: &mut [S],
    r: &mut [S],
    g: &[S],
    eta: f64,
    friction: f64,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    assert_eq!(w.len(), r.len(), "momentum layout");
    assert_eq!(w.len(), g.len(), "gradient layout");
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("gradient entry {i}"),
        });
    }
    let keep = S::lit(1.0 - friction);
    let step = S::lit(eta);
    if temperature > 0.0 {
        let sd = (2.0 * eta * friction * temperature).sqrt();
        for ((wi, ri), &gi) in w.iter_mut().zip(r.iter_mut()).zip(g) {
            let xi: f64 = StandardNormal.sample(rng);
            *ri = keep * *ri - step * gi + S::lit(sd * xi);
            *wi = *wi + *ri;
        }
    } else {
        for ((wi, ri), &gi) in w.iter_mut().zip(r.iter_mut()).zip(g) {
            *ri = keep * *ri - step * gi;
            *wi = *wi + *ri;
        }
    }
    Ok(())
}

/// Position, momentum and clock of a running chain.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub w: WeightVector,
    pub r: Vec<f32>,
    pub epoch: usize,
    pub cycle: usize,
    pub noise_rng: StreamRng,
}

impl ChainState {
    pub fn new(w: WeightVector, seed: u64) -> Self {
        let r = vec![0.0; w.len()];
        Self {
            w,
            r,
            epoch: 0,
            cycle: 0,
            noise_rng: stream(seed, "noise", 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub cycle: usize,
    pub eta: f64,
    pub weights: WeightVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointStore {
    pub config: SamplerConfig,
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckpointStore {
    pub fn new(config: SamplerConfig) -> Self {
        Self {
            config,
            checkpoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn cycles(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.checkpoints.iter().map(|k| k.cycle).collect();
        c.dedup();
        c
    }

    /// Checkpoints of the last cycle present.
    pub fn last_cycle(&self) -> Self {
        let last = self.checkpoints.last().map(|c| c.cycle);
        Self {
            config: self.config.clone(),
            checkpoints: self
                .checkpoints
                .iter()
                .filter(|c| Some(c.cycle) == last)
                .cloned()
                .collect(),
        }
    }

    pub fn weights(&self) -> Vec<WeightVector> {
        self.checkpoints.iter().map(|c| c.weights.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    Last,
    Even,
}

/// Indices of `m` checkpoints spread evenly over `n`, always including the
/// last one.
fn spread(n: usize, m: usize) -> Vec<usize> {
    match m {
        0 => vec![],
        1 => vec![n - 1],
        _ => (0..m)
            .map(|j| ((j * (n - 1)) as f64 / (m - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Indices into `store.checkpoints` chosen by `select_samples`.
pub fn select_indices(store: &CheckpointStore, m: usize, mode: Selection) -> Result<Vec<usize>> {
    let n = store.len();
    if n == 0 {
        return Err(Error::Empty("checkpoint store is empty".into()));
    }
    if m >= n {
        if m > n {
            log::warn!("requested {m} samples from a store of {n}; returning all");
        }
        return Ok((0..n).collect());
    }
    Ok(match mode {
        Selection::Last => (n - m..n).collect(),
        Selection::Even => {
            // group by cycle, share the budget evenly, hand leftovers to
            // cycles with spare checkpoints
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for (i, c) in store.checkpoints.iter().enumerate() {
                match groups.last_mut() {
                    Some((cy, v)) if *cy == c.cycle => v.push(i),
                    _ => groups.push((c.cycle, vec![i])),
                }
            }
            let k = groups.len();
            let mut quota: Vec<usize> = groups.iter().map(|(_, v)| (m / k).min(v.len())).collect();
            let mut left = m - quota.iter().sum::<usize>();
            while left > 0 {
                for (q, (_, v)) in quota.iter_mut().zip(&groups).rev() {
                    if left > 0 && *q < v.len() {
                        *q += 1;
                        left -= 1;
                    }
                }
            }
            groups
                .iter()
                .zip(quota)
                .flat_map(|((_, v), q)| spread(v.len(), q).into_iter().map(|j| v[j]).collect::<Vec<_>>())
                .collect()
        }
    })
}

pub fn select_samples(store: &CheckpointStore, m: usize, mode: Selection) -> Result<Vec<WeightVector>> {
    Ok(select_indices(store, m, mode)?
        .into_iter()
        .map(|i| store.checkpoints[i].weights.clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cycle: usize,
    pub eta: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct ChainRun {
    pub store: CheckpointStore,
    pub final_weights: WeightVector,
    pub log: Vec<EpochRecord>,
}

/// Everything a chain needs besides the data and the initial weights.
#[derive(Clone, Debug)]
pub struct ChainSpec<'a> {
    pub sampler: &'a SamplerConfig,
    pub energy: &'a EnergyConfig,
    pub augment: &'a AugmentConfig,
    /// Sample dropout masks during training.
    pub train_dropout: bool,
    pub seed: u64,
}

/// Loss ratio and patience of the divergence guard.
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 3;

/// Runs the chain for `sampler.epochs` epochs from `init`.
///
/// The loss can be negative (soft Dice lies in `[-C, 0]`), so the divergence
/// guard compares `loss + C` against its first-epoch value.
pub fn run_chain(model: &Model, init: WeightVector, data: &[Sample], spec: &ChainSpec<'_>) -> Result<ChainRun> {
    run_chain_with(model, init, data, spec, |_| {})
}

/// [`run_chain`] with a callback after every epoch.
pub fn run_chain_with(
    model: &Model,
    init: WeightVector,
    data: &[Sample],
    spec: &ChainSpec<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ChainRun> {
    let cfg = spec.sampler;
    cfg.validate()?;
    spec.energy.validate()?;
    model.check_layout(&init)?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let batch_size = spec.energy.batch_size.min(data.len());
    let shift = model.config().classes as f64;
    let mut state = ChainState::new(init, spec.seed);
    let mut store = CheckpointStore::new(cfg.clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut baseline = None;
    let mut strikes = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let eta = lr_schedule(epoch, cfg);
        state.epoch = epoch;
        state.cycle = cycle_of(epoch, cfg);
        order.shuffle(&mut stream(spec.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let mut aug_rng = stream(spec.seed, "augment", step);
            let batch: Vec<Sample> = chunk.iter().map(|&i| augment(&data[i], spec.augment, &mut aug_rng)).collect();
            let dropout = if spec.train_dropout {
                DropoutMode::Sample {
                    seed: derive_seed(spec.seed, "dropout", step),
                }
            } else {
                DropoutMode::Off
            };
            let bg = minibatch_gradient::<f32>(model, &state.w, &batch, spec.energy.lambda, dropout).map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    epoch,
                    reason: format!("non-finite value in {op}"),
                },
                e => e,
            })?;
            if !bg.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite loss {}", bg.loss),
                });
            }
            sghmc_step(
                state.w.values_mut(),
                &mut state.r,
                &bg.gradient,
                eta,
                cfg.friction,
                spec.energy.temperature,
                &mut state.noise_rng,
            )
            .map_err(|e| Error::Divergence {
                epoch,
                reason: e.to_string(),
            })?;
            loss_sum += bg.loss;
            batches += 1;
            step += 1;
        }
        let mean_loss = loss_sum / batches as f64;
        let shifted = mean_loss + shift;
        match baseline {
            None => baseline = Some(shifted.max(f64::MIN_POSITIVE)),
            Some(b) if shifted > DIVERGENCE_FACTOR * b => {
                strikes += 1;
                if strikes >= DIVERGENCE_PATIENCE {
                    return Err(Error::Divergence {
                        epoch,
                        reason: format!("loss {mean_loss:.4} above {DIVERGENCE_FACTOR}x its initial value"),
                    });
                }
            }
            Some(_) => strikes = 0,
        }
        let rec = EpochRecord {
            epoch,
            cycle: state.cycle,
            eta,
            mean_loss,
        };
        on_epoch(&rec);
        log.push(rec);
        if is_checkpoint_epoch(epoch, cfg) {
            store.checkpoints.push(Checkpoint {
                epoch,
                cycle: state.cycle,
                eta,
                weights: state.w.clone(),
            });
        }
    }
    Ok(ChainRun {
        store,
        final_weights: state.w,
        log,
    })
}
