//! On-disk datasets and trained runs.

use std::path::{Path, PathBuf};

use hmcseg::inference::LabelMap;
use hmcseg::model::build_architecture;
use hmcseg::protocol::{config_hash_u64, ProtocolName, ProtocolRun, Provenance};
use hmcseg::sampler::{Checkpoint, ChainRun, CheckpointStore, EpochRecord};
use hmcseg::synth::{generate_dataset, Counts, Dataset, Sample, SceneConfig};
use hmcseg::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_weights, save_checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
struct StoredSample {
    height: usize,
    width: usize,
    image: Vec<f32>,
    label: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct StoredDataset {
    scene: SceneConfig,
    seed: u64,
    shift_severity: Vec<f64>,
    train: Vec<StoredSample>,
    val: Vec<StoredSample>,
    test_in: Vec<StoredSample>,
    test_shift: Vec<StoredSample>,
}

fn pack(samples: &[Sample]) -> Vec<StoredSample> {
    samples
        .iter()
        .map(|s| StoredSample {
            height: s.height(),
            width: s.width(),
            image: s.image.data().to_vec(),
            label: s.label.data().iter().map(|&l| l as u8).collect(),
        })
        .collect()
}

fn unpack(stored: Vec<StoredSample>) -> CliResult<Vec<Sample>> {
    stored
        .into_iter()
        .map(|s| {
            Ok(Sample {
                image: Tensor::new(vec![1, s.height, s.width], s.image)?,
                label: LabelMap::new(vec![s.height, s.width], s.label.into_iter().map(usize::from).collect())?,
            })
        })
        .collect()
}

pub fn counts_of(d: &Dataset) -> Counts {
    Counts {
        train: d.train.len(),
        val: d.val.len(),
        test_in: d.test_in.len(),
        test_shift: d.test_shift.len(),
    }
}

pub fn save_dataset(path: &Path, d: &Dataset) -> CliResult<()> {
    let stored = StoredDataset {
        scene: d.scene.clone(),
        seed: d.seed,
        shift_severity: d.shift_severity.clone(),
        train: pack(&d.train),
        val: pack(&d.val),
        test_in: pack(&d.test_in),
        test_shift: pack(&d.test_shift),
    };
    write_bytes(path, &serde_json::to_vec(&stored)?)
}

pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let s: StoredDataset = serde_json::from_slice(&bytes)?;
    Ok(Dataset {
        scene: s.scene,
        seed: s.seed,
        shift_severity: s.shift_severity,
        train: unpack(s.train)?,
        val: unpack(s.val)?,
        test_in: unpack(s.test_in)?,
        test_shift: unpack(s.test_shift)?,
    })
}

/// The dataset written by `gen-data` if present, otherwise a fresh one.
/// A stored dataset generated from other settings is an error.
pub fn dataset_for(cfg: &RunConfig) -> CliResult<Dataset> {
    let path = cfg.data_path();
    if !path.exists() {
        log::info!("no dataset at {}; generating in memory", path.display());
        return Ok(generate_dataset(&cfg.scene, cfg.counts, cfg.seed)?);
    }
    let d = load_dataset(&path)?;
    if d.scene != cfg.scene || d.seed != cfg.seed || counts_of(&d) != cfg.counts {
        return Err(CliError::Validation(format!(
            "{} was generated with other scene settings, seed or counts; rerun gen-data",
            path.display()
        )));
    }
    Ok(d)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Chain metadata kept next to the checkpoint files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub protocol: hmcseg::protocol::ProtocolSpec,
    pub provenance: Provenance,
    pub chains: Vec<ChainManifest>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainManifest {
    pub checkpoints: Vec<String>,
    pub final_weights: String,
    pub schedule: Vec<EpochRecord>,
}

fn chain_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("chain-{k}"))
}

/// Writes every checkpoint of `run` under `root` and returns the manifest.
pub fn save_run(root: &Path, run: &ProtocolRun) -> CliResult<RunManifest> {
    let hash = config_hash_u64(&run.provenance.recipe.model);
    let energy = &run.provenance.recipe.energy;
    let mut chains = Vec::new();
    for (k, (chain, member)) in run.chains.iter().zip(&run.provenance.members).enumerate() {
        let dir = chain_dir(root, k);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let header = |epoch: usize, cycle: usize, eta: f64| CheckpointHeader {
            config_hash: hash,
            epoch: epoch as u64,
            cycle: cycle as u64,
            eta,
            temperature: energy.temperature,
            lambda: energy.lambda,
            seed: member.chain_seed,
        };
        let mut names = Vec::new();
        for c in &chain.store.checkpoints {
            let name = format!("chain-{k}/epoch-{:05}.sghc", c.epoch);
            save_checkpoint(&root.join(&name), &c.weights, &header(c.epoch, c.cycle, c.eta))?;
            names.push(name);
        }
        let last = chain.log.last();
        let final_name = format!("chain-{k}/final.sghc");
        save_checkpoint(
            &root.join(&final_name),
            &chain.final_weights,
            &header(
                last.map_or(0, |l| l.epoch),
                last.map_or(0, |l| l.cycle),
                last.map_or(0.0, |l| l.eta),
            ),
        )?;
        chains.push(ChainManifest {
            checkpoints: names,
            final_weights: final_name,
            schedule: chain.log.clone(),
        });
    }
    let manifest = RunManifest {
        protocol: run.spec.clone(),
        provenance: run.provenance.clone(),
        chains,
    };
    write_bytes(&root.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Rebuilds a trained run from the files written by [`save_run`].
pub fn load_run(root: &Path) -> CliResult<ProtocolRun> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "no trained run at {}; run `train` first",
            root.display()
        )));
    }
    let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let m: RunManifest = serde_json::from_slice(&bytes)?;
    let recipe = &m.provenance.recipe;
    let model = build_architecture(&recipe.model)?;
    let hash = config_hash_u64(&recipe.model);
    let mut chains = Vec::new();
    for c in &m.chains {
        let mut store = CheckpointStore::new(recipe.sampler.clone());
        for name in &c.checkpoints {
            let (h, w) = load_weights(&root.join(name), model.layout(), hash)?;
            store.checkpoints.push(Checkpoint {
                epoch: h.epoch as usize,
                cycle: h.cycle as usize,
                eta: h.eta,
                weights: w,
            });
        }
        let (_, final_weights) = load_weights(&root.join(&c.final_weights), model.layout(), hash)?;
        chains.push(ChainRun {
            store,
            final_weights,
            log: c.schedule.clone(),
        });
    }
    Ok(ProtocolRun {
        spec: m.protocol,
        model,
        chains,
        provenance: m.provenance,
    })
}

/// Loads the run of `name`, checking it was trained from the current
/// chain settings.
pub fn trained_run(cfg: &RunConfig, name: ProtocolName) -> CliResult<ProtocolRun> {
    let mut run = load_run(&cfg.run_dir(name))?;
    if run.provenance.recipe != cfg.recipe_for(name) || run.provenance.seed != cfg.seed {
        return Err(CliError::Validation(format!(
            "run in {} was trained with other settings; rerun train",
            cfg.run_dir(name).display()
        )));
    }
    // test-time settings come from the current config
    run.spec = cfg.spec_for(name);
    Ok(run)
}
