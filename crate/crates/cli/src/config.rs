use std::path::{Path, PathBuf};

use hmcseg::energy::EnergyConfig;
use hmcseg::failure::FailureConfig;
use hmcseg::model::ModelConfig;
use hmcseg::protocol::{recipe, ChainRecipe, ProtocolName, ProtocolSpec, SweepConfig};
use hmcseg::sampler::SamplerConfig;
use hmcseg::synth::{AugmentConfig, Counts, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Everything a command needs. Every field has a default and unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub energy: EnergyConfig,
    pub sampler: SamplerConfig,
    pub protocol: ProtocolSpec,
    pub scene: SceneConfig,
    pub counts: Counts,
    pub augment: AugmentConfig,
    pub sweep: SweepConfig,
    pub failure: FailureConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("run"),
            model: ModelConfig::default(),
            energy: EnergyConfig::default(),
            sampler: SamplerConfig::default(),
            protocol: ProtocolSpec::default(),
            scene: SceneConfig::default(),
            counts: Counts::default(),
            augment: AugmentConfig::default(),
            sweep: SweepConfig::default(),
            failure: FailureConfig::default(),
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub protocol: Option<ProtocolName>,
    pub temperature: Option<f64>,
    pub samples: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out.clone_from(p);
        }
        if let Some(p) = o.protocol {
            self.protocol.name = p;
        }
        if let Some(t) = o.temperature {
            self.energy.temperature = t;
        }
        if let Some(m) = o.samples {
            self.protocol.samples = m;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.energy.validate()?;
        self.sampler.validate()?;
        self.scene.validate()?;
        if self.protocol.samples == 0 {
            return Err(CliError::Validation("protocol.samples must be at least 1".into()));
        }
        if self.protocol.name == ProtocolName::DeepEnsembles && self.protocol.members == 0 {
            return Err(CliError::Validation("protocol.members must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.protocol.mc_dropout_p) {
            return Err(CliError::Validation(format!(
                "protocol.mc_dropout_p {} not in [0, 1)",
                self.protocol.mc_dropout_p
            )));
        }
        if self.model.classes != hmcseg::synth::CLASSES {
            return Err(CliError::Validation(format!(
                "model.classes {} but the scenes have {} classes",
                self.model.classes,
                hmcseg::synth::CLASSES
            )));
        }
        Ok(())
    }

    /// Chain configuration of the protocol `name`.
    pub fn recipe_for(&self, name: ProtocolName) -> ChainRecipe {
        let spec = self.spec_for(name);
        recipe(&spec, &self.model, &self.sampler, &self.energy, &self.augment)
    }

    pub fn spec_for(&self, name: ProtocolName) -> ProtocolSpec {
        ProtocolSpec {
            name,
            ..self.protocol.clone()
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.out.join("data").join("dataset.json")
    }

    pub fn run_dir(&self, name: ProtocolName) -> PathBuf {
        self.out.join("runs").join(name.as_str())
    }

    pub fn report_dir(&self, kind: &str) -> PathBuf {
        self.out.join("reports").join(kind)
    }
}
