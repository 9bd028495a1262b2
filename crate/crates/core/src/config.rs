//! Run configuration: one TOML file with a section per component.
//!
//! ```toml
//! [env]
//! id = "point_mass_2d"
//!
//! [network]
//! hidden = [64, 64]
//!
//! [evolution]
//! population_size = 10
//! mode = "pderl"
//! frame_budget = 200000
//! seed = 0
//!
//! [run]
//! seeds = 5
//! out_dir = "runs/pderl"
//! ```
//!
//! Every field has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{BenchConfig, BenchError};
use crate::env::EnvId;
use crate::evolution::{EvolutionError, RunSetup};
use crate::evolution::EvolutionConfig;
use crate::operators::{CrossoverConfig, MutationConfig};
use crate::rl::RlConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] EvolutionError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("invalid run configuration: {0}")]
    Run(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub id: EnvId,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            id: EnvId::PointMass2d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Hidden widths shared by policies and critic.
    pub hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Repetitions; repetition `i` uses seed `evolution.seed + i`.
    pub seeds: usize,
    pub out_dir: PathBuf,
    /// Held-out episodes used to score the final champion.
    pub test_episodes: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: 1,
            out_dir: PathBuf::from("runs/default"),
            test_episodes: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSection,
    pub network: NetworkSection,
    pub evolution: EvolutionConfig,
    pub crossover: CrossoverConfig,
    pub mutation: MutationConfig,
    pub rl: RlConfig,
    pub bench: BenchConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            env: self.env.id,
            hidden: self.network.hidden.clone(),
            evolution: self.evolution.clone(),
            crossover: self.crossover.clone(),
            mutation: self.mutation.clone(),
            rl: self.rl.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.setup().validate()?;
        self.bench.validate()?;
        if self.run.seeds == 0 {
            return Err(ConfigError::Run("run.seeds must be positive".into()));
        }
        if self.run.test_episodes == 0 {
            return Err(ConfigError::Run("run.test_episodes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::Mode;

    #[test]
    fn defaults_follow_reference_values() {
        let c = RunConfig::default();
        assert_eq!(c.evolution.population_size, 10);
        assert_eq!(c.evolution.mutation_prob, 0.9);
        assert_eq!(c.evolution.memory_capacity, 8000);
        assert_eq!((c.rl.tau, c.rl.gamma), (0.001, 0.99));
        assert_eq!((c.rl.actor_lr, c.rl.critic_lr), (5e-5, 5e-4));
        assert_eq!((c.crossover.batch_size, c.crossover.epochs, c.crossover.learning_rate), (128, 12, 1e-3));
        assert_eq!(c.mutation.batch_size, 256);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let c = RunConfig::from_toml_str(
            "[evolution]\nmode = \"erl\"\npopulation_size = 6\n[env]\nid = \"pendulum_swing_up\"\n",
        )
        .unwrap();
        assert_eq!(c.evolution.mode, Mode::Erl);
        assert_eq!(c.evolution.population_size, 6);
        assert_eq!(c.env.id, EnvId::PendulumSwingUp);
        assert_eq!(c.evolution.elite_fraction, 0.2);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = RunConfig::from_toml_str("[evolution]\npopulation_sise = 3\n").unwrap_err();
        assert!(err.to_string().contains("population_sise"), "{err}");
        let err = RunConfig::from_toml_str("[evolutoin]\n").unwrap_err();
        assert!(err.to_string().contains("evolutoin"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let c = RunConfig::from_toml_str("[rl]\ngamma = 1.5\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("rl.gamma"));
        let c = RunConfig::from_toml_str("[evolution]\nsync_period = 0\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("evolution.sync_period"));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.evolution.seed = 42;
        c.mutation.sigma = 0.05;
        c.network.hidden = vec![16];
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
