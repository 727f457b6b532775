//! Run configuration shared by the command line and the test harnesses.
//!
//! A config file is TOML with one optional table per stage; missing keys
//! take their defaults:
//!
//! ```toml
//! [env]
//! mode = "ac"
//!
//! [synthetic]
//! load_scale = 1.1
//!
//! [actions]
//! budget = 76
//!
//! [net]
//! trunk = [512, 256]
//!
//! [train]
//! episodes = 2000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chronics::SyntheticConfig;
use crate::env::EnvConfig;
use crate::evaluation::EWConfig;
use crate::imitation::ImitationConfig;
use crate::nn::{InitScheme, NetConfig};
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionConfig {
    /// Number of combined actions kept after ranking.
    pub budget: usize,
    /// Ranking states are taken every `state_stride` steps.
    pub state_stride: usize,
    pub state_offset: usize,
}

impl Default for ActionConfig {
    fn default() -> Self {
        ActionConfig {
            budget: 76,
            state_stride: 48,
            state_offset: 20,
        }
    }
}

/// Network sizes; input and output widths come from the grid and action space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSizes {
    pub trunk: Vec<usize>,
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for NetSizes {
    fn default() -> Self {
        NetSizes {
            trunk: vec![512, 256],
            head_hidden: 128,
            seed: 0,
        }
    }
}

impl NetSizes {
    pub fn build(&self, input_dim: usize, n_actions: usize) -> NetConfig {
        NetConfig {
            input_dim,
            trunk: self.trunk.clone(),
            head_hidden: self.head_hidden,
            n_actions,
            seed: self.seed,
            init: InitScheme::FanInUniform,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub synthetic: SyntheticConfig,
    pub actions: ActionConfig,
    pub imitation: ImitationConfig,
    pub net: NetSizes,
    pub train: TrainConfig,
    pub ew: EWConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
