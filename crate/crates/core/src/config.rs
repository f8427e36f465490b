//! Flat `key = value` chain configuration (TOML syntax).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circular::DiscreteCircle;
use crate::error::{Error, Result};
use crate::gibbs::{ChainConfig, EmissionPriors};
use crate::hdp::{GammaPrior, HyperPriors};

/// Every key is optional; missing keys take the defaults of
/// [`ChainConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub init_states: usize,
    pub max_extensions: usize,
    pub a_y: f64,
    pub b_y: f64,
    pub c_y: f64,
    pub a_x: f64,
    pub b_x: f64,
    pub lambda_max: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ChainConfig::default().into()
    }
}

impl From<ChainConfig> for ConfigFile {
    fn from(c: ChainConfig) -> Self {
        Self {
            n_iter: c.n_iter,
            burn_in: c.burn_in,
            thin: c.thin,
            seed: c.seed,
            grid_points: c.circle.points(),
            init_states: c.init_states,
            max_extensions: c.max_extensions,
            a_y: c.priors.a_y,
            b_y: c.priors.b_y,
            c_y: c.priors.c_y,
            a_x: c.priors.a_x,
            b_x: c.priors.b_x,
            lambda_max: c.priors.lambda_max,
            gamma_shape: c.hyper.gamma.shape,
            gamma_rate: c.hyper.gamma.rate,
            tau_shape: c.hyper.tau.shape,
            tau_rate: c.hyper.tau.rate,
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat numeric config serializes")
    }

    pub fn chain_config(&self) -> Result<ChainConfig> {
        let config = ChainConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            priors: EmissionPriors {
                a_y: self.a_y,
                b_y: self.b_y,
                c_y: self.c_y,
                a_x: self.a_x,
                b_x: self.b_x,
                lambda_max: self.lambda_max,
            },
            hyper: HyperPriors {
                gamma: GammaPrior::new(self.gamma_shape, self.gamma_rate)?,
                tau: GammaPrior::new(self.tau_shape, self.tau_rate)?,
            },
            circle: DiscreteCircle::new(self.grid_points)?,
            init_states: self.init_states,
            max_extensions: self.max_extensions,
        };
        config.validate()?;
        Ok(config)
    }
}
