//! Run configuration: one TOML file with a table per stage. Every field has a
//! default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::langae::LangAeTrainConfig;
use crate::seed::DenoiserTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub steps: Vec<usize>,
    pub channels: usize,
    pub state: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4096, 16384, 65536, 262144],
            steps: vec![1, 2],
            channels: 4,
            state: 8,
            reps: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DatasetConfig,
    pub langae: LangAeTrainConfig,
    pub denoiser: DenoiserTrainConfig,
    pub bench: BenchConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Range checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let d = &self.data;
        if !(d.dose > 0.0 && d.dose <= 1.0) {
            return bad("data.dose must lie in (0, 1]");
        }
        if !(crate::data::MIN_SIZE..=crate::data::MAX_SIZE).contains(&d.size) || d.size % 8 != 0 {
            return bad("data.size must be a multiple of 8 in 64..=512");
        }
        for (name, steps, batch, lo, hi) in [
            ("langae", self.langae.steps, self.langae.batch_size, self.langae.lr_min, self.langae.lr_max),
            ("denoiser", self.denoiser.steps, self.denoiser.batch_size, self.denoiser.lr_min, self.denoiser.lr_max),
        ] {
            if steps == 0 || batch == 0 {
                return bad(&format!("{name}.steps and {name}.batch_size must be positive"));
            }
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return bad(&format!("{name} learning rates need 0 <= lr_min <= lr_max"));
            }
        }
        let t = self.langae.model.thresholds;
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("langae.model.thresholds must lie in [0, 1]");
        }
        if self.langae.model.vocab == 0 || self.langae.model.embed_dim == 0 {
            return bad("langae.model.vocab and embed_dim must be positive");
        }
        if !(self.denoiser.model.lambda >= 0.0 && self.denoiser.model.lambda.is_finite()) {
            return bad("denoiser.model.lambda must be a non-negative number");
        }
        if self.denoiser.model.block.step == 0 {
            return bad("denoiser.model.block.step must be positive");
        }
        Ok(())
    }
}
