//! Run configuration: one JSON document covering data, training, sampling
//! and evaluation, with every field defaulted.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sbdm_core::cohort::{generate_synthetic_cohort, load_cohort, split_cohort, Cohort, Splits, SyntheticConfig};
use sbdm_core::evalx::GroupBy;
use sbdm_core::sampler::SampleConfig;
use sbdm_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every component.
    pub seed: Option<u64>,
    pub workers: usize,
    /// Cohort manifest; a synthetic cohort is generated when absent.
    pub cohort: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub group_by: GroupBy,
    pub baselines: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            group_by: GroupBy::FollowUp,
            baselines: vec!["linreg".into(), "zero".into()],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: 1,
            cohort: None,
            synthetic: SyntheticConfig::default(),
            split: [0.7, 0.1, 0.2],
            split_seed: 0,
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const RESOLVED_NAME: &str = "run_config.json";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| sbdm_core::Error::Schema {
            field: path.display().to_string(),
            msg: e.to_string(),
        })?;
        // Relative cohort paths are relative to the config file.
        if let (Some(c), Some(dir)) = (&cfg.cohort, path.parent()) {
            if c.is_relative() {
                cfg.cohort = Some(dir.join(c));
            }
        }
        Ok(cfg)
    }

    /// Applies `seed` to every component and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            self.synthetic.seed = s;
            self.split_seed = s;
            self.train.seed = s;
            self.sample.seed = s;
        }
        if self.workers == 0 {
            return Err(sbdm_core::Error::range("workers", 0, ">= 1").into());
        }
        self.synthetic.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        for b in &self.eval.baselines {
            if b != "linreg" && b != "zero" {
                return Err(sbdm_core::Error::range("baseline", b, "linreg or zero").into());
            }
        }
        Ok(self)
    }

    pub fn cohort(&self) -> Result<Cohort> {
        Ok(match &self.cohort {
            Some(p) => load_cohort(p)?,
            None => generate_synthetic_cohort(&self.synthetic)?,
        })
    }

    pub fn splits(&self, cohort: &Cohort) -> Result<Splits> {
        Ok(split_cohort(cohort, self.split, self.split_seed)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
