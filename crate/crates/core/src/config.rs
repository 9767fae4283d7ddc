//! Declarative run configuration (TOML or JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discover::{DiscoveryConfig, Variant, DEFAULT_TAU_L};
use crate::error::{RavlError, Result};
use crate::evalgen::{SuiteConfig, WorldSpec};
use crate::mitigate::{Mode, TrainConfig};

pub const ENV_OUT_DIR: &str = "RAVL_OUT_DIR";
pub const ENV_THREADS: &str = "RAVL_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSection {
    pub settings: usize,
    pub mitigation_threshold: f64,
    pub variants: Vec<Variant>,
    pub modes: Vec<Mode>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        let s = SuiteConfig::default();
        Self {
            settings: s.settings,
            mitigation_threshold: s.mitigation_threshold,
            variants: s.variants,
            modes: s.modes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub tau_l: f64,
    pub tau_eval: Vec<f64>,
    pub k: usize,
    /// Overrides the `[2|Y|, 5|Y|]` cluster-count sweep.
    pub sweep: Option<(usize, usize)>,
    pub clara_cap: usize,
    pub world: Option<WorldSpec>,
    pub train: TrainConfig,
    pub suite: Option<SuiteSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("ravl-out"),
            threads: None,
            tau_l: DEFAULT_TAU_L,
            tau_eval: vec![10.0, 20.0, 30.0, 40.0],
            k: 10,
            sweep: None,
            clara_cap: DiscoveryConfig::default().clara_cap,
            world: None,
            train: TrainConfig::default(),
            suite: None,
        }
    }
}

impl RunConfig {
    /// Defaults with every optional section filled in.
    pub fn with_sections() -> Self {
        Self { world: Some(WorldSpec::default()), suite: Some(SuiteSection::default()), ..Self::default() }
    }

    pub fn parse(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| RavlError::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| RavlError::Config(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RavlError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
    }

    /// Applies `RAVL_OUT_DIR` and `RAVL_THREADS` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = lookup(ENV_OUT_DIR).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
        if let Some(t) = lookup(ENV_THREADS).filter(|t| !t.is_empty()) {
            let n = t.parse().map_err(|_| RavlError::Config(format!("{ENV_THREADS} must be a positive integer")))?;
            self.threads = Some(n);
        }
        Ok(())
    }

    pub fn discovery(&self) -> DiscoveryConfig {
        DiscoveryConfig { tau_l: self.tau_l, sweep: self.sweep, seed: self.seed, clara_cap: self.clara_cap }
    }

    pub fn world(&self) -> Result<WorldSpec> {
        let mut w = self.world.clone().ok_or_else(|| RavlError::Config("missing [world] section".into()))?;
        w.seed = self.seed;
        Ok(w)
    }

    pub fn suite(&self) -> Result<SuiteConfig> {
        let s = self.suite.clone().ok_or_else(|| RavlError::Config("missing [suite] section".into()))?;
        Ok(SuiteConfig {
            world: self.world.clone().unwrap_or_default(),
            settings: s.settings,
            tau_eval: self.tau_eval.clone(),
            k: self.k,
            variants: s.variants,
            train: self.train.clone(),
            discovery: self.discovery(),
            mitigation_threshold: s.mitigation_threshold,
            modes: s.modes,
            seed: self.seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(RavlError::Config("k must be positive".into()));
        }
        if self.tau_eval.is_empty() {
            return Err(RavlError::Config("tau_eval grid is empty".into()));
        }
        if self.threads == Some(0) {
            return Err(RavlError::Config("threads must be positive".into()));
        }
        if let Some((lo, hi)) = self.sweep {
            if lo < 2 || lo > hi {
                return Err(RavlError::Config("sweep must satisfy 2 <= lo <= hi".into()));
            }
        }
        Ok(())
    }
}
