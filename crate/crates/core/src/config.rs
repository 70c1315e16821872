//! Declarative model structure: which covariates enter which equation, which
//! random components are active, simulation settings and pinned parameters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CalendarBinning, Stakeholder, N_STAKEHOLDERS};
use crate::error::{Error, Result};

pub const DEFAULT_SEED: u64 = 20_240_917;
pub const DEFAULT_DRAWS: usize = 500;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationConfig {
    #[serde(default)]
    pub covariates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReversionConfig {
    /// When false, workshop effects persist unchanged and no reversion or rate parameters exist.
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub alpha_covariates: Vec<String>,
}

impl Default for ReversionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            covariates: Vec::new(),
            alpha_covariates: Vec::new(),
        }
    }
}

/// Either one switch for all five stakeholder effects or one per stakeholder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StakeholderToggle {
    All(bool),
    Each(BTreeMap<Stakeholder, bool>),
}

impl StakeholderToggle {
    pub fn is_on(&self, s: Stakeholder) -> bool {
        match self {
            StakeholderToggle::All(b) => *b,
            StakeholderToggle::Each(map) => map.get(&s).copied().unwrap_or(false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomConfig {
    #[serde(default)]
    pub sigma_rho: bool,
    #[serde(default)]
    pub sigma_alpha: bool,
    #[serde(default = "xi_default")]
    pub sigma_xi: StakeholderToggle,
    #[serde(default = "yes")]
    pub sigma_eta: bool,
}

impl Default for RandomConfig {
    fn default() -> Self {
        Self {
            sigma_rho: false,
            sigma_alpha: false,
            sigma_xi: xi_default(),
            sigma_eta: true,
        }
    }
}

impl RandomConfig {
    pub fn none() -> Self {
        Self {
            sigma_rho: false,
            sigma_alpha: false,
            sigma_xi: StakeholderToggle::All(false),
            sigma_eta: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateCoding {
    /// Declared levels; anything else found in the data is treated as missing.
    #[serde(default)]
    pub levels: Option<Vec<String>>,
    /// Reference level absorbed by the thresholds.
    #[serde(default)]
    pub base: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Overrides the horizon D (days).
    #[serde(default)]
    pub horizon_days: Option<u32>,
    /// Wave held constant for identification; defaults to the last wave.
    #[serde(default)]
    pub base_wave: Option<u32>,
    #[serde(default = "yes")]
    pub wave_effects: bool,
    #[serde(default)]
    pub calendar: CalendarBinning,
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateCoding>,
    #[serde(default)]
    pub equations: BTreeMap<Stakeholder, EquationConfig>,
    #[serde(default)]
    pub reversion: ReversionConfig,
    #[serde(default)]
    pub random: RandomConfig,
    /// Parameters pinned at a value and excluded from estimation, by name.
    #[serde(default)]
    pub fixed: BTreeMap<String, f64>,
}

fn yes() -> bool {
    true
}
fn xi_default() -> StakeholderToggle {
    StakeholderToggle::All(true)
}
fn default_draws() -> usize {
    DEFAULT_DRAWS
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            draws: DEFAULT_DRAWS,
            seed: DEFAULT_SEED,
            horizon_days: None,
            base_wave: None,
            wave_effects: true,
            calendar: CalendarBinning::Month,
            covariates: BTreeMap::new(),
            equations: BTreeMap::new(),
            reversion: ReversionConfig::default(),
            random: RandomConfig::default(),
            fixed: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::Config("draws must be at least 1".into()));
        }
        if self.horizon_days == Some(0) {
            return Err(Error::Config("horizon_days must be positive".into()));
        }
        if let Some(name) = self.fixed.keys().find(|k| k.starts_with("tau.")) {
            return Err(Error::Config(format!("thresholds cannot be fixed (`{name}`)")));
        }
        Ok(())
    }

    pub fn equation_covariates(&self, s: Stakeholder) -> &[String] {
        self.equations
            .get(&s)
            .map(|e| e.covariates.as_slice())
            .unwrap_or(&[])
    }

    /// Every covariate referenced anywhere in the model, deduplicated in first-use order.
    pub fn referenced_covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let lists = Stakeholder::ALL
            .iter()
            .map(|s| self.equation_covariates(*s))
            .chain([self.reversion.covariates.as_slice(), self.reversion.alpha_covariates.as_slice()]);
        for list in lists {
            for name in list {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
        }
        out
    }

    /// Pins every active standard deviation at `value`.
    pub fn fix_sigmas(&mut self, value: f64) {
        let mut names = Vec::new();
        if self.reversion.enabled && self.random.sigma_rho {
            names.push("sigma.rho".to_string());
        }
        if self.reversion.enabled && self.random.sigma_alpha {
            names.push("sigma.alpha".to_string());
        }
        if self.random.sigma_eta {
            names.push("sigma.eta".to_string());
        }
        names.extend(
            Stakeholder::ALL
                .iter()
                .filter(|s| self.random.sigma_xi.is_on(**s))
                .map(|s| format!("sigma.xi.{s}")),
        );
        for n in names {
            self.fixed.insert(n, value);
        }
    }

    pub fn xi_active(&self) -> [bool; N_STAKEHOLDERS] {
        Stakeholder::ALL.map(|s| self.random.sigma_xi.is_on(s))
    }
}
