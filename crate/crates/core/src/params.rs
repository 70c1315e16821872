//! Structured parameters and the map between them and the optimiser's free vector.
//!
//! Three representations are in play:
//! * the free vector the optimiser moves (threshold gaps on a log scale, signed σ's),
//! * the working vector, one slot per model parameter in reported units,
//! * [`ParameterVector`], the structured view of the working vector.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{Stakeholder, N_STAKEHOLDERS, N_THRESHOLDS, N_WORKSHOPS};
use crate::design::DesignMatrices;
use crate::error::{Error, Result};
use crate::model::check_thresholds;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub thresholds: [[f64; N_THRESHOLDS]; N_STAKEHOLDERS],
    pub workshop_effects: [[f64; N_WORKSHOPS]; N_STAKEHOLDERS],
    pub wave_shifts: [Vec<f64>; N_STAKEHOLDERS],
    pub demographic_effects: [Vec<f64>; N_STAKEHOLDERS],
    pub rho_base: f64,
    pub rho_effects: Vec<f64>,
    pub sigma_rho: f64,
    pub alpha_base: f64,
    pub alpha_effects: Vec<f64>,
    pub sigma_alpha: f64,
    pub sigma_xi: [f64; N_STAKEHOLDERS],
    pub sigma_eta: f64,
    pub calendar_effects: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Threshold { stakeholder: usize, k: usize },
    Workshop { stakeholder: usize, workshop: usize },
    Wave { stakeholder: usize, column: usize },
    Demographic { stakeholder: usize, column: usize },
    RhoBase,
    RhoEffect(usize),
    SigmaRho,
    AlphaBase,
    AlphaEffect(usize),
    SigmaAlpha,
    SigmaXi(usize),
    SigmaEta,
    Calendar(usize),
}

impl ParamKind {
    pub fn is_sigma(self) -> bool {
        matches!(
            self,
            ParamKind::SigmaRho | ParamKind::SigmaAlpha | ParamKind::SigmaXi(_) | ParamKind::SigmaEta
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
}

/// Substream keys of the random components, stable across model variants.
pub mod draw_keys {
    pub const RHO: u64 = 0;
    pub const ALPHA: u64 = 1;
    pub const XI0: u64 = 2;
    pub const ETA: u64 = 7;
}

/// Random component slots of the draw matrix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawSlots {
    pub rho: Option<usize>,
    pub alpha: Option<usize>,
    pub xi: [Option<usize>; N_STAKEHOLDERS],
    pub eta: Option<usize>,
    pub keys: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    free_slot: Vec<Option<usize>>,
    fixed_value: Vec<f64>,
    free_entries: Vec<usize>,
    pub tau: [usize; N_STAKEHOLDERS],
    pub beta: [usize; N_STAKEHOLDERS],
    pub wave: [usize; N_STAKEHOLDERS],
    pub n_wave: usize,
    pub gamma: [usize; N_STAKEHOLDERS],
    pub n_gamma: [usize; N_STAKEHOLDERS],
    pub rho_base: Option<usize>,
    pub rho_effects: usize,
    pub n_rho_effects: usize,
    pub sigma_rho: Option<usize>,
    pub alpha_base: Option<usize>,
    pub alpha_effects: usize,
    pub n_alpha_effects: usize,
    pub sigma_alpha: Option<usize>,
    pub sigma_xi: [Option<usize>; N_STAKEHOLDERS],
    pub sigma_eta: Option<usize>,
    pub calendar: usize,
    pub n_calendar: usize,
    pub draws: DrawSlots,
    pub horizon: f64,
}

struct Builder {
    entries: Vec<ParamEntry>,
}

impl Builder {
    fn push(&mut self, name: String, kind: ParamKind) -> usize {
        self.entries.push(ParamEntry { name, kind });
        self.entries.len() - 1
    }
}

impl ParamLayout {
    pub fn new(design: &DesignMatrices, config: &ModelConfig) -> Result<Self> {
        let mut b = Builder { entries: Vec::new() };
        let tau = Stakeholder::ALL.map(|s| {
            let first = b.entries.len();
            for k in 0..N_THRESHOLDS {
                b.push(format!("tau.{s}.{}", k + 1), ParamKind::Threshold { stakeholder: s.index(), k });
            }
            first
        });
        let beta = Stakeholder::ALL.map(|s| {
            let first = b.entries.len();
            for w in 0..N_WORKSHOPS {
                b.push(
                    format!("beta.{s}.w{}", w + 1),
                    ParamKind::Workshop { stakeholder: s.index(), workshop: w },
                );
            }
            first
        });
        let wave = Stakeholder::ALL.map(|s| {
            let first = b.entries.len();
            for (c, m) in design.wave_columns.iter().enumerate() {
                b.push(format!("wave.{s}.{m}"), ParamKind::Wave { stakeholder: s.index(), column: c });
            }
            first
        });
        let gamma = Stakeholder::ALL.map(|s| {
            let first = b.entries.len();
            for (c, col) in design.equation_columns[s.index()].iter().enumerate() {
                b.push(
                    format!("gamma.{s}.{col}"),
                    ParamKind::Demographic { stakeholder: s.index(), column: c },
                );
            }
            first
        });
        let reversion = config.reversion.enabled;
        let rho_base = reversion.then(|| b.push("rho.base".into(), ParamKind::RhoBase));
        let rho_effects = b.entries.len();
        let n_rho_effects = if reversion { design.reversion_columns.len() } else { 0 };
        if reversion {
            for (c, col) in design.reversion_columns.iter().enumerate() {
                b.push(format!("rho.{col}"), ParamKind::RhoEffect(c));
            }
        }
        let sigma_rho = (reversion && config.random.sigma_rho)
            .then(|| b.push("sigma.rho".into(), ParamKind::SigmaRho));
        let alpha_base = reversion.then(|| b.push("alpha.base".into(), ParamKind::AlphaBase));
        let alpha_effects = b.entries.len();
        let n_alpha_effects = if reversion { design.alpha_columns.len() } else { 0 };
        if reversion {
            for (c, col) in design.alpha_columns.iter().enumerate() {
                b.push(format!("alpha.{col}"), ParamKind::AlphaEffect(c));
            }
        }
        let sigma_alpha = (reversion && config.random.sigma_alpha)
            .then(|| b.push("sigma.alpha".into(), ParamKind::SigmaAlpha));
        let xi_on = config.xi_active();
        let sigma_xi = Stakeholder::ALL.map(|s| {
            xi_on[s.index()].then(|| b.push(format!("sigma.xi.{s}"), ParamKind::SigmaXi(s.index())))
        });
        let sigma_eta = config
            .random
            .sigma_eta
            .then(|| b.push("sigma.eta".into(), ParamKind::SigmaEta));
        let calendar = b.entries.len();
        let n_calendar = design.calendar_columns();
        for c in 0..n_calendar {
            b.push(format!("calendar.{}", design.calendar_labels[c + 1]), ParamKind::Calendar(c));
        }

        let entries = b.entries;
        for name in config.fixed.keys() {
            if !entries.iter().any(|e| &e.name == name) {
                return Err(Error::Config(format!("fixed parameter `{name}` is not part of the model")));
            }
        }
        let mut free_slot = Vec::with_capacity(entries.len());
        let mut fixed_value = Vec::with_capacity(entries.len());
        let mut free_entries = Vec::new();
        for (j, e) in entries.iter().enumerate() {
            match config.fixed.get(&e.name) {
                Some(v) => {
                    if e.kind.is_sigma() && *v < 0.0 {
                        return Err(Error::Config(format!("`{}` must be nonnegative", e.name)));
                    }
                    free_slot.push(None);
                    fixed_value.push(*v);
                }
                None => {
                    free_slot.push(Some(free_entries.len()));
                    fixed_value.push(0.0);
                    free_entries.push(j);
                }
            }
        }

        let mut draws = DrawSlots::default();
        let slot = |key: u64, on: bool, keys: &mut Vec<u64>| {
            on.then(|| {
                keys.push(key);
                keys.len() - 1
            })
        };
        let mut keys = Vec::new();
        draws.rho = slot(draw_keys::RHO, sigma_rho.is_some(), &mut keys);
        draws.alpha = slot(draw_keys::ALPHA, sigma_alpha.is_some(), &mut keys);
        for s in 0..N_STAKEHOLDERS {
            draws.xi[s] = slot(draw_keys::XI0 + s as u64, sigma_xi[s].is_some(), &mut keys);
        }
        draws.eta = slot(draw_keys::ETA, sigma_eta.is_some(), &mut keys);
        draws.keys = keys;

        Ok(Self {
            entries,
            free_slot,
            fixed_value,
            free_entries,
            tau,
            beta,
            wave,
            n_wave: design.wave_columns.len(),
            gamma,
            n_gamma: std::array::from_fn(|s| design.equation_columns[s].len()),
            rho_base,
            rho_effects,
            n_rho_effects,
            sigma_rho,
            alpha_base,
            alpha_effects,
            n_alpha_effects,
            sigma_alpha,
            sigma_xi,
            sigma_eta,
            calendar,
            n_calendar,
            draws,
            horizon: design.horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_free(&self) -> usize {
        self.free_entries.len()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn free_names(&self) -> Vec<String> {
        self.free_entries.iter().map(|j| self.entries[*j].name.clone()).collect()
    }

    /// Working-vector index of each free coordinate.
    pub fn free_entries(&self) -> &[usize] {
        &self.free_entries
    }

    pub fn is_free(&self, entry: usize) -> bool {
        self.free_slot[entry].is_some()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of random components, i.e. draw dimensions.
    pub fn draw_dimensions(&self) -> usize {
        self.draws.keys.len()
    }

    /// Standard deviations keep their sign: the objective stays smooth through zero and
    /// reports show the absolute value.
    pub fn free_to_working(&self, free: &[f64]) -> Vec<f64> {
        assert_eq!(free.len(), self.n_free(), "free vector length");
        let mut w: Vec<f64> = self
            .entries
            .iter()
            .enumerate()
            .map(|(j, _)| match self.free_slot[j] {
                Some(f) => free[f],
                None => self.fixed_value[j],
            })
            .collect();
        for &start in &self.tau {
            for k in 1..N_THRESHOLDS {
                w[start + k] = w[start + k - 1] + w[start + k].exp();
            }
        }
        w
    }

    /// Inverse of [`Self::free_to_working`].
    pub fn working_to_free(&self, working: &[f64]) -> Result<Vec<f64>> {
        if working.len() != self.len() {
            return Err(Error::Dimension {
                what: "working vector",
                expected: self.len(),
                found: working.len(),
            });
        }
        let mut w = working.to_vec();
        for &start in &self.tau {
            check_thresholds(&working[start..start + N_THRESHOLDS])?;
            for k in 1..N_THRESHOLDS {
                w[start + k] = (working[start + k] - working[start + k - 1]).ln();
            }
        }
        Ok(self.free_entries.iter().map(|j| w[*j]).collect())
    }

    /// d working / d free, (entries x free).
    pub fn jacobian(&self, free: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.len(), self.n_free());
        for (f, &j) in self.free_entries.iter().enumerate() {
            match self.entries[j].kind {
                ParamKind::Threshold { stakeholder, k } => {
                    let start = self.tau[stakeholder];
                    let scale = if k == 0 { 1.0 } else { free[f].exp() };
                    for row in (start + k)..(start + N_THRESHOLDS) {
                        jac[(row, f)] = scale;
                    }
                }
                _ => jac[(j, f)] = 1.0,
            }
        }
        jac
    }

    /// Gradient with respect to the free vector from the gradient with respect to the working vector.
    pub fn chain_gradient(&self, free: &[f64], working_grad: &[f64]) -> Vec<f64> {
        let mut g = working_grad.to_vec();
        // thresholds: τ_k depends on every gap up to k
        for &start in &self.tau {
            for k in (0..N_THRESHOLDS - 1).rev() {
                g[start + k] += g[start + k + 1];
            }
        }
        self.free_entries
            .iter()
            .enumerate()
            .map(|(f, &j)| match self.entries[j].kind {
                ParamKind::Threshold { k, .. } if k > 0 => g[j] * free[f].exp(),
                _ => g[j],
            })
            .collect()
    }

    pub fn to_vector(&self, working: &[f64]) -> ParameterVector {
        let mut p = ParameterVector {
            wave_shifts: std::array::from_fn(|_| vec![0.0; self.n_wave]),
            demographic_effects: std::array::from_fn(|s| vec![0.0; self.n_gamma[s]]),
            rho_effects: vec![0.0; self.n_rho_effects],
            alpha_effects: vec![0.0; self.n_alpha_effects],
            calendar_effects: vec![0.0; self.n_calendar],
            ..Default::default()
        };
        for (e, v) in self.entries.iter().zip(working) {
            match e.kind {
                ParamKind::Threshold { stakeholder, k } => p.thresholds[stakeholder][k] = *v,
                ParamKind::Workshop { stakeholder, workshop } => p.workshop_effects[stakeholder][workshop] = *v,
                ParamKind::Wave { stakeholder, column } => p.wave_shifts[stakeholder][column] = *v,
                ParamKind::Demographic { stakeholder, column } => p.demographic_effects[stakeholder][column] = *v,
                ParamKind::RhoBase => p.rho_base = *v,
                ParamKind::RhoEffect(c) => p.rho_effects[c] = *v,
                ParamKind::SigmaRho => p.sigma_rho = *v,
                ParamKind::AlphaBase => p.alpha_base = *v,
                ParamKind::AlphaEffect(c) => p.alpha_effects[c] = *v,
                ParamKind::SigmaAlpha => p.sigma_alpha = *v,
                ParamKind::SigmaXi(s) => p.sigma_xi[s] = *v,
                ParamKind::SigmaEta => p.sigma_eta = *v,
                ParamKind::Calendar(c) => p.calendar_effects[c] = *v,
            }
        }
        p
    }

    pub fn from_vector(&self, p: &ParameterVector) -> Result<Vec<f64>> {
        let get = |v: &Vec<f64>, c: usize, what: &'static str| {
            v.get(c).copied().ok_or(Error::Dimension {
                what,
                expected: c + 1,
                found: v.len(),
            })
        };
        self.entries
            .iter()
            .map(|e| {
                Ok(match e.kind {
                    ParamKind::Threshold { stakeholder, k } => p.thresholds[stakeholder][k],
                    ParamKind::Workshop { stakeholder, workshop } => p.workshop_effects[stakeholder][workshop],
                    ParamKind::Wave { stakeholder, column } => get(&p.wave_shifts[stakeholder], column, "wave shifts")?,
                    ParamKind::Demographic { stakeholder, column } => {
                        get(&p.demographic_effects[stakeholder], column, "demographic effects")?
                    }
                    ParamKind::RhoBase => p.rho_base,
                    ParamKind::RhoEffect(c) => get(&p.rho_effects, c, "reversion effects")?,
                    ParamKind::SigmaRho => p.sigma_rho,
                    ParamKind::AlphaBase => p.alpha_base,
                    ParamKind::AlphaEffect(c) => get(&p.alpha_effects, c, "rate effects")?,
                    ParamKind::SigmaAlpha => p.sigma_alpha,
                    ParamKind::SigmaXi(s) => p.sigma_xi[s],
                    ParamKind::SigmaEta => p.sigma_eta,
                    ParamKind::Calendar(c) => get(&p.calendar_effects, c, "calendar effects")?,
                })
            })
            .collect()
    }

    /// Working vector from named values; unnamed parameters default to zero, thresholds are required.
    pub fn from_named(&self, named: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        for name in named.keys() {
            if self.index_of(name).is_none() {
                return Err(Error::Config(format!("parameter `{name}` is not part of the model")));
            }
        }
        self.entries
            .iter()
            .map(|e| match (named.get(&e.name), e.kind) {
                (Some(v), _) => Ok(*v),
                (None, ParamKind::Threshold { .. }) => {
                    Err(Error::Config(format!("no value given for `{}`", e.name)))
                }
                (None, _) => Ok(0.0),
            })
            .collect()
    }

    pub fn to_named(&self, working: &[f64]) -> BTreeMap<String, f64> {
        self.entries
            .iter()
            .zip(working)
            .map(|(e, v)| (e.name.clone(), *v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{Dataset, IndividualRecord, RatingObservation, WaveSchedule};
    use crate::design::build_design;

    fn tiny_design(config: &ModelConfig) -> DesignMatrices {
        let schedule = WaveSchedule::new(BTreeMap::from([
            (1, [0, 7, 14, 21, 28]),
            (2, [40, 47, 54, 61, 68]),
        ]))
        .unwrap();
        let individuals = vec![
            IndividualRecord {
                individual_id: "a".into(),
                wave: 1,
                covariates: BTreeMap::from([("area".into(), "rural".into())]),
            },
            IndividualRecord {
                individual_id: "b".into(),
                wave: 2,
                covariates: BTreeMap::from([("area".into(), "urban".into())]),
            },
        ];
        let obs = vec![RatingObservation {
            individual_id: "a".into(),
            wave: 1,
            time_index: 1,
            stakeholder: Stakeholder::Farmers,
            rating: 3,
            day: 738_900,
        }];
        let ds = Dataset::new(individuals, obs, schedule, vec!["area".into()]).unwrap();
        build_design(&ds, config).unwrap()
    }

    fn config() -> ModelConfig {
        let mut cfg = ModelConfig::from_toml(
            "[equations.farmers]\ncovariates=[\"area\"]\n[reversion]\ncovariates=[\"area\"]\n[random]\nsigma_rho=true",
        )
        .unwrap();
        cfg.fixed.insert("sigma.eta".into(), 0.0);
        cfg
    }

    #[test]
    fn layout_names_and_counts() {
        let cfg = config();
        let layout = ParamLayout::new(&tiny_design(&cfg), &cfg).unwrap();
        let names = layout.names();
        assert_eq!(names[0], "tau.government.1");
        assert!(names.contains(&"wave.farmers.1".to_string()));
        assert!(names.contains(&"gamma.farmers.area:urban".to_string()));
        assert!(names.contains(&"rho.area:urban".to_string()));
        assert_eq!(layout.n_wave, 1);
        assert_eq!(layout.n_free(), layout.len() - 1);
        // sigma.rho, five xi, eta
        assert_eq!(layout.draw_dimensions(), 7);
    }

    #[test]
    fn unknown_fixed_name_rejected() {
        let mut cfg = config();
        cfg.fixed.insert("beta.farmers.w9".into(), 0.0);
        assert!(ParamLayout::new(&tiny_design(&cfg), &cfg).is_err());
    }

    #[test]
    fn transforms_invert_and_chain_matches_jacobian() {
        let cfg = config();
        let layout = ParamLayout::new(&tiny_design(&cfg), &cfg).unwrap();
        let free: Vec<f64> = (0..layout.n_free()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let working = layout.free_to_working(&free);
        let back = layout.working_to_free(&working).unwrap();
        for (f, b) in free.iter().zip(&back) {
            // σ's come back as |σ|
            assert!((f.abs() - b.abs()).abs() < 1e-12);
        }
        let g: Vec<f64> = (0..layout.len()).map(|i| (i as f64).sin()).collect();
        let chained = layout.chain_gradient(&free, &g);
        let jac = layout.jacobian(&free);
        for f in 0..layout.n_free() {
            let direct: f64 = (0..layout.len()).map(|j| jac[(j, f)] * g[j]).sum();
            assert!((direct - chained[f]).abs() < 1e-12);
        }
        let p = layout.to_vector(&working);
        assert_eq!(layout.from_vector(&p).unwrap(), working);
    }
}
