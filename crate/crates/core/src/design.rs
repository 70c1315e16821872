//! Per-individual design blocks derived from a [`Dataset`] and a [`ModelConfig`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{
    elapsed_days, workshop_indicators, workshops_occurred, Dataset, Stakeholder, MISSING_LEVEL,
    N_STAKEHOLDERS, N_TIMES, N_WORKSHOPS,
};
use crate::error::{Error, Result};

/// Coding of one categorical covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateEncoding {
    pub name: String,
    /// All levels, including `missing` when it occurs.
    pub levels: Vec<String>,
    pub base: String,
}

impl CovariateEncoding {
    /// Full one-hot row over `levels`.
    pub fn one_hot(&self, level: &str) -> Vec<f64> {
        let level = self.resolve(level);
        self.levels.iter().map(|l| f64::from(u8::from(l == level))).collect()
    }

    /// Levels that receive a dummy column (every level but the base).
    pub fn dummy_levels(&self) -> impl Iterator<Item = &String> {
        self.levels.iter().filter(move |l| **l != self.base)
    }

    pub fn column_names(&self) -> Vec<String> {
        self.dummy_levels().map(|l| format!("{}:{l}", self.name)).collect()
    }

    fn resolve<'a>(&'a self, level: &'a str) -> &'a str {
        if self.levels.iter().any(|l| l == level) {
            level
        } else {
            MISSING_LEVEL
        }
    }

    fn dummies(&self, level: &str) -> Vec<f64> {
        let level = self.resolve(level);
        self.dummy_levels().map(|l| f64::from(u8::from(l == level))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationDesign {
    pub stakeholder: usize,
    pub time_index: u8,
    pub rating: u8,
    /// Zero-based calendar period; period 0 is the reference.
    pub period: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualDesign {
    pub id: String,
    pub wave: u32,
    /// Index of this individual's wave among the non-reference wave columns.
    pub wave_column: Option<usize>,
    pub equation_x: [Vec<f64>; N_STAKEHOLDERS],
    pub reversion_x: Vec<f64>,
    pub alpha_x: Vec<f64>,
    /// Days since each completed workshop, by time index (row t-1); zero for pending workshops.
    pub deltas: [[f64; N_WORKSHOPS]; N_TIMES as usize],
    pub observations: Vec<ObservationDesign>,
}

impl IndividualDesign {
    pub fn delta_row(&self, time_index: u8) -> &[f64; N_WORKSHOPS] {
        &self.deltas[usize::from(time_index) - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrices {
    pub individuals: Vec<IndividualDesign>,
    pub horizon: f64,
    pub base_wave: Option<u32>,
    pub wave_columns: Vec<u32>,
    pub calendar_labels: Vec<String>,
    pub encodings: Vec<CovariateEncoding>,
    pub equation_columns: [Vec<String>; N_STAKEHOLDERS],
    pub reversion_columns: Vec<String>,
    pub alpha_columns: Vec<String>,
    /// Covariate cells whose level was not declared in the configuration.
    pub unknown_levels: usize,
}

impl DesignMatrices {
    pub fn observation_count(&self) -> usize {
        self.individuals.iter().map(|i| i.observations.len()).sum()
    }

    /// Number of calendar dummy columns (p - 1).
    pub fn calendar_columns(&self) -> usize {
        self.calendar_labels.len().saturating_sub(1)
    }

    pub fn indicators(obs: &ObservationDesign) -> [u8; N_WORKSHOPS] {
        workshop_indicators(obs.time_index).expect("validated time index")
    }

    pub fn wave_dummy_row(&self, individual: &IndividualDesign) -> Vec<f64> {
        let mut row = vec![0.0; self.wave_columns.len()];
        if let Some(c) = individual.wave_column {
            row[c] = 1.0;
        }
        row
    }

    pub fn calendar_dummy_row(&self, obs: &ObservationDesign) -> Vec<f64> {
        let mut row = vec![0.0; self.calendar_columns()];
        if obs.period > 0 {
            row[obs.period - 1] = 1.0;
        }
        row
    }

    pub fn encoding(&self, name: &str) -> Option<&CovariateEncoding> {
        self.encodings.iter().find(|e| e.name == name)
    }
}

fn encode(dataset: &Dataset, name: &str, config: &ModelConfig) -> CovariateEncoding {
    let coding = config.covariates.get(name).cloned().unwrap_or_default();
    let observed: BTreeSet<&str> = dataset
        .individuals
        .iter()
        .map(|r| r.covariates[name].as_str())
        .collect();
    let mut levels: Vec<String> = match &coding.levels {
        Some(declared) => {
            let mut levels = declared.clone();
            let needs_missing = observed.iter().any(|l| !declared.iter().any(|d| d == l));
            if needs_missing && !levels.iter().any(|l| l == MISSING_LEVEL) {
                levels.push(MISSING_LEVEL.to_string());
            }
            levels
        }
        None => {
            let mut levels: Vec<String> = observed
                .iter()
                .filter(|l| **l != MISSING_LEVEL)
                .map(|l| l.to_string())
                .collect();
            if observed.contains(MISSING_LEVEL) {
                levels.push(MISSING_LEVEL.to_string());
            }
            levels
        }
    };
    if levels.is_empty() {
        levels.push(MISSING_LEVEL.to_string());
    }
    let base = coding
        .base
        .filter(|b| levels.contains(b))
        .unwrap_or_else(|| levels[0].clone());
    CovariateEncoding {
        name: name.to_string(),
        levels,
        base,
    }
}

fn stack(
    encodings: &BTreeMap<&str, CovariateEncoding>,
    names: &[String],
    levels: &BTreeMap<String, String>,
) -> Vec<f64> {
    names
        .iter()
        .flat_map(|n| encodings[n.as_str()].dummies(&levels[n]))
        .collect()
}

fn columns(encodings: &BTreeMap<&str, CovariateEncoding>, names: &[String]) -> Vec<String> {
    names
        .iter()
        .flat_map(|n| encodings[n.as_str()].column_names())
        .collect()
}

/// Expands covariates into dummies and attaches wave, calendar and workshop timing to every observation.
pub fn build_design(dataset: &Dataset, config: &ModelConfig) -> Result<DesignMatrices> {
    config.validate()?;
    let referenced = config.referenced_covariates();
    for name in &referenced {
        if !dataset.covariate_names.contains(name) {
            return Err(Error::UnknownCovariate {
                name: name.clone(),
                valid: dataset.covariate_names.join(", "),
            });
        }
    }
    let encodings: BTreeMap<&str, CovariateEncoding> = referenced
        .iter()
        .map(|n| (n.as_str(), encode(dataset, n, config)))
        .collect();
    let unknown_levels = dataset
        .individuals
        .iter()
        .flat_map(|r| referenced.iter().map(move |n| (n, &r.covariates[n])))
        .filter(|(n, level)| {
            level.as_str() != MISSING_LEVEL && !encodings[n.as_str()].levels.contains(level)
        })
        .count();
    if unknown_levels > 0 {
        log::warn!("{unknown_levels} covariate cells with undeclared levels coded as `{MISSING_LEVEL}`");
    }

    let schedule = match config.horizon_days {
        Some(h) => dataset.schedule.clone().with_horizon(h)?,
        None => dataset.schedule.clone(),
    };
    let waves = schedule.waves();
    let (base_wave, wave_columns) = if config.wave_effects && waves.len() > 1 {
        let base = config.base_wave.unwrap_or(*waves.last().expect("non-empty schedule"));
        if !waves.contains(&base) {
            return Err(Error::Config(format!("base wave {base} is not in the schedule")));
        }
        (Some(base), waves.iter().copied().filter(|w| *w != base).collect())
    } else {
        (None, Vec::new())
    };

    let dataset = dataset.clone().with_calendar(&config.calendar)?;
    let mut delta_tables: BTreeMap<u32, [[f64; N_WORKSHOPS]; N_TIMES as usize]> = BTreeMap::new();
    for &wave in &waves {
        let mut table = [[0.0; N_WORKSHOPS]; N_TIMES as usize];
        for t in 1..=N_TIMES {
            for w in 1..=workshops_occurred(t) {
                table[usize::from(t) - 1][w - 1] = elapsed_days(&schedule, wave, w, t)? as f64;
            }
        }
        delta_tables.insert(wave, table);
    }

    let mut position = BTreeMap::new();
    let mut individuals: Vec<IndividualDesign> = dataset
        .individuals
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            position.insert(rec.individual_id.as_str(), k);
            IndividualDesign {
                id: rec.individual_id.clone(),
                wave: rec.wave,
                wave_column: wave_columns.iter().position(|w| *w == rec.wave),
                equation_x: Stakeholder::ALL
                    .map(|s| stack(&encodings, config.equation_covariates(s), &rec.covariates)),
                reversion_x: stack(&encodings, &config.reversion.covariates, &rec.covariates),
                alpha_x: stack(&encodings, &config.reversion.alpha_covariates, &rec.covariates),
                deltas: delta_tables[&rec.wave],
                observations: Vec::new(),
            }
        })
        .collect();
    for obs in &dataset.observations {
        let k = position[obs.individual_id.as_str()];
        individuals[k].observations.push(ObservationDesign {
            stakeholder: obs.stakeholder.index(),
            time_index: obs.time_index,
            rating: obs.rating,
            period: dataset.calendar.period_of(obs.day),
        });
    }
    for ind in &mut individuals {
        ind.observations
            .sort_by_key(|o| (o.time_index, o.stakeholder));
    }

    Ok(DesignMatrices {
        individuals,
        horizon: f64::from(schedule.horizon()),
        base_wave,
        wave_columns,
        calendar_labels: dataset.calendar.labels().to_vec(),
        equation_columns: Stakeholder::ALL.map(|s| columns(&encodings, config.equation_covariates(s))),
        reversion_columns: columns(&encodings, &config.reversion.covariates),
        alpha_columns: columns(&encodings, &config.reversion.alpha_covariates),
        encodings: referenced.iter().map(|n| encodings[n.as_str()].clone()).collect(),
        unknown_levels,
    })
}
