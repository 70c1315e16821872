//! Forward simulation of complete workshop panels from known parameters, and
//! simulate-estimate-compare recovery experiments.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CovariateCoding, EquationConfig, ModelConfig, RandomConfig, ReversionConfig};
use crate::data::{
    parse_date, workshop_indicators, CalendarBinning, Dataset, IndividualRecord, RatingObservation, Stakeholder,
    WaveSchedule, N_STAKEHOLDERS, N_THRESHOLDS, N_TIMES, N_WORKSHOPS,
};
use crate::design::build_design;
use crate::draws::inverse_normal_cdf;
use crate::error::{Error, Result};
use crate::estimation::{estimate, EstimateOptions};
use crate::model::{
    individual_alpha, individual_reversion, linear_predictor, logistic, ordered_probs, IndividualRealization,
    ObservationContext,
};
use crate::params::{ParamLayout, ParameterVector};

/// Marginal distribution of one categorical covariate; the first level is the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateGenerator {
    pub levels: Vec<String>,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveSpec {
    pub wave: u32,
    /// Workshop dates, `YYYY-MM-DD`.
    pub dates: [String; N_WORKSHOPS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Total individuals, spread round-robin over the waves.
    pub individuals: usize,
    pub waves: Vec<WaveSpec>,
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateGenerator>,
    #[serde(default)]
    pub model: ModelConfig,
    /// True parameter values by name; thresholds are required, anything else defaults to zero.
    pub truth: BTreeMap<String, f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    crate::config::DEFAULT_SEED
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: ParameterVector,
    pub truth_named: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub name: String,
    pub value: f64,
}

/// Truth echoed in the same shape as the estimator's report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthReport {
    pub parameters: Vec<TruthEntry>,
    pub params: ParameterVector,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.individuals == 0 {
            return Err(Error::Config("scenario needs at least one individual".into()));
        }
        for (name, g) in &self.covariates {
            if g.levels.is_empty() || g.levels.len() != g.probabilities.len() {
                return Err(Error::Config(format!(
                    "covariate `{name}` needs one probability per level"
                )));
            }
            if g.probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!("covariate `{name}` has a probability outside [0, 1]")));
            }
            let total: f64 = g.probabilities.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "probabilities of covariate `{name}` sum to {total}, not 1"
                )));
            }
        }
        self.schedule().map(|_| ())?;
        self.model.validate()
    }

    pub fn schedule(&self) -> Result<WaveSchedule> {
        if self.waves.is_empty() {
            return Err(Error::Config("scenario has no waves".into()));
        }
        let mut dates = BTreeMap::new();
        for w in &self.waves {
            let mut days = [0; N_WORKSHOPS];
            for (d, text) in days.iter_mut().zip(&w.dates) {
                *d = parse_date(text)?;
            }
            if dates.insert(w.wave, days).is_some() {
                return Err(Error::Config(format!("wave {} listed twice", w.wave)));
            }
        }
        WaveSchedule::new(dates)
    }

    /// Model configuration with every generated covariate's levels declared in generator order,
    /// so the parameter layout does not depend on which levels happen to be drawn.
    pub fn estimation_config(&self) -> ModelConfig {
        let mut cfg = self.model.clone();
        for (name, g) in &self.covariates {
            let coding = cfg.covariates.entry(name.clone()).or_insert_with(CovariateCoding::default);
            if coding.levels.is_none() {
                coding.levels = Some(g.levels.clone());
            }
            if coding.base.is_none() {
                coding.base = g.levels.first().cloned();
            }
        }
        cfg
    }

    /// Scenario with the reported workshop, reversion and demographic coefficients, rate
    /// covariates included, thresholds calibrated to the reported opening means.
    pub fn table3_like(individuals: usize, seed: u64) -> Self {
        let mut truth = reported_core_truth();
        truth.insert("alpha.base".into(), 119.17);
        truth.insert("alpha.ethnicity:non_white".into(), -112.69);
        truth.insert("alpha.education:higher".into(), 83.67);
        truth.insert("alpha.area:rural".into(), -9.85);
        let mut spec = Self::reported_skeleton(individuals, seed, truth);
        spec.model.reversion.alpha_covariates = vec!["ethnicity".into(), "education".into(), "area".into()];
        spec.calibrate_thresholds(&OPENING_MEANS, THRESHOLD_SPACING);
        spec
    }

    /// Recovery scenario: reported workshop coefficients with an identifiable reversion rate
    /// (a third of the horizon) and no rate covariates.
    pub fn recovery(individuals: usize, seed: u64) -> Self {
        let mut truth = reported_core_truth();
        for s in Stakeholder::ALL {
            truth.insert(format!("wave.{s}.1"), 0.15);
            truth.insert(format!("wave.{s}.2"), -0.1);
        }
        let mut spec = Self::reported_skeleton(individuals, seed, truth);
        let horizon = spec.schedule().map(|s| f64::from(s.horizon())).unwrap_or(17.0);
        spec.truth.insert("alpha.base".into(), horizon / 3.0);
        spec.calibrate_thresholds(&OPENING_MEANS, THRESHOLD_SPACING);
        spec
    }

    fn reported_skeleton(individuals: usize, seed: u64, mut truth: BTreeMap<String, f64>) -> Self {
        let generator = |levels: [&str; 2], p: f64| CovariateGenerator {
            levels: levels.iter().map(|l| l.to_string()).collect(),
            probabilities: vec![1.0 - p, p],
        };
        let covariates = BTreeMap::from([
            ("gender".to_string(), generator(["male", "female"], 0.5)),
            ("area".to_string(), generator(["urban", "rural"], 0.25)),
            ("vote".to_string(), generator(["voted", "did_not_vote"], 0.15)),
            ("ethnicity".to_string(), generator(["white", "non_white"], 0.15)),
            ("education".to_string(), generator(["no_higher", "higher"], 0.4)),
        ]);
        let equations = BTreeMap::from([
            (Stakeholder::Individuals, EquationConfig { covariates: vec!["gender".into()] }),
            (Stakeholder::Farmers, EquationConfig { covariates: vec!["area".into()] }),
        ]);
        let model = ModelConfig {
            calendar: CalendarBinning::None,
            equations,
            reversion: ReversionConfig {
                enabled: true,
                covariates: vec!["area".into(), "vote".into()],
                alpha_covariates: Vec::new(),
            },
            random: RandomConfig::default(),
            seed,
            ..ModelConfig::default()
        };
        for s in Stakeholder::ALL {
            truth.insert(format!("sigma.xi.{s}"), 0.5);
        }
        truth.insert("sigma.eta".into(), 0.7);
        let wave = |wave: u32, dates: [&str; N_WORKSHOPS]| WaveSpec {
            wave,
            dates: dates.map(str::to_string),
        };
        Self {
            individuals,
            waves: vec![
                wave(1, ["2023-01-14", "2023-01-21", "2023-01-28", "2023-02-11", "2023-02-18"]),
                wave(2, ["2023-02-04", "2023-02-21", "2023-02-28", "2023-03-10", "2023-03-17"]),
                wave(3, ["2023-03-04", "2023-03-11", "2023-03-23", "2023-03-30", "2023-04-16"]),
            ],
            covariates,
            model,
            truth,
            seed,
        }
    }

    /// Equally spaced thresholds per stakeholder, shifted so the expected opening rating over the
    /// covariate mix and the random terms equals `means[s]`.
    pub fn calibrate_thresholds(&mut self, means: &[f64; N_STAKEHOLDERS], spacing: f64) {
        let cfg = self.estimation_config();
        let sd_eta = self.truth.get("sigma.eta").copied().unwrap_or(0.0);
        for s in Stakeholder::ALL {
            let sd_xi = self.truth.get(&format!("sigma.xi.{s}")).copied().unwrap_or(0.0);
            let sd = (sd_xi * sd_xi + sd_eta * sd_eta).sqrt();
            let truth = &self.truth;
            let mut mixture = vec![(1.0, 0.0)];
            for name in cfg.equation_covariates(s) {
                let Some(g) = self.covariates.get(name) else { continue };
                mixture = mixture
                    .iter()
                    .flat_map(move |(w, v)| {
                        g.levels.iter().zip(&g.probabilities).map(move |(level, p)| {
                            let key = format!("gamma.{s}.{name}:{level}");
                            (w * p, v + truth.get(&key).copied().unwrap_or(0.0))
                        })
                    })
                    .collect();
            }
            let offset = calibrate_offset(means[s.index()], spacing, &mixture, sd);
            for k in 0..N_THRESHOLDS {
                self.truth
                    .insert(format!("tau.{s}.{}", k + 1), offset + spacing * (k as f64 - 4.5));
            }
        }
    }
}

/// Reported mean ratings at the first measurement (government, supermarkets, food industry, farmers, individuals).
pub const OPENING_MEANS: [f64; N_STAKEHOLDERS] = [8.68, 7.50, 8.04, 6.81, 5.34];
pub const THRESHOLD_SPACING: f64 = 1.0;

/// Reported workshop effects, rows by stakeholder, columns by workshop.
pub const REPORTED_WORKSHOP_EFFECTS: [[f64; N_WORKSHOPS]; N_STAKEHOLDERS] = [
    [0.13, 0.94, -0.54, 0.39, 0.20],
    [1.56, -0.82, -0.22, 0.73, -0.15],
    [-0.45, 0.16, 0.68, 0.25, -0.26],
    [-1.56, 0.33, 0.89, -0.35, 0.14],
    [0.46, 0.26, 0.37, 0.67, 0.76],
];

fn reported_core_truth() -> BTreeMap<String, f64> {
    let mut truth = BTreeMap::new();
    for s in Stakeholder::ALL {
        for (w, b) in REPORTED_WORKSHOP_EFFECTS[s.index()].iter().enumerate() {
            truth.insert(format!("beta.{s}.w{}", w + 1), *b);
        }
    }
    truth.insert("gamma.individuals.gender:female".into(), 0.96);
    truth.insert("gamma.farmers.area:rural".into(), -1.79);
    truth.insert("rho.base".into(), 0.33);
    truth.insert("rho.area:rural".into(), 0.35);
    truth.insert("rho.vote:did_not_vote".into(), -0.39);
    truth
}

const QUADRATURE_NODES: usize = 64;

fn expected_rating(tau: &[f64], v: f64) -> f64 {
    tau.iter().map(|t| logistic(v - t)).sum()
}

fn calibrate_offset(target: f64, spacing: f64, mixture: &[(f64, f64)], sd: f64) -> f64 {
    let nodes: Vec<f64> = (0..QUADRATURE_NODES)
        .map(|j| sd * inverse_normal_cdf((j as f64 + 0.5) / QUADRATURE_NODES as f64).expect("interior point"))
        .collect();
    let mean_at = |offset: f64| {
        let tau: Vec<f64> = (0..N_THRESHOLDS).map(|k| offset + spacing * (k as f64 - 4.5)).collect();
        mixture
            .iter()
            .map(|(w, v)| w * nodes.iter().map(|z| expected_rating(&tau, v + z)).sum::<f64>() / nodes.len() as f64)
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u = ((rng.gen::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    inverse_normal_cdf(u).expect("open unit interval")
}

fn categorical(rng: &mut ChaCha8Rng, probabilities: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (k, p) in probabilities.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    probabilities.len() - 1
}

/// Rating drawn by inverting the ordered-logit distribution function at a uniform.
pub fn sample_rating(v: f64, tau: &[f64], u: f64) -> Result<u8> {
    let probs = ordered_probs(v, tau)?;
    let mut cum = 0.0;
    for (r, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(r as u8);
        }
    }
    Ok((probs.len() - 1) as u8)
}

/// Simulates one full ten-measurement panel per individual.
pub fn simulate_dataset(spec: &ScenarioSpec) -> Result<Simulated> {
    spec.validate()?;
    let schedule = spec.schedule()?;
    let cfg = spec.estimation_config();
    let waves = schedule.waves();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let covariate_names: Vec<String> = spec.covariates.keys().cloned().collect();

    let mut individuals = Vec::with_capacity(spec.individuals);
    let mut observations = Vec::with_capacity(spec.individuals * N_STAKEHOLDERS * usize::from(N_TIMES));
    for k in 0..spec.individuals {
        let wave = waves[k % waves.len()];
        let id = format!("w{wave}-{:04}", k / waves.len() + 1);
        let covariates = spec
            .covariates
            .iter()
            .map(|(name, g)| (name.clone(), g.levels[categorical(&mut rng, &g.probabilities)].clone()))
            .collect();
        for t in 1..=N_TIMES {
            let day = schedule.measurement_day(wave, t)?;
            for s in Stakeholder::ALL {
                observations.push(RatingObservation {
                    individual_id: id.clone(),
                    wave,
                    time_index: t,
                    stakeholder: s,
                    rating: 0,
                    day,
                });
            }
        }
        individuals.push(IndividualRecord {
            individual_id: id,
            wave,
            covariates,
        });
    }
    let dataset = Dataset::new(individuals, observations, schedule, covariate_names)?;
    let design = build_design(&dataset, &cfg)?;
    let layout = ParamLayout::new(&design, &cfg)?;
    let mut named = spec.truth.clone();
    for (name, v) in &cfg.fixed {
        named.insert(name.clone(), *v);
    }
    let working = layout.from_named(&named)?;
    let truth = layout.to_vector(&working);
    let truth_named = layout.to_named(&working);

    let mut ratings: HashMap<(String, u8, Stakeholder), u8> = HashMap::with_capacity(dataset.observations.len());
    for ind in &design.individuals {
        let mut z = || standard_normal(&mut rng);
        let rho = individual_reversion(truth.rho_base, &truth.rho_effects, &ind.reversion_x, truth.sigma_rho, z())?;
        let alpha =
            individual_alpha(truth.alpha_base, &truth.alpha_effects, &ind.alpha_x, truth.sigma_alpha, z())?;
        let xi = std::array::from_fn(|s| truth.sigma_xi[s] * z());
        let eta = truth.sigma_eta * z();
        let realization = IndividualRealization { rho, alpha, xi, eta };
        let covariates: [&[f64]; N_STAKEHOLDERS] = std::array::from_fn(|s| ind.equation_x[s].as_slice());
        for obs in ind.observations.iter().filter(|o| o.stakeholder == 0) {
            let ctx = ObservationContext {
                indicators: workshop_indicators(obs.time_index)?,
                deltas: *ind.delta_row(obs.time_index),
                wave_column: ind.wave_column,
                covariates,
                period: obs.period,
                horizon: design.horizon,
            };
            let v = linear_predictor(&ctx, &truth, &realization)?;
            for s in Stakeholder::ALL {
                let r = sample_rating(v[s.index()], &truth.thresholds[s.index()], rng.gen())?;
                ratings.insert((ind.id.clone(), obs.time_index, s), r);
            }
        }
    }
    let mut dataset = dataset;
    for obs in &mut dataset.observations {
        obs.rating = ratings[&(obs.individual_id.clone(), obs.time_index, obs.stakeholder)];
    }
    Ok(Simulated {
        dataset,
        truth,
        truth_named,
    })
}

impl Simulated {
    pub fn truth_report(&self) -> TruthReport {
        TruthReport {
            parameters: self
                .truth_named
                .iter()
                .map(|(name, value)| TruthEntry {
                    name: name.clone(),
                    value: *value,
                })
                .collect(),
            params: self.truth.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
    pub robust_se: f64,
    /// |estimate - truth| / se.
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRun {
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub rows: Vec<RecoveryRow>,
    /// Share of free parameters with |z| < 2.
    pub share_within_two: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub draws: usize,
    pub runs: Vec<RecoveryRun>,
}

impl RecoveryReport {
    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(|r| r.converged)
    }

    pub fn share_within_two(&self) -> f64 {
        let rows: Vec<&RecoveryRow> = self.runs.iter().flat_map(|r| &r.rows).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.z < 2.0).count() as f64 / rows.len() as f64
    }
}

/// Seed of repetition `rep`; repetition 0 uses the scenario seed itself.
pub fn repetition_seed(seed: u64, rep: usize) -> u64 {
    seed.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Simulates, estimates with `q` draws and compares with the truth, `repetitions` times.
pub fn recovery_experiment(spec: &ScenarioSpec, q: usize, repetitions: usize, options: &EstimateOptions) -> Result<RecoveryReport> {
    let runs = (0..repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut spec = spec.clone();
            spec.seed = repetition_seed(spec.seed, rep);
            let sim = simulate_dataset(&spec)?;
            let mut cfg = spec.estimation_config();
            cfg.draws = q;
            cfg.seed = spec.seed;
            let result = estimate(&sim.dataset, &cfg, options)?;
            if !result.converged {
                log::warn!("recovery repetition {rep} did not converge ({:?})", result.stop_reason);
            }
            let rows: Vec<RecoveryRow> = result
                .parameters
                .iter()
                .filter_map(|p| {
                    let se = p.robust_se?;
                    let truth = sim.truth_named.get(&p.name).copied().unwrap_or(0.0);
                    Some(RecoveryRow {
                        name: p.name.clone(),
                        truth,
                        estimate: p.estimate,
                        robust_se: se,
                        z: (p.estimate - truth).abs() / se,
                    })
                })
                .collect();
            let share = rows.iter().filter(|r| r.z < 2.0).count() as f64 / rows.len().max(1) as f64;
            Ok(RecoveryRun {
                seed: spec.seed,
                converged: result.converged,
                iterations: result.iterations,
                loglik: result.loglik,
                rows,
                share_within_two: share,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecoveryReport { draws: q, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_hits_target_without_randomness() {
        let offset = calibrate_offset(6.0, 1.0, &[(1.0, 0.0)], 0.0);
        let tau: Vec<f64> = (0..N_THRESHOLDS).map(|k| offset + (k as f64 - 4.5)).collect();
        assert!((expected_rating(&tau, 0.0) - 6.0).abs() < 1e-9);
    }

    #[test]
    fn scenarios_validate_and_round_trip() {
        for spec in [ScenarioSpec::recovery(30, 1), ScenarioSpec::table3_like(30, 2)] {
            spec.validate().unwrap();
            let again = ScenarioSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
            assert_eq!(again, spec);
        }
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        let mut spec = ScenarioSpec::recovery(10, 1);
        spec.covariates.get_mut("area").unwrap().probabilities = vec![0.5, 0.6];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn recovery_rate_is_a_third_of_the_horizon() {
        let spec = ScenarioSpec::recovery(10, 1);
        assert_eq!(spec.schedule().unwrap().horizon(), 17);
        assert!((spec.truth["alpha.base"] - 17.0 / 3.0).abs() < 1e-12);
    }
}
