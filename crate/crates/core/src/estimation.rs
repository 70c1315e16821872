//! Simulated maximum likelihood estimation with robust inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{Dataset, Stakeholder, N_CATEGORIES, N_STAKEHOLDERS, N_THRESHOLDS, N_WORKSHOPS};
use crate::design::{build_design, CovariateEncoding, DesignMatrices};
use crate::draws::{key_for_id, mlhs_keyed, DrawMatrix};
use crate::error::{Error, Result};
use crate::inference::{hessian_from_gradient, robust_covariance};
use crate::likelihood::Problem;
use crate::optimize::{maximize, Objective, Settings, StopReason};
use crate::params::{ParamKind, ParamLayout, ParameterVector};

/// Relative step of the finite-difference Hessian.
pub const HESSIAN_STEP: f64 = 1e-5;
pub const START_SIGMA: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct EstimateOptions {
    /// Keep individuals flagged as lacking a beginning or end measurement.
    pub keep_incomplete: bool,
    pub settings: Settings,
    /// Use the analytic gradient; otherwise central differences.
    pub analytic_gradient: bool,
    /// Named starting values in reported units; unnamed parameters use the default start.
    pub start: Option<BTreeMap<String, f64>>,
    pub draw_cache: Option<PathBuf>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            keep_incomplete: false,
            settings: Settings::default(),
            analytic_gradient: true,
            start: None,
            draw_cache: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub estimate: f64,
    /// `None` for pinned parameters.
    pub robust_se: Option<f64>,
    pub t_ratio: Option<f64>,
    pub free: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualContribution {
    pub individual_id: String,
    pub loglik: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub floored_contributions: usize,
    pub nonpositive_alpha_draws: usize,
    pub hessian_rcond: f64,
    pub pseudo_inverse: bool,
    pub unknown_levels: usize,
    pub excluded_incomplete: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub parameters: Vec<ParameterEstimate>,
    pub params: ParameterVector,
    pub free_names: Vec<String>,
    pub free_vector: Vec<f64>,
    /// Robust covariance of all parameters in reported units; rows of pinned parameters are zero.
    pub robust_covariance: Vec<Vec<f64>>,
    pub loglik: f64,
    pub per_individual: Vec<IndividualContribution>,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub draws: usize,
    pub seed: u64,
    pub horizon: f64,
    pub individuals: usize,
    pub observations: usize,
    pub wave_columns: Vec<u32>,
    pub calendar_labels: Vec<String>,
    pub reversion_columns: Vec<String>,
    pub alpha_columns: Vec<String>,
    pub covariate_codings: Vec<CovariateEncoding>,
    pub diagnostics: Diagnostics,
}

impl EstimationResult {
    pub fn get(&self, name: &str) -> Option<&ParameterEstimate> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.get(name).map(|p| p.estimate)
    }

    pub fn named_estimates(&self) -> BTreeMap<String, f64> {
        self.parameters.iter().map(|p| (p.name.clone(), p.estimate)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Starting values (free vector): thresholds from pooled cumulative response shares, slopes at
/// zero, σ's at 0.1, reversion at zero and its rate at half the horizon.
pub fn starting_values(design: &DesignMatrices, layout: &ParamLayout) -> Result<Vec<f64>> {
    let mut counts = [[0.0f64; N_CATEGORIES]; N_STAKEHOLDERS];
    let mut any = false;
    for obs in design.individuals.iter().flat_map(|i| &i.observations) {
        counts[obs.stakeholder][usize::from(obs.rating)] += 1.0;
        any = true;
    }
    if !any {
        return Err(Error::invalid("no observations to start from"));
    }
    let mut working = vec![0.0; layout.len()];
    for (s, c) in counts.iter().enumerate() {
        let tau = threshold_start(c);
        working[layout.tau[s]..layout.tau[s] + N_THRESHOLDS].copy_from_slice(&tau);
    }
    for (j, e) in layout.entries().iter().enumerate() {
        match e.kind {
            k if k.is_sigma() => working[j] = START_SIGMA,
            ParamKind::AlphaBase => working[j] = layout.horizon / 2.0,
            _ => {}
        }
    }
    layout.working_to_free(&working)
}

/// Logits of cumulative shares, with half a pseudo-count per category when any category is empty.
pub fn threshold_start(counts: &[f64; N_CATEGORIES]) -> [f64; N_THRESHOLDS] {
    let mut c = *counts;
    if c.iter().any(|x| *x <= 0.0) {
        c.iter_mut().for_each(|x| *x += 0.5);
    }
    let total: f64 = c.iter().sum();
    let mut cum = 0.0;
    std::array::from_fn(|k| {
        cum += c[k];
        let share = cum / total;
        (share / (1.0 - share)).ln()
    })
}

pub fn draws_for(design: &DesignMatrices, layout: &ParamLayout, q: usize, seed: u64) -> Result<Option<DrawMatrix>> {
    if layout.draw_dimensions() == 0 {
        return Ok(None);
    }
    let keys: Vec<u64> = design.individuals.iter().map(|i| key_for_id(&i.id)).collect();
    mlhs_keyed(&keys, q, &layout.draws.keys, seed).map(Some)
}

fn cached_draws(
    design: &DesignMatrices,
    layout: &ParamLayout,
    q: usize,
    seed: u64,
    cache: Option<&PathBuf>,
) -> Result<Option<DrawMatrix>> {
    let Some(path) = cache.filter(|_| layout.draw_dimensions() > 0) else {
        return draws_for(design, layout, q, seed);
    };
    let keys: Vec<u64> = design.individuals.iter().map(|i| key_for_id(&i.id)).collect();
    if path.exists() {
        match DrawMatrix::read_cache(path, &keys, q, &layout.draws.keys, seed) {
            Ok(Some(d)) => return Ok(Some(d)),
            Ok(None) => log::info!("draw cache {} is for other settings; regenerating", path.display()),
            Err(e) => log::warn!("ignoring draw cache {}: {e}", path.display()),
        }
    }
    let draws = mlhs_keyed(&keys, q, &layout.draws.keys, seed)?;
    draws.write_cache(path)?;
    Ok(Some(draws))
}

/// Simulated log-likelihood as a function of the free vector.
pub struct SmlObjective<'a> {
    pub problem: Problem<'a>,
    pub analytic: bool,
}

impl SmlObjective<'_> {
    pub fn free_gradient(&self, free: &[f64]) -> Vec<f64> {
        let layout = self.problem.layout;
        let (_, g) = self.problem.loglik_with_gradient(&layout.free_to_working(free));
        layout.chain_gradient(free, &g)
    }
}

impl Objective for SmlObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.problem.loglik(&self.problem.layout.free_to_working(x)).total
    }

    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        if !self.analytic {
            let v = self.value(x);
            let g = crate::optimize::central_difference_gradient(|y| self.value(y), x, crate::optimize::DEFAULT_FD_STEP);
            return (v, g);
        }
        let layout = self.problem.layout;
        let (ll, g) = self.problem.loglik_with_gradient(&layout.free_to_working(x));
        (ll.total, layout.chain_gradient(x, &g))
    }
}

/// Everything needed to evaluate the simulated likelihood of a dataset under a configuration.
pub struct Prepared {
    pub design: DesignMatrices,
    pub layout: ParamLayout,
    pub draws: Option<DrawMatrix>,
    pub excluded_incomplete: usize,
}

impl Prepared {
    pub fn new(dataset: &Dataset, config: &ModelConfig, keep_incomplete: bool) -> Result<Self> {
        Self::with_cache(dataset, config, keep_incomplete, None)
    }

    fn with_cache(dataset: &Dataset, config: &ModelConfig, keep_incomplete: bool, cache: Option<&PathBuf>) -> Result<Self> {
        let data = if keep_incomplete {
            dataset.clone()
        } else {
            dataset.complete_only()
        };
        if data.individuals.is_empty() || data.observations.is_empty() {
            return Err(Error::invalid("no individuals with observations left to estimate on"));
        }
        let design = build_design(&data, config)?;
        let layout = ParamLayout::new(&design, config)?;
        let draws = cached_draws(&design, &layout, config.draws, config.seed, cache)?;
        Ok(Self {
            design,
            layout,
            draws,
            excluded_incomplete: dataset.individuals.len() - data.individuals.len(),
        })
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem::new(&self.design, &self.layout, self.draws.as_ref()).expect("draws built for this layout")
    }

    /// Working vector from a structured parameter vector.
    pub fn working(&self, params: &ParameterVector) -> Result<Vec<f64>> {
        self.layout.from_vector(params)
    }
}

pub fn estimate(dataset: &Dataset, config: &ModelConfig, options: &EstimateOptions) -> Result<EstimationResult> {
    let prepared = Prepared::with_cache(dataset, config, options.keep_incomplete, options.draw_cache.as_ref())?;
    estimate_prepared(&prepared, config, options)
}

pub fn estimate_prepared(prepared: &Prepared, config: &ModelConfig, options: &EstimateOptions) -> Result<EstimationResult> {
    let layout = &prepared.layout;
    let design = &prepared.design;
    let problem = prepared.problem();
    let default_start = starting_values(design, layout)?;
    let start = match &options.start {
        None => default_start,
        Some(named) => {
            let mut working = layout.free_to_working(&default_start);
            for (name, v) in named {
                let j = layout
                    .index_of(name)
                    .ok_or_else(|| Error::Config(format!("start value for unknown parameter `{name}`")))?;
                if layout.is_free(j) {
                    working[j] = *v;
                }
            }
            layout.working_to_free(&working)?
        }
    };
    let objective = SmlObjective {
        problem,
        analytic: options.analytic_gradient,
    };
    let max = maximize(&objective, &start, &options.settings)?;
    if !max.converged {
        log::warn!("optimiser stopped without convergence ({:?})", max.reason);
    }
    let x = max.x.clone();
    let working = layout.free_to_working(&x);
    let (ll, scores) = problem.scores(&working);
    let mut score_matrix = DMatrix::zeros(scores.len(), x.len());
    for (i, s) in scores.iter().enumerate() {
        for (f, g) in layout.chain_gradient(&x, s).into_iter().enumerate() {
            score_matrix[(i, f)] = g;
        }
    }
    let hessian = hessian_from_gradient(|y| objective.free_gradient(y), &x, HESSIAN_STEP);
    let sandwich = robust_covariance(&hessian, &score_matrix)?;
    // Standard deviations enter with their sign; the reported value is |σ|.
    let mut jac = layout.jacobian(&x);
    let mut reported = working.clone();
    for (j, e) in layout.entries().iter().enumerate() {
        if e.kind.is_sigma() && reported[j] < 0.0 {
            reported[j] = -reported[j];
            jac.row_mut(j).neg_mut();
        }
    }
    let cov = &jac * &sandwich.covariance * jac.transpose();

    let parameters = layout
        .entries()
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let free = layout.is_free(j);
            let se = free.then(|| cov[(j, j)].max(0.0).sqrt());
            ParameterEstimate {
                name: e.name.clone(),
                estimate: reported[j],
                robust_se: se,
                t_ratio: se.map(|s| reported[j] / s),
                free,
            }
        })
        .collect();

    Ok(EstimationResult {
        parameters,
        params: layout.to_vector(&reported),
        free_names: layout.free_names(),
        free_vector: x,
        robust_covariance: (0..layout.len())
            .map(|i| (0..layout.len()).map(|j| cov[(i, j)]).collect())
            .collect(),
        loglik: ll.total,
        per_individual: design
            .individuals
            .iter()
            .zip(&ll.per_individual)
            .map(|(ind, v)| IndividualContribution {
                individual_id: ind.id.clone(),
                loglik: *v,
            })
            .collect(),
        converged: max.converged,
        stop_reason: max.reason,
        iterations: max.iterations,
        evaluations: max.evaluations,
        gradient_norm: max.gradient_norm(),
        draws: problem.draw_count(),
        seed: config.seed,
        horizon: design.horizon,
        individuals: design.individuals.len(),
        observations: design.observation_count(),
        wave_columns: design.wave_columns.clone(),
        calendar_labels: design.calendar_labels.clone(),
        reversion_columns: design.reversion_columns.clone(),
        alpha_columns: design.alpha_columns.clone(),
        covariate_codings: design.encodings.clone(),
        diagnostics: Diagnostics {
            floored_contributions: ll.floored,
            nonpositive_alpha_draws: ll.nonpositive_alpha,
            hessian_rcond: sandwich.rcond,
            pseudo_inverse: sandwich.pseudo_inverse,
            unknown_levels: design.unknown_levels,
            excluded_incomplete: prepared.excluded_incomplete,
        },
    })
}

fn cell(result: &EstimationResult, name: &str) -> (String, String) {
    match result.get(name) {
        None => (String::new(), String::new()),
        Some(p) => (
            format!("{:.2}", p.estimate),
            p.t_ratio.map_or_else(|| "fixed".to_string(), |t| format!("{t:.2}")),
        ),
    }
}

type RowNames = [Option<String>; N_STAKEHOLDERS + 2];

const LABEL_WIDTH: usize = 34;
const COLUMN_WIDTH: usize = 9;

fn table_row(out: &mut String, result: &EstimationResult, label: &str, names: RowNames) {
    if names.iter().all(|n| n.as_ref().map_or(true, |n| result.get(n).is_none())) {
        if names.iter().all(Option::is_none) {
            let _ = writeln!(out, "{label}");
        }
        return;
    }
    let col = COLUMN_WIDTH;
    let _ = write!(out, "{:<w$}", label, w = LABEL_WIDTH);
    for n in &names {
        let (e, t) = n.as_ref().map_or((String::new(), String::new()), |n| cell(result, n));
        let _ = write!(out, "{e:>col$}{t:>col$}");
    }
    out.push('\n');
}

/// Human-readable estimates table: one Estimate / Rob.t-ratio(0) pair per stakeholder,
/// then the reversion and rate columns.
pub fn render_table(result: &EstimationResult) -> String {
    let mut headings: Vec<&str> = Stakeholder::ALL.iter().map(|s| s.title()).collect();
    headings.extend(["Reversion", "Alpha"]);
    let label_width = LABEL_WIDTH;
    let col = COLUMN_WIDTH;
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "");
    for h in &headings {
        let _ = write!(out, "{:^w$}", h, w = 2 * col);
    }
    out.push('\n');
    let _ = write!(out, "{:<label_width$}", "");
    for _ in &headings {
        let _ = write!(out, "{:>col$}{:>col$}", "Estimate", "Rob.t(0)");
    }
    out.push('\n');

    let per_stakeholder = |f: &dyn Fn(Stakeholder) -> String| -> RowNames {
        let mut names: RowNames = Default::default();
        for s in Stakeholder::ALL {
            names[s.index()] = Some(f(s));
        }
        names
    };

    table_row(&mut out, result, "Workshop effects", Default::default());
    for w in 1..=N_WORKSHOPS {
        table_row(&mut out, result, &format!("  Workshop {w}"), per_stakeholder(&|s| format!("beta.{s}.w{w}")));
    }
    for m in &result.wave_columns {
        table_row(&mut out, result, &format!("  Wave {m}"), per_stakeholder(&|s| format!("wave.{s}.{m}")));
    }
    let mut base: RowNames = Default::default();
    base[N_STAKEHOLDERS] = Some("rho.base".into());
    base[N_STAKEHOLDERS + 1] = Some("alpha.base".into());
    let _ = writeln!(out, "Demographics");
    table_row(&mut out, result, "  Base", base);
    let mut columns: Vec<String> = Vec::new();
    for p in &result.parameters {
        let col = if let Some(rest) = p.name.strip_prefix("gamma.") {
            rest.split_once('.').map(|(_, c)| c.to_string())
        } else if let Some(c) = p.name.strip_prefix("rho.").filter(|c| *c != "base") {
            Some(c.to_string())
        } else {
            p.name.strip_prefix("alpha.").filter(|c| *c != "base").map(str::to_string)
        };
        if let Some(c) = col {
            if !columns.contains(&c) {
                columns.push(c);
            }
        }
    }
    for c in &columns {
        let mut names = per_stakeholder(&|s| format!("gamma.{s}.{c}"));
        names[N_STAKEHOLDERS] = Some(format!("rho.{c}"));
        names[N_STAKEHOLDERS + 1] = Some(format!("alpha.{c}"));
        table_row(&mut out, result, &format!("  {c}"), names);
    }
    let _ = writeln!(out, "Random components");
    let mut sig = per_stakeholder(&|s| format!("sigma.xi.{s}"));
    sig[N_STAKEHOLDERS] = Some("sigma.rho".into());
    sig[N_STAKEHOLDERS + 1] = Some("sigma.alpha".into());
    table_row(&mut out, result, "  Std. deviation", sig);
    let mut eta: RowNames = Default::default();
    eta[0] = Some("sigma.eta".into());
    table_row(&mut out, result, "  Common error component", eta);
    if !result.calendar_labels.is_empty() {
        let _ = writeln!(out, "Calendar periods (common to all equations)");
        for label in result.calendar_labels.iter().skip(1) {
            let mut names: RowNames = Default::default();
            names[0] = Some(format!("calendar.{label}"));
            table_row(&mut out, result, &format!("  {label}"), names);
        }
    }
    let _ = writeln!(out, "Thresholds");
    for k in 1..=N_THRESHOLDS {
        table_row(&mut out, result, &format!("  tau {k}"), per_stakeholder(&|s| format!("tau.{s}.{k}")));
    }
    let _ = writeln!(
        out,
        "\nLog-likelihood {:.4}; {} individuals, {} observations, {} draws; converged: {} ({} iterations, max |gradient| {:.3e})",
        result.loglik,
        result.individuals,
        result.observations,
        result.draws,
        result.converged,
        result.iterations,
        result.gradient_norm
    );
    out
}
