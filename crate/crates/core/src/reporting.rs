//! Descriptive tables, paired t-tests, trajectory means and reversion curves.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::data::{Dataset, Stakeholder, N_TIMES};
use crate::design::CovariateEncoding;
use crate::error::{Error, Result};
use crate::estimation::EstimationResult;
use crate::model::{decay, dot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestFlag {
    /// All differences equal and nonzero.
    ZeroVariance,
    /// All differences zero.
    NoChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean: f64,
    pub t: f64,
    pub df: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub flag: Option<TTestFlag>,
}

/// Two-sided paired t-test on the differences.
pub fn paired_t_test(differences: &[f64]) -> Result<PairedTTest> {
    let n = differences.len();
    if n < 2 {
        return Err(Error::invalid(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("paired t-test on non-finite differences"));
    }
    let nf = n as f64;
    let mean = differences.iter().sum::<f64>() / nf;
    let var = differences.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            PairedTTest { n, mean, t: 0.0, df, p: 1.0, flag: Some(TTestFlag::NoChange) }
        } else {
            PairedTTest { n, mean, t: mean.signum() * f64::INFINITY, df, p: 0.0, flag: Some(TTestFlag::ZeroVariance) }
        });
    }
    let t = mean / (var / nf).sqrt();
    let dff = df as f64;
    let p = beta_reg(dff / 2.0, 0.5, dff / (dff + t * t));
    Ok(PairedTTest { n, mean, t, df, p, flag: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveRow {
    /// Stakeholder heading, or `All`.
    pub label: String,
    pub stakeholder: Option<Stakeholder>,
    pub pooled_mean: f64,
    pub observations: usize,
    /// Means over individuals rated at both the first and last measurement.
    pub mean_first: Option<f64>,
    pub mean_last: Option<f64>,
    pub change: Option<f64>,
    pub paired: usize,
    pub t: Option<f64>,
    /// Undefined with fewer than two pairs.
    pub p_value: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn row(label: &str, stakeholder: Option<Stakeholder>, all: &[f64], first: &[f64], last: &[f64]) -> Result<DescriptiveRow> {
    let diffs: Vec<f64> = first.iter().zip(last).map(|(a, b)| b - a).collect();
    let test = (diffs.len() >= 2).then(|| paired_t_test(&diffs)).transpose()?;
    let (mean_first, mean_last) = (mean(first), mean(last));
    Ok(DescriptiveRow {
        label: label.to_string(),
        stakeholder,
        pooled_mean: mean(all).ok_or_else(|| Error::invalid(format!("no observations for {label}")))?,
        observations: all.len(),
        mean_first,
        mean_last,
        change: mean_first.zip(mean_last).map(|(a, b)| b - a),
        paired: diffs.len(),
        t: test.as_ref().map(|t| t.t),
        p_value: test.map(|t| t.p),
    })
}

/// Table of pooled means and first-to-last changes; the `All` row pools every
/// (individual, stakeholder) pair.
pub fn describe(dataset: &Dataset) -> Result<Vec<DescriptiveRow>> {
    if dataset.observations.is_empty() {
        return Err(Error::invalid("dataset has no observations"));
    }
    let mut by_cell: HashMap<(&str, Stakeholder, u8), f64> = HashMap::new();
    let mut all: BTreeMap<Stakeholder, Vec<f64>> = BTreeMap::new();
    for o in &dataset.observations {
        by_cell.insert((o.individual_id.as_str(), o.stakeholder, o.time_index), f64::from(o.rating));
        all.entry(o.stakeholder).or_default().push(f64::from(o.rating));
    }
    let mut pairs: BTreeMap<Stakeholder, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rec in &dataset.individuals {
        for s in Stakeholder::ALL {
            let id = rec.individual_id.as_str();
            if let (Some(a), Some(b)) = (by_cell.get(&(id, s, 1)), by_cell.get(&(id, s, N_TIMES))) {
                let entry = pairs.entry(s).or_default();
                entry.0.push(*a);
                entry.1.push(*b);
            }
        }
    }
    let pooled: Vec<f64> = Stakeholder::ALL.iter().flat_map(|s| all.get(s).cloned().unwrap_or_default()).collect();
    let first: Vec<f64> = Stakeholder::ALL.iter().flat_map(|s| pairs.get(s).map(|p| p.0.clone()).unwrap_or_default()).collect();
    let last: Vec<f64> = Stakeholder::ALL.iter().flat_map(|s| pairs.get(s).map(|p| p.1.clone()).unwrap_or_default()).collect();
    let mut rows = vec![row("All", None, &pooled, &first, &last)?];
    let empty = (Vec::new(), Vec::new());
    for s in Stakeholder::ALL {
        let (f, l) = pairs.get(&s).unwrap_or(&empty);
        let obs = all.get(&s).map(Vec::as_slice).unwrap_or(&[]);
        if obs.is_empty() {
            continue;
        }
        rows.push(row(s.title(), Some(s), obs, f, l)?);
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_descriptives(rows: &[DescriptiveRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = ["row", "pooled_mean", "mean_t1", "mean_t10", "change", "p_value", "observations", "paired", "t"];
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.pooled_mean.to_string(),
            opt(r.mean_first),
            opt(r.mean_last),
            opt(r.change),
            opt(r.p_value),
            r.observations.to_string(),
            r.paired.to_string(),
            opt(r.t),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Two-decimal text rendering in the layout of the descriptive table.
pub fn render_descriptives(rows: &[DescriptiveRow]) -> String {
    let fmt = |v: Option<f64>, d: usize| v.map(|x| format!("{x:.d$}")).unwrap_or_else(|| "NA".into());
    let mut out = format!(
        "{:<20}{:>12}{:>14}{:>15}{:>9}{:>9}\n",
        "", "Pooled Mean", "Mean at t=1", "Mean at t=10", "Change", "p-value"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<20}{:>12.2}{:>14}{:>15}{:>9}{:>9}\n",
            r.label,
            r.pooled_mean,
            fmt(r.mean_first, 2),
            fmt(r.mean_last, 2),
            fmt(r.change, 2),
            fmt(r.p_value, 3)
        ));
    }
    out
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub stakeholder: Stakeholder,
    pub time_index: u8,
    /// `None` when nobody rated the stakeholder at this time.
    pub mean: Option<f64>,
    pub n: usize,
}

/// Mean rating per stakeholder at each of the ten measurements.
pub fn trajectories(dataset: &Dataset) -> Result<Vec<TrajectoryPoint>> {
    if dataset.observations.is_empty() {
        return Err(Error::invalid("dataset has no observations"));
    }
    let mut sums: HashMap<(Stakeholder, u8), (f64, usize)> = HashMap::new();
    for o in &dataset.observations {
        let e = sums.entry((o.stakeholder, o.time_index)).or_default();
        e.0 += f64::from(o.rating);
        e.1 += 1;
    }
    Ok(Stakeholder::ALL
        .iter()
        .flat_map(|s| (1..=N_TIMES).map(move |t| (*s, t)))
        .map(|(s, t)| {
            let (sum, n) = sums.get(&(s, t)).copied().unwrap_or_default();
            TrajectoryPoint {
                stakeholder: s,
                time_index: t,
                mean: (n > 0).then(|| sum / n as f64),
                n,
            }
        })
        .collect())
}

pub fn write_trajectories(points: &[TrajectoryPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["stakeholder", "t", "mean", "n"]).map_err(|e| csv_io(path, e))?;
    for p in points {
        w.write_record([p.stakeholder.label().to_string(), p.time_index.to_string(), opt(p.mean), p.n.to_string()])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Covariate levels defining one plotted group; covariates left out sit at their reference level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveGroup {
    pub label: String,
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub delta_days: f64,
    pub percent_remaining: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversionCurve {
    pub label: String,
    pub settings: BTreeMap<String, String>,
    pub rho: f64,
    pub alpha: f64,
    pub horizon: f64,
    pub points: Vec<CurvePoint>,
}

/// Percentage of a workshop effect left `Δ` days later, sampled `steps_per_day` times a day over 0..=D.
pub fn reversion_curve(
    label: &str,
    settings: BTreeMap<String, String>,
    rho: f64,
    alpha: f64,
    horizon: f64,
    steps_per_day: usize,
) -> Result<ReversionCurve> {
    if !(horizon > 0.0) || steps_per_day == 0 {
        return Err(Error::invalid("curves need a positive horizon and at least one step per day"));
    }
    let steps = (horizon * steps_per_day as f64).round() as usize;
    let points = (0..=steps)
        .map(|k| {
            let delta = k as f64 / steps_per_day as f64;
            decay(delta, alpha, horizon).map(|d| CurvePoint {
                delta_days: delta,
                percent_remaining: 100.0 * (1.0 - rho * d),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReversionCurve {
        label: label.to_string(),
        settings,
        rho,
        alpha,
        horizon,
        points,
    })
}

fn group_row(columns: &[String], settings: &BTreeMap<String, String>) -> Vec<f64> {
    columns
        .iter()
        .map(|c| {
            let (name, level) = c.split_once(':').unwrap_or((c, ""));
            f64::from(u8::from(settings.get(name).is_some_and(|l| l == level)))
        })
        .collect()
}

/// One curve per group from the estimated reversion and rate equations, random terms at zero.
pub fn reversion_curves(result: &EstimationResult, groups: &[CurveGroup], steps_per_day: usize) -> Result<Vec<ReversionCurve>> {
    let used: Vec<&CovariateEncoding> = result
        .covariate_codings
        .iter()
        .filter(|e| {
            let prefix = format!("{}:", e.name);
            result
                .reversion_columns
                .iter()
                .chain(&result.alpha_columns)
                .any(|c| c.starts_with(&prefix))
        })
        .collect();
    groups
        .iter()
        .map(|g| {
            for (name, level) in &g.settings {
                let enc = used.iter().find(|e| e.name == *name).ok_or_else(|| Error::UnknownCovariate {
                    name: name.clone(),
                    valid: used.iter().map(|e| e.name.as_str()).collect::<Vec<_>>().join(", "),
                })?;
                if !enc.levels.contains(level) {
                    return Err(Error::invalid(format!(
                        "covariate `{name}` has no level `{level}` (levels: {})",
                        enc.levels.join(", ")
                    )));
                }
            }
            let p = &result.params;
            let rho = p.rho_base + dot(&p.rho_effects, &group_row(&result.reversion_columns, &g.settings));
            let alpha = p.alpha_base + dot(&p.alpha_effects, &group_row(&result.alpha_columns, &g.settings));
            reversion_curve(&g.label, g.settings.clone(), rho, alpha, result.horizon, steps_per_day)
        })
        .collect()
}

/// Reference group plus one group per non-reference level of every reversion or rate covariate.
pub fn default_groups(result: &EstimationResult) -> Vec<CurveGroup> {
    let mut groups = vec![CurveGroup {
        label: "base".into(),
        settings: BTreeMap::new(),
    }];
    for c in result.reversion_columns.iter().chain(&result.alpha_columns) {
        if groups.iter().any(|g| g.label == *c) {
            continue;
        }
        if let Some((name, level)) = c.split_once(':') {
            groups.push(CurveGroup {
                label: c.clone(),
                settings: BTreeMap::from([(name.to_string(), level.to_string())]),
            });
        }
    }
    groups
}

pub fn write_curves(curves: &[ReversionCurve], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["group", "delta_days", "percent_remaining"]).map_err(|e| csv_io(path, e))?;
    for c in curves {
        for p in &c.points {
            w.write_record([c.label.clone(), p.delta_days.to_string(), p.percent_remaining.to_string()])
                .map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
