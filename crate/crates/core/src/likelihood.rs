//! Simulated log-likelihood of the panel and its analytic gradient.
//!
//! For each individual the five stakeholder equations share the same draws, so
//! the contribution is ln( (1/Q) Σ_q Π_obs P(y | draw q) ), accumulated in log
//! space with a running maximum over draws.

use rayon::prelude::*;

use crate::data::{N_STAKEHOLDERS, N_THRESHOLDS, N_TIMES, N_WORKSHOPS};
use crate::design::{DesignMatrices, IndividualDesign};
use crate::draws::DrawMatrix;
use crate::error::{Error, Result};
use crate::model::{decay_with_slope, dot, log_category_prob};
use crate::params::ParamLayout;

/// Contributions below this probability are floored.
pub const MIN_LOG_CONTRIBUTION: f64 = -690.775_527_898_213_7; // ln(1e-300)

#[derive(Clone, Debug, PartialEq)]
pub struct LogLik {
    pub total: f64,
    pub per_individual: Vec<f64>,
    /// Individuals whose simulated likelihood underflowed and was floored.
    pub floored: usize,
    /// Individual-draw pairs with a non-positive reversion rate.
    pub nonpositive_alpha: usize,
}

/// Data, layout and draws of one estimation problem.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub design: &'a DesignMatrices,
    pub layout: &'a ParamLayout,
    draws: Option<&'a DrawMatrix>,
}

impl<'a> Problem<'a> {
    /// `draws` must hold one row per design individual and one dimension per random component;
    /// it may be `None` only when the model has no random components.
    pub fn new(design: &'a DesignMatrices, layout: &'a ParamLayout, draws: Option<&'a DrawMatrix>) -> Result<Self> {
        let k = layout.draw_dimensions();
        match draws {
            None if k > 0 => Err(Error::invalid("model has random components but no draws were supplied")),
            Some(d) if k > 0 && d.dimensions() != k => Err(Error::Dimension {
                what: "draw dimensions",
                expected: k,
                found: d.dimensions(),
            }),
            Some(d) if k > 0 && d.individuals() != design.individuals.len() => Err(Error::Dimension {
                what: "draw individuals",
                expected: design.individuals.len(),
                found: d.individuals(),
            }),
            _ => Ok(Self {
                design,
                layout,
                draws: if k > 0 { draws } else { None },
            }),
        }
    }

    pub fn draw_count(&self) -> usize {
        self.draws.map_or(1, DrawMatrix::draws)
    }

    pub fn individuals(&self) -> usize {
        self.design.individuals.len()
    }

    pub fn loglik(&self, working: &[f64]) -> LogLik {
        let parts: Vec<Contribution> = (0..self.individuals())
            .into_par_iter()
            .map(|i| self.contribution::<false>(i, working))
            .collect();
        collect(parts).0
    }

    /// Log-likelihood and its gradient with respect to the working vector.
    pub fn loglik_with_gradient(&self, working: &[f64]) -> (LogLik, Vec<f64>) {
        let parts: Vec<Contribution> = (0..self.individuals())
            .into_par_iter()
            .map(|i| self.contribution::<true>(i, working))
            .collect();
        let mut grad = vec![0.0; self.layout.len()];
        for p in &parts {
            for (g, x) in grad.iter_mut().zip(&p.grad) {
                *g += x;
            }
        }
        (collect(parts).0, grad)
    }

    /// Per-individual working-space gradients (scores), in individual order.
    pub fn scores(&self, working: &[f64]) -> (LogLik, Vec<Vec<f64>>) {
        let parts: Vec<Contribution> = (0..self.individuals())
            .into_par_iter()
            .map(|i| self.contribution::<true>(i, working))
            .collect();
        collect(parts)
    }

    fn contribution<const GRAD: bool>(&self, i: usize, w: &[f64]) -> Contribution {
        let lay = self.layout;
        let ind = &self.design.individuals[i];
        let horizon = self.design.horizon;
        let q_count = self.draw_count();
        let k = lay.draw_dimensions();
        let block: &[f64] = self.draws.map_or(&[], |d| d.block(i));
        let p_len = lay.len();

        let tau: [[f64; N_THRESHOLDS]; N_STAKEHOLDERS] =
            std::array::from_fn(|s| std::array::from_fn(|r| w[lay.tau[s] + r]));
        let beta: [[f64; N_WORKSHOPS]; N_STAKEHOLDERS] =
            std::array::from_fn(|s| std::array::from_fn(|x| w[lay.beta[s] + x]));
        let fixed_part: [f64; N_STAKEHOLDERS] = std::array::from_fn(|s| {
            let wave = ind.wave_column.map_or(0.0, |c| w[lay.wave[s] + c]);
            wave + dot(&w[lay.gamma[s]..lay.gamma[s] + lay.n_gamma[s]], &ind.equation_x[s])
        });
        let (rho_mean, alpha_mean) = match (lay.rho_base, lay.alpha_base) {
            (Some(rb), Some(ab)) => (
                w[rb] + dot(&w[lay.rho_effects..lay.rho_effects + lay.n_rho_effects], &ind.reversion_x),
                w[ab] + dot(&w[lay.alpha_effects..lay.alpha_effects + lay.n_alpha_effects], &ind.alpha_x),
            ),
            _ => (0.0, 0.0),
        };
        let sig = |slot: Option<usize>| slot.map_or(0.0, |j| w[j]);
        let sigma_rho = sig(lay.sigma_rho);
        let sigma_alpha = sig(lay.sigma_alpha);
        let sigma_xi: [f64; N_STAKEHOLDERS] = std::array::from_fn(|s| sig(lay.sigma_xi[s]));
        let sigma_eta = sig(lay.sigma_eta);
        let draw = |row: &[f64], slot: Option<usize>| slot.map_or(0.0, |d| row[d]);

        // with a fixed rate the decays, and so each observation's workshop terms, are the same for every draw
        let alpha_fixed = lay.draws.alpha.is_none();
        let mut decays = [[0.0; N_WORKSHOPS]; N_TIMES as usize];
        let mut slopes = [[0.0; N_WORKSHOPS]; N_TIMES as usize];
        let mut ready = [false; N_TIMES as usize];
        let mut fixed_terms: Vec<[f64; 3]> = Vec::new();
        if alpha_fixed {
            fixed_terms.reserve(ind.observations.len());
            for obs in &ind.observations {
                let t = usize::from(obs.time_index) - 1;
                let occurred = usize::from(obs.time_index) / 2;
                if !ready[t] {
                    fill_decays(ind, t, occurred, alpha_mean, horizon, &mut decays[t], &mut slopes[t]);
                    ready[t] = true;
                }
                let calendar = if obs.period > 0 { w[lay.calendar + obs.period - 1] } else { 0.0 };
                fixed_terms.push(observation_terms(&beta[obs.stakeholder], &decays[t], &slopes[t], occurred, fixed_part[obs.stakeholder] + calendar));
            }
        }

        // with no random reversion either, V differs across draws only by the stakeholder shift, so
        // the logistic factors are exp(fixed - τ) scaled by exp(shift)
        let factored: Vec<Option<Factored>> = if alpha_fixed && lay.draws.rho.is_none() {
            ind.observations
                .iter()
                .zip(&fixed_terms)
                .map(|(obs, [base, reverted, _])| Factored::new(base - rho_mean * reverted, &tau[obs.stakeholder], usize::from(obs.rating)))
                .collect()
        } else {
            Vec::new()
        };

        let mut acc = if GRAD { vec![0.0; p_len] } else { Vec::new() };
        let mut g = if GRAD { vec![0.0; p_len] } else { Vec::new() };
        let mut max_lp = f64::NEG_INFINITY;
        let mut weight_sum = 0.0;
        let mut nonpositive_alpha = 0;

        for q in 0..q_count {
            let row = if k > 0 { &block[q * k..(q + 1) * k] } else { &[][..] };
            let z_rho = draw(row, lay.draws.rho);
            let z_alpha = draw(row, lay.draws.alpha);
            let z_eta = draw(row, lay.draws.eta);
            let z_xi: [f64; N_STAKEHOLDERS] = std::array::from_fn(|s| draw(row, lay.draws.xi[s]));
            let rho = rho_mean + sigma_rho * z_rho;
            let alpha = alpha_mean + sigma_alpha * z_alpha;
            if lay.alpha_base.is_some() && alpha <= 0.0 {
                nonpositive_alpha += 1;
            }
            let eta = sigma_eta * z_eta;
            let shift: [f64; N_STAKEHOLDERS] = std::array::from_fn(|s| sigma_xi[s] * z_xi[s] + eta);
            if !alpha_fixed {
                ready = [false; N_TIMES as usize];
            }

            let scale: [f64; N_STAKEHOLDERS] = if factored.is_empty() {
                [0.0; N_STAKEHOLDERS]
            } else {
                shift.map(f64::exp)
            };
            let mut lp = 0.0;
            let mut product = 1.0;
            let mut g_rho = 0.0;
            let mut g_alpha = 0.0;
            let mut g_xi = [0.0; N_STAKEHOLDERS];
            let mut g_eta = 0.0;
            if GRAD {
                g.iter_mut().for_each(|x| *x = 0.0);
            }

            for (o, obs) in ind.observations.iter().enumerate() {
                let t = usize::from(obs.time_index) - 1;
                let occurred = usize::from(obs.time_index) / 2;
                let s = obs.stakeholder;
                let [base, reverted, reverted_slope] = if alpha_fixed {
                    fixed_terms[o]
                } else {
                    if !ready[t] {
                        fill_decays(ind, t, occurred, alpha, horizon, &mut decays[t], &mut slopes[t]);
                        ready[t] = true;
                    }
                    let calendar = if obs.period > 0 { w[lay.calendar + obs.period - 1] } else { 0.0 };
                    observation_terms(&beta[s], &decays[t], &slopes[t], occurred, fixed_part[s] + calendar)
                };
                let r = usize::from(obs.rating);
                let fast = factored.get(o).copied().flatten().map(|f| f.eval(scale[s])).filter(|(p, _, _)| *p > 0.0);
                let (ga, gb) = match fast {
                    Some((p, ga, gb)) => {
                        product *= p;
                        if product < PRODUCT_FLOOR {
                            lp += product.ln();
                            product = 1.0;
                        }
                        (ga, gb)
                    }
                    None => {
                        let (logp, ga, gb) = log_category_prob(base - rho * reverted + shift[s], &tau[s], r);
                        lp += logp;
                        (ga, gb)
                    }
                };
                if GRAD {
                    let gv = -(ga + gb);
                    if r > 0 {
                        g[lay.tau[s] + r - 1] += ga;
                    }
                    if r < N_THRESHOLDS {
                        g[lay.tau[s] + r] += gb;
                    }
                    let d = &decays[t];
                    for x in 0..occurred {
                        g[lay.beta[s] + x] += gv * (1.0 - rho * d[x]);
                    }
                    g_rho -= gv * reverted;
                    g_alpha -= gv * rho * reverted_slope;
                    g_xi[s] += gv;
                    g_eta += gv;
                    if let Some(c) = ind.wave_column {
                        g[lay.wave[s] + c] += gv;
                    }
                    let start = lay.gamma[s];
                    for (j, x) in ind.equation_x[s].iter().enumerate() {
                        g[start + j] += gv * x;
                    }
                    if obs.period > 0 {
                        g[lay.calendar + obs.period - 1] += gv;
                    }
                }
            }

            lp += product.ln();
            if GRAD {
                if let Some(rb) = lay.rho_base {
                    g[rb] += g_rho;
                    for (j, x) in ind.reversion_x.iter().enumerate() {
                        g[lay.rho_effects + j] += g_rho * x;
                    }
                }
                if let Some(ab) = lay.alpha_base {
                    g[ab] += g_alpha;
                    for (j, x) in ind.alpha_x.iter().enumerate() {
                        g[lay.alpha_effects + j] += g_alpha * x;
                    }
                }
                if let Some(j) = lay.sigma_rho {
                    g[j] += g_rho * z_rho;
                }
                if let Some(j) = lay.sigma_alpha {
                    g[j] += g_alpha * z_alpha;
                }
                for s in 0..N_STAKEHOLDERS {
                    if let Some(j) = lay.sigma_xi[s] {
                        g[j] += g_xi[s] * z_xi[s];
                    }
                }
                if let Some(j) = lay.sigma_eta {
                    g[j] += g_eta * z_eta;
                }
            }

            if lp == f64::NEG_INFINITY || lp.is_nan() {
                continue;
            }
            if lp > max_lp {
                let scale = (max_lp - lp).exp();
                weight_sum = weight_sum * scale + 1.0;
                if GRAD {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        *a = *a * scale + x;
                    }
                }
                max_lp = lp;
            } else {
                let wq = (lp - max_lp).exp();
                weight_sum += wq;
                if GRAD {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        *a += wq * x;
                    }
                }
            }
        }

        let mut ll = max_lp + weight_sum.ln() - (q_count as f64).ln();
        let floored = !(ll > MIN_LOG_CONTRIBUTION);
        if floored {
            ll = MIN_LOG_CONTRIBUTION;
            acc.iter_mut().for_each(|a| *a = 0.0);
        } else if GRAD {
            acc.iter_mut().for_each(|a| *a /= weight_sum);
        }
        Contribution {
            ll,
            grad: acc,
            floored,
            nonpositive_alpha,
        }
    }
}

const PRODUCT_FLOOR: f64 = 1e-250;
/// Largest |V - τ| kept in factored form; beyond it exp could overflow once scaled.
const FACTOR_LIMIT: f64 = 300.0;

/// One observation's category probability as a function of m = exp(shift):
/// with A = a·m and B = b·m, P = m·gap / ((1 + A)(1 + B)).
#[derive(Clone, Copy, Debug)]
struct Factored {
    /// exp(V - τ_lower) without the shift, or 0 for the lowest category.
    a: f64,
    /// exp(V - τ_upper) without the shift, or +inf for the top category.
    b: f64,
    /// a - b, formed without cancellation.
    gap: f64,
}

impl Factored {
    fn new(v: f64, tau: &[f64; N_THRESHOLDS], r: usize) -> Option<Self> {
        let lower = (r > 0).then(|| v - tau[r - 1]);
        let upper = (r < N_THRESHOLDS).then(|| v - tau[r]);
        if lower.into_iter().chain(upper).any(|x| x.abs() > FACTOR_LIMIT) {
            return None;
        }
        let a = lower.map_or(0.0, f64::exp);
        let b = upper.map_or(f64::INFINITY, f64::exp);
        let gap = match (lower, upper) {
            (Some(_), Some(_)) => -a * (tau[r - 1] - tau[r]).exp_m1(),
            _ => 0.0,
        };
        Some(Self { a, b, gap })
    }

    /// P and the derivatives of ln P with respect to the lower and upper threshold arguments.
    #[inline]
    fn eval(self, m: f64) -> (f64, f64, f64) {
        let big_a = self.a * m;
        if self.b.is_infinite() {
            // top category: P = 1 - Λ(τ_lower - V)
            return (big_a / (1.0 + big_a), -1.0 / (1.0 + big_a), 0.0);
        }
        let big_b = self.b * m;
        if self.a == 0.0 {
            // bottom category: P = Λ(τ_upper - V)
            return (1.0 / (1.0 + big_b), 0.0, big_b / (1.0 + big_b));
        }
        let d = self.gap * m;
        let (one_a, one_b) = (1.0 + big_a, 1.0 + big_b);
        (d / (one_a * one_b), -big_a * one_b / (one_a * d), big_b * one_a / (one_b * d))
    }
}

/// Non-random part of V with the workshop effects at full strength, the reverting
/// part Σ β_w d_w, and its slope in the rate.
#[inline]
fn observation_terms(
    beta: &[f64; N_WORKSHOPS],
    decays: &[f64; N_WORKSHOPS],
    slopes: &[f64; N_WORKSHOPS],
    occurred: usize,
    offset: f64,
) -> [f64; 3] {
    let mut workshop = 0.0;
    let mut reverted = 0.0;
    let mut reverted_slope = 0.0;
    for x in 0..occurred {
        workshop += beta[x];
        reverted += beta[x] * decays[x];
        reverted_slope += beta[x] * slopes[x];
    }
    [workshop + offset, reverted, reverted_slope]
}

#[inline]
fn fill_decays(
    ind: &IndividualDesign,
    t: usize,
    occurred: usize,
    alpha: f64,
    horizon: f64,
    decays: &mut [f64; N_WORKSHOPS],
    slopes: &mut [f64; N_WORKSHOPS],
) {
    for x in 0..occurred {
        let (d, s) = decay_with_slope(ind.deltas[t][x], alpha, horizon);
        decays[x] = d;
        slopes[x] = s;
    }
}

struct Contribution {
    ll: f64,
    grad: Vec<f64>,
    floored: bool,
    nonpositive_alpha: usize,
}

fn collect(parts: Vec<Contribution>) -> (LogLik, Vec<Vec<f64>>) {
    let mut per_individual = Vec::with_capacity(parts.len());
    let mut grads = Vec::with_capacity(parts.len());
    let mut floored = 0;
    let mut nonpositive_alpha = 0;
    for p in parts {
        per_individual.push(p.ll);
        floored += usize::from(p.floored);
        nonpositive_alpha += p.nonpositive_alpha;
        grads.push(p.grad);
    }
    let total = per_individual.iter().sum();
    if floored > 0 {
        log::warn!("{floored} individual likelihood contributions floored at 1e-300");
    }
    (
        LogLik {
            total,
            per_individual,
            floored,
            nonpositive_alpha,
        },
        grads,
    )
}

/// Convenience wrapper: total and per-individual simulated log-likelihood.
pub fn simulated_loglik(
    working: &[f64],
    design: &DesignMatrices,
    layout: &ParamLayout,
    draws: Option<&DrawMatrix>,
) -> Result<LogLik> {
    if working.len() != layout.len() {
        return Err(Error::Dimension {
            what: "parameter vector",
            expected: layout.len(),
            found: working.len(),
        });
    }
    Ok(Problem::new(design, layout, draws)?.loglik(working))
}

#[cfg(test)]
mod tests {
    use crate::estimation::Prepared;
    use crate::optimize::central_difference_gradient;
    use crate::synthesis::{simulate_dataset, ScenarioSpec};
    use rand::{Rng, SeedableRng};

    fn fixture(n: usize, q: usize, random_reversion: bool) -> (Prepared, Vec<f64>) {
        let mut spec = ScenarioSpec::recovery(n, 11);
        if random_reversion {
            spec.model.random.sigma_rho = true;
            spec.model.random.sigma_alpha = true;
            spec.truth.insert("sigma.rho".into(), 0.2);
            spec.truth.insert("sigma.alpha".into(), 1.0);
        }
        let sim = simulate_dataset(&spec).unwrap();
        let mut cfg = spec.estimation_config();
        cfg.draws = q;
        let prepared = Prepared::new(&sim.dataset, &cfg, false).unwrap();
        let truth = prepared.working(&sim.truth).unwrap();
        (prepared, truth)
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        check_gradient(false);
    }

    #[test]
    fn analytic_gradient_matches_differences_with_random_reversion() {
        check_gradient(true);
    }

    fn check_gradient(random_reversion: bool) {
        let (prepared, truth) = fixture(24, 15, random_reversion);
        let problem = prepared.problem();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..4 {
            let mut w = truth.clone();
            if trial > 0 {
                for (j, e) in prepared.layout.entries().iter().enumerate() {
                    if !matches!(e.kind, crate::params::ParamKind::Threshold { .. }) {
                        w[j] += rng.gen_range(-0.2..0.2);
                    }
                }
            }
            let (_, g) = problem.loglik_with_gradient(&w);
            let fd = central_difference_gradient(|x| problem.loglik(x).total, &w, 1e-6);
            for (j, (a, b)) in g.iter().zip(&fd).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-4 * b.abs().max(1.0),
                    "{}: analytic {a} vs differences {b}",
                    prepared.layout.entries()[j].name
                );
            }
        }
    }
}
